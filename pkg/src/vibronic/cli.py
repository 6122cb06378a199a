"""``vibronic`` command-line interface.

Exit codes: 0 success (cs-check: classical), 1 error, 2 usage error,
3 fit written but unconverged, 10 cs-check violation, 11 cs-check inconclusive.
"""

import argparse
import datetime as _dt
import json
import os
import sys
import time
from pathlib import Path

import numba

from . import __version__
from .correlator import CorrelationHistogram, correlate
from .csanalyzer import cs_check
from .errors import ConfigurationError, VibronicError
from .fitter import PosteriorSummary, SamplerSettings, fit_g2, load_fit_config
from .lineshape import LineshapeParams, PhononDOS, ReweightSpec, reweight_dos, synthesize_spectrum
from .manifest import build_manifest, write_manifest
from .pipeline import load_config, resolve_data_path, run_pipeline
from .simulator import SceneConfig, simulate
from .timetags import read_ptg, write_ptg
from .units import parse_duration

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_UNCONVERGED = 0, 1, 2, 3
SEED_ENV = "VIBRONIC_SEED"


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _seed(args, fallback=0):
    """Seed precedence: --seed flag, then $VIBRONIC_SEED, then the config/default value."""
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            value = int(env, 0)
        except ValueError:
            raise ConfigurationError(f"{SEED_ENV}={env!r} is not an integer") from None
        if not 0 <= value < 2**64:
            raise ConfigurationError(f"{SEED_ENV} must be an unsigned 64-bit integer")
        return value
    return fallback


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:  # ValueError covers bad JSON and bad UTF-8
        raise ConfigurationError(f"cannot read {what} {path}: {exc}") from None


def _manifest_for(out, command, config, seed, inputs, outputs, started, t0):
    path = Path(str(out) + ".manifest.json")
    write_manifest(path, build_manifest(command, config, seed, inputs, outputs, Path(out).parent, started,
                                        round(time.perf_counter() - t0, 3)))


def cmd_lineshape(args):
    started, t0 = _now(), time.perf_counter()
    dos_path = resolve_data_path(args.dos)
    dos = PhononDOS.from_csv(dos_path)
    inputs = [dos_path]
    if args.reweight:
        rw = resolve_data_path(args.reweight)
        dos = reweight_dos(dos, ReweightSpec.from_json(rw))
        inputs.append(rw)
    params = LineshapeParams(huang_rhys=args.s, temperature=args.temp, zpl_energy=args.zpl, zpl_fwhm=args.gamma,
                             acoustic_s=args.acoustic_s, acoustic_cutoff=args.acoustic_cutoff,
                             prefactor_mode=args.prefactor)
    spectrum = synthesize_spectrum(params, dos)
    out = Path(args.out)
    spectrum.to_csv(out)
    _manifest_for(out, "lineshape", params.to_dict(), None, inputs, [out, out.with_suffix(".json")], started, t0)
    print(f"wrote {out} ({spectrum.energies.size} points)")
    return EXIT_OK


def cmd_simulate(args):
    started, t0 = _now(), time.perf_counter()
    doc = _read_json(args.config, "scene config")
    doc["seed"] = _seed(args, doc.get("seed", 0))
    scene = SceneConfig.from_dict(doc)
    photons, phonons = simulate(scene)
    write_ptg(args.out, photons)
    outputs = [Path(args.out)]
    if args.phonons:
        write_ptg(args.phonons, phonons)
        outputs.append(Path(args.phonons))
    _manifest_for(args.out, "simulate", scene.to_dict(), scene.seed, [args.config], outputs, started, t0)
    print(f"wrote {len(photons)} photons to {args.out}" + (f", {len(phonons)} phonons to {args.phonons}"
                                                          if args.phonons else ""))
    return EXIT_OK


def _stream_ref(ref):
    """``file.ptg[:channel]`` -> (path, channel or None)."""
    path, sep, chan = ref.rpartition(":")
    if sep and chan.isdigit():
        return path, int(chan)
    return ref, None


def cmd_correlate(args):
    started, t0 = _now(), time.perf_counter()
    streams, inputs = [], []
    for ref in (args.a, args.b):
        path, chan = _stream_ref(ref)
        s = read_ptg(path)
        streams.append(s if chan is None else s.split_by_channel(chan))
        inputs.append(path)
    same = args.a == args.b
    bin_ps = parse_duration(args.bin)
    window_ps = parse_duration(args.window)
    hist = correlate(streams[0], streams[0] if same else streams[1], bin_ps, window_ps)
    hist.meta.update({"stream_a": args.a, "stream_b": args.b})
    hist.to_json(args.out)
    _manifest_for(args.out, "correlate", {"a": args.a, "b": args.b, "bin_ps": bin_ps, "window_ps": window_ps},
                  None, inputs, [args.out], started, t0)
    print(f"wrote {args.out} ({hist.n_bins} bins, {int(hist.counts.sum())} coincidences)")
    return EXIT_OK


def cmd_fit(args):
    started, t0 = _now(), time.perf_counter()
    hist = CorrelationHistogram.from_json(args.hist)
    doc = _read_json(args.config, "fit config") if args.config else {}
    priors, sampler = load_fit_config(doc)
    overrides = {k: v for k, v in (("chains", args.chains), ("samples", args.samples), ("burn_in", args.burn_in))
                 if v is not None}
    if overrides:
        sampler = SamplerSettings(**{**sampler.__dict__, **overrides})
    seed = _seed(args, doc.get("seed", 0))
    summary = fit_g2(hist, priors, sampler, seed=seed)
    summary.to_json(args.out)
    outputs = [Path(args.out)]
    if args.curve:
        summary.curve_csv(args.curve)
        outputs.append(Path(args.curve))
    _manifest_for(args.out, "fit", summary.settings, seed, [args.hist] + ([args.config] if args.config else []),
                  outputs, started, t0)
    print(summary.report())
    if not summary.converged:
        worst = max(summary.diagnostics["rhat"].items(), key=lambda kv: kv[1])
        print(f"warning: fit did not converge (R-hat {worst[0]} = {worst[1]:.3f})", file=sys.stderr)
        return EXIT_UNCONVERGED
    return EXIT_OK


def cmd_cs_check(args):
    posts = [PosteriorSummary.from_json(p) for p in (args.ll, args.mm, args.lm)]
    verdict = cs_check(*posts, n_draws=args.draws, seed=_seed(args, 0),
                       violation_threshold=args.violation_threshold, classical_threshold=args.classical_threshold,
                       pair=(args.ll, args.mm))
    if args.out:
        verdict.to_json(args.out)
    else:
        print(json.dumps(verdict.to_dict(), indent=1))
    ratio = "n/a" if verdict.ratio is None else f"{verdict.ratio:.3f}"
    print(f"R = {ratio}  P(R>1) = {verdict.probability_violation:.3f}  {verdict.classification}",
          file=sys.stderr)
    for d in verdict.diagnostics:
        print(f"note: {d}", file=sys.stderr)
    return verdict.exit_code


def cmd_pipeline(args):
    started, t0 = _now(), time.perf_counter()
    config = load_config(args.config)
    seed = _seed(args, config.get("seed", 0))
    out = Path(args.out)
    result = run_pipeline(config, out, seed=seed, log=None if args.quiet else print)
    inputs = [resolve_data_path(args.config)] + result.inputs
    manifest = build_manifest("pipeline", result.resolved_config, seed, inputs, result.outputs, out, started,
                              round(time.perf_counter() - t0, 3))
    write_manifest(out / "manifest.json", manifest)
    if result.unconverged:
        print(f"warning: unconverged fits: {', '.join(result.unconverged)}", file=sys.stderr)
        return EXIT_UNCONVERGED
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="vibronic", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=0, help="worker threads for correlation (0 = auto)")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("lineshape", help="synthesize an emission spectrum from a phonon DOS")
    q.add_argument("--dos", required=True, help="DOS CSV (energy_meV,dos) or builtin:<name>")
    q.add_argument("--s", type=float, required=True, help="Huang-Rhys factor")
    q.add_argument("--temp", type=float, default=0.0, help="temperature in K")
    q.add_argument("--zpl", type=float, default=2.21, help="ZPL energy in eV")
    q.add_argument("--gamma", type=float, default=1.3, help="ZPL FWHM in meV")
    q.add_argument("--reweight", help="Lorentzian reweighting JSON")
    q.add_argument("--prefactor", choices=("none", "cross_section", "rate_cubed"), default="none")
    q.add_argument("--acoustic-s", type=float, default=0.0, help="ohmic acoustic coupling strength")
    q.add_argument("--acoustic-cutoff", type=float, default=10.0, help="acoustic cutoff energy in meV")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_lineshape)

    q = sub.add_parser("simulate", help="generate photon (and phonon) time tags from a scene config")
    q.add_argument("--config", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--phonons")
    q.add_argument("--seed", type=int)
    q.set_defaults(func=cmd_simulate)

    q = sub.add_parser("correlate", help="g2 histogram between two time-tag streams")
    q.add_argument("--a", required=True, help="file.ptg[:channel]")
    q.add_argument("--b", required=True, help="file.ptg[:channel]")
    q.add_argument("--bin", required=True, help="bin width, e.g. 500ps")
    q.add_argument("--window", required=True, help="max |tau|, e.g. 50ns")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_correlate)

    q = sub.add_parser("fit", help="Bayesian two-level fit of a g2 histogram")
    q.add_argument("--hist", required=True)
    q.add_argument("--config", help="JSON with optional 'priors' and 'sampler' sections")
    q.add_argument("--chains", type=int)
    q.add_argument("--samples", type=int)
    q.add_argument("--burn-in", type=int)
    q.add_argument("--seed", type=int)
    q.add_argument("--out", required=True)
    q.add_argument("--curve", help="also write the median curve and band as CSV")
    q.set_defaults(func=cmd_fit)

    q = sub.add_parser("cs-check", help="Cauchy-Schwarz test for one band pair")
    q.add_argument("--ll", required=True)
    q.add_argument("--mm", required=True)
    q.add_argument("--lm", required=True)
    q.add_argument("--draws", type=int, default=10_000)
    q.add_argument("--seed", type=int)
    q.add_argument("--violation-threshold", type=float, default=0.95)
    q.add_argument("--classical-threshold", type=float, default=0.05)
    q.add_argument("--out")
    q.set_defaults(func=cmd_cs_check)

    q = sub.add_parser("pipeline", help="run all stages from one config")
    q.add_argument("--config", required=True)
    q.add_argument("--out", required=True, help="output directory")
    q.add_argument("--seed", type=int)
    q.add_argument("--quiet", action="store_true")
    q.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 0:
        parser.error("--threads must be >= 0")
    if args.threads:
        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    try:
        return args.func(args)
    except (VibronicError, OSError) as exc:
        print(f"vibronic {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
