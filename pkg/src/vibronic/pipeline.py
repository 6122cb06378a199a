"""End-to-end runs: lineshape -> band weights -> simulate -> correlate -> fit -> Cauchy-Schwarz.

A pipeline config is one JSON document::

    {
      "seed": 1,
      "lineshape": {"dos": "builtin:hbn_model_dos.csv", "reweight": "builtin:hbn_reweight.json",
                    "params": {"huang_rhys": 1.0, "temperature": 3.6}},
      "bands": [{"name": "0", "redshift_meV": [-60, 60], "phonons": 0}, ...],
      "scene": {"duration": "2s", "emitters": [...], "background_fraction": [...], ...},
      "correlate": {"bin": "500ps", "window": "50ns", "photon_phonon": true},
      "fit": {"priors": {...}, "sampler": {...}},
      "cs": {"n_draws": 10000, "violation_threshold": 0.95, "classical_threshold": 0.05}
    }

Band edges are given as redshift from the ZPL in meV (negative = blue side).
Emitters take ``"branching": "spectrum"`` (band weights of the synthesized
spectrum) or an explicit list, and either an ``excitation_rate`` or
``"match": {"emitter": i, "band": l}`` to emit into its bands at the same
rate as emitter ``i`` does into band ``l``. ``background_fraction[l]`` sets
the background share of band ``l``'s detected rate.
"""

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .correlator import correlate
from .csanalyzer import cs_check
from .errors import ConfigurationError, VibronicError
from .fitter import fit_g2, load_fit_config
from .lineshape import LineshapeParams, PhononDOS, ReweightSpec, band_weights, reweight_dos, synthesize_spectrum
from .simulator import EmitterConfig, SceneConfig, simulate
from .timetags import write_ptg
from .units import parse_duration

_NAME = re.compile(r"^[A-Za-z0-9_-]+$")
_TOP_KEYS = {"seed", "lineshape", "bands", "scene", "correlate", "fit", "cs", "description"}


class StageError(VibronicError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def resolve_data_path(ref, base=None):
    """``builtin:<name>`` refers to a bundled data file; other paths resolve against ``base``."""
    if ref is None:
        return None
    ref = str(ref)
    if ref.startswith("builtin:"):
        path = resources.files("vibronic") / "data" / ref[len("builtin:"):]
        if not path.is_file():
            raise ConfigurationError(f"no bundled data file {ref!r}")
        return Path(str(path))
    path = Path(ref)
    if not path.is_absolute() and base is not None:
        path = Path(base) / path
    return path


def load_config(path):
    path = resolve_data_path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"cannot read pipeline config {path}: {exc}") from None
    doc.setdefault("_base_dir", str(path.parent.resolve()))
    return doc


@dataclass
class Band:
    name: str
    low: float  # redshift, meV
    high: float
    phonons: int = 0
    label: str = None

    def energies_ev(self, zpl_ev):
        return zpl_ev - self.high * 1e-3, zpl_ev - self.low * 1e-3


def _bands(doc):
    if not isinstance(doc, list) or not doc:
        raise ConfigurationError("'bands' must be a non-empty list")
    out = []
    for i, b in enumerate(doc):
        try:
            lo, hi = (float(v) for v in b["redshift_meV"])
            band = Band(str(b.get("name", i)), lo, hi, int(b.get("phonons", 0)), b.get("label"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"band {i}: {exc}") from None
        if not _NAME.match(band.name):
            raise ConfigurationError(f"band name {band.name!r} must match {_NAME.pattern}")
        out.append(band)
    if len({b.name for b in out}) != len(out):
        raise ConfigurationError("band names must be unique")
    return out


def validate(config):
    """Check the structure of a pipeline config without running anything."""
    unknown = set(config) - _TOP_KEYS - {"_base_dir"}
    if unknown:
        raise ConfigurationError(f"unknown pipeline config keys: {sorted(unknown)}")
    for key in ("lineshape", "bands", "scene"):
        if key not in config:
            raise ConfigurationError(f"pipeline config is missing {key!r}")
    params = config["lineshape"].get("params", {})
    if params.get("huang_rhys") is None:
        raise ConfigurationError("lineshape.params.huang_rhys must be set explicitly (no default)")
    LineshapeParams.from_dict(params)
    _bands(config["bands"])
    load_fit_config(config.get("fit", {}))


def resolve_scene(scene_doc, weights, seed):
    """Concrete :class:`SceneConfig` from the pipeline scene section and band weights."""
    doc = dict(scene_doc)
    nb = len(weights)
    emitters = []
    for i, e in enumerate(doc.pop("emitters", [])):
        e = dict(e)
        match = e.pop("match", None)
        if e.get("branching") == "spectrum":
            e["branching"] = list(weights)
        if match is not None:
            if "excitation_rate" in e:
                raise ConfigurationError(f"emitter {i}: give either excitation_rate or match, not both")
            j, band = int(match["emitter"]), int(match["band"])
            if not 0 <= j < len(emitters) or not 0 <= band < nb:
                raise ConfigurationError(f"emitter {i}: match refers to an unknown emitter or band")
            own = float(np.sum(e["branching"]))
            target = emitters[j].cycle_rate * emitters[j].branching[band]
            if own <= 0 or target <= 0:
                raise ConfigurationError(f"emitter {i}: cannot match a zero rate")
            cycle = target / own
            life = EmitterConfig.from_dict(dict(e, excitation_rate=1.0))
            if cycle * life.excited_lifetime >= 1:
                raise ConfigurationError(f"emitter {i}: matched rate exceeds the lifetime limit")
            e["excitation_rate"] = 1.0 / (1.0 / cycle - life.excited_lifetime)
        emitters.append(EmitterConfig.from_dict(e))
    fractions = doc.pop("background_fraction", None)
    if fractions is not None:
        if "background_rates" in doc:
            raise ConfigurationError("give either background_rates or background_fraction, not both")
        if len(fractions) != nb or any(not 0 <= f < 1 for f in fractions):
            raise ConfigurationError(f"background_fraction needs {nb} entries in [0, 1)")
        eff = np.asarray(doc.get("detection_efficiency") or [1.0] * nb, dtype=float)
        leak = np.asarray(doc.get("leakage") or np.eye(nb), dtype=float)
        emitted = sum(em.cycle_rate * (np.asarray(em.branching) @ leak) for em in emitters) * eff
        doc["background_rates"] = [float(r * f / (1 - f)) for r, f in zip(emitted, fractions)]
    doc["seed"] = seed
    return SceneConfig(emitters=emitters, band_count=nb, **doc)


def _derived_seed(seed, *path):
    return int(np.random.SeedSequence([int(seed), *path]).generate_state(1, dtype=np.uint64)[0])


def _dump(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


@dataclass
class PipelineResult:
    summary: dict
    outputs: list = field(default_factory=list)
    inputs: list = field(default_factory=list)
    resolved_config: dict = field(default_factory=dict)

    @property
    def unconverged(self):
        return self.summary.get("unconverged_fits", [])


def run_pipeline(config, out_dir, seed=None, log=print):
    """Run every stage, writing results under ``out_dir``; returns :class:`PipelineResult`.

    Result files carry no timestamps, so reruns with the same seed are
    byte-identical (the manifest written by the caller is the exception).
    """
    log = log or (lambda *a: None)
    try:
        validate(config)
    except VibronicError as exc:
        raise StageError("config", str(exc)) from None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = config.get("_base_dir")
    seed = int(config.get("seed", 0) if seed is None else seed)
    outputs, inputs = [], []

    def stage(name):
        log(f"[{name}]")
        return name

    current = stage("lineshape")
    try:
        ls = config["lineshape"]
        dos_path = resolve_data_path(ls.get("dos", "builtin:hbn_model_dos.csv"), base)
        inputs.append(dos_path)
        dos = PhononDOS.from_csv(dos_path)
        if ls.get("reweight"):
            rw_path = resolve_data_path(ls["reweight"], base)
            inputs.append(rw_path)
            dos = reweight_dos(dos, ReweightSpec.from_json(rw_path))
        params = LineshapeParams.from_dict(ls["params"])
        spectrum = synthesize_spectrum(params, dos)
        spectrum.to_csv(out / "spectrum.csv")
        outputs += [out / "spectrum.csv", out / "spectrum.json"]

        current = stage("band_weights")
        bands = _bands(config["bands"])
        windows = [b.energies_ev(params.zpl_energy) for b in bands]
        weights = band_weights(spectrum, windows)
        outputs.append(_dump(out / "band_weights.json", {
            "bands": [{"name": b.name, "label": b.label or b.name, "redshift_meV": [b.low, b.high],
                       "energy_eV": list(w), "weight": wt} for b, w, wt in zip(bands, windows, weights)]}))

        current = stage("simulate")
        scene_doc = dict(config["scene"])
        for i, e in enumerate(scene_doc.get("emitters", [])):
            if "phonon_tags" not in e and e.get("branching") == "spectrum":
                scene_doc["emitters"][i] = dict(e, phonon_tags=[b.phonons for b in bands])
        scene = resolve_scene(scene_doc, weights, _derived_seed(seed, 1))
        outputs.append(_dump(out / "scene.json", scene.to_dict()))
        photons, phonons = simulate(scene)
        write_ptg(out / "photons.ptg", photons)
        write_ptg(out / "phonons.ptg", phonons)
        outputs += [out / "photons.ptg", out / "phonons.ptg"]
        log(f"  {len(photons)} photons, {len(phonons)} phonons")

        current = stage("correlate")
        cc = dict(config.get("correlate", {}))
        bin_ps = parse_duration(str(cc.get("bin", "500ps")))
        window_ps = parse_duration(str(cc.get("window", "50ns")))
        streams = [photons.split_by_channel(i) for i in range(len(bands))]
        pairs = [(i, j) for i in range(len(bands)) for j in range(i, len(bands))]
        hists = {}
        (out / "hist").mkdir(exist_ok=True)
        for i, j in pairs:
            h = correlate(streams[i], streams[j], bin_ps, window_ps)
            h.meta.update({"band_a": bands[i].name, "band_b": bands[j].name})
            name = f"g2_{bands[i].name}_{bands[j].name}"
            h.to_json(out / "hist" / f"{name}.json")
            outputs.append(out / "hist" / f"{name}.json")
            hists[(i, j)] = h
        photon_phonon = {}
        if cc.get("photon_phonon", True) and len(phonons):
            for i, b in enumerate(bands):
                ph = phonons.split_by_channel(i)
                if b.phonons and len(ph) and len(streams[i]):
                    h = correlate(streams[i], ph, bin_ps, window_ps)
                    path = out / "hist" / f"photon_phonon_{b.name}.json"
                    h.to_json(path)
                    outputs.append(path)
                    k = h.n_side
                    base_level = float(np.mean(np.r_[h.g2[: k // 2], h.g2[-(k // 2):]])) if k >= 2 else float("nan")
                    photon_phonon[b.name] = {"g2_peak": float(h.g2[k]), "g2_baseline": base_level}

        current = stage("fit")
        priors, sampler = load_fit_config(config.get("fit", {}))
        fits = {}
        for i, j in pairs:
            name = f"{bands[i].name}_{bands[j].name}"
            fit = fit_g2(hists[(i, j)], priors, sampler, seed=_derived_seed(seed, 2, i, j))
            path = out / "fits" / f"fit_{name}.json"
            path.parent.mkdir(exist_ok=True)
            fit.to_json(path)
            outputs.append(path)
            fits[(i, j)] = fit
            log(f"  g2_{name}: {fit.report()}" + ("" if fit.converged else "  (unconverged)"))

        current = stage("cs_check")
        cs_cfg = dict(config.get("cs", {}))
        verdicts = {}
        for i, j in pairs:
            if i == j:
                continue
            v = cs_check(fits[(i, i)], fits[(j, j)], fits[(i, j)], pair=(bands[i].name, bands[j].name),
                         seed=_derived_seed(seed, 3, i, j), **cs_cfg)
            path = out / "cs" / f"cs_{bands[i].name}_{bands[j].name}.json"
            path.parent.mkdir(exist_ok=True)
            v.to_json(path)
            outputs.append(path)
            verdicts[f"{bands[i].name},{bands[j].name}"] = v
            log(f"  ({bands[i].name},{bands[j].name}): R = {v.ratio:.3f}  "
                f"P(R>1) = {v.probability_violation:.3f}  {v.classification}" if v.ratio is not None else
                f"  ({bands[i].name},{bands[j].name}): {v.classification}")
    except VibronicError as exc:
        raise StageError(current, str(exc)) from None

    summary = {
        "seed": seed,
        "bands": [b.name for b in bands],
        "band_weights": dict(zip([b.name for b in bands], weights)),
        "detected_counts": dict(zip([b.name for b in bands], photons.counts_per_channel().tolist())),
        "g2_zero": {f"{bands[i].name},{bands[j].name}": {"report": f.report(),
                                                         "median": f.median("g2_zero"),
                                                         "converged": f.converged}
                    for (i, j), f in fits.items()},
        "cs": {k: {"classification": v.classification, "ratio": v.ratio,
                   "probability_violation": v.probability_violation} for k, v in verdicts.items()},
        "photon_phonon": photon_phonon,
        "unconverged_fits": [f"{bands[i].name},{bands[j].name}" for (i, j), f in fits.items() if not f.converged],
    }
    outputs.append(_dump(out / "summary.json", summary))
    resolved = {k: v for k, v in config.items() if k != "_base_dir"}
    resolved["seed"] = seed
    resolved["resolved_scene"] = scene.to_dict()
    return PipelineResult(summary, outputs, inputs, resolved)
