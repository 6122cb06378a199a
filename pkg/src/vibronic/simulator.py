"""Monte Carlo time-tag streams from two-level emitters with vibronic branching.

Each emitter cycles ground -> excited -> ground: an exponential wait at the
excitation rate, then an exponential emission delay with the excited-state
lifetime. The emitter cannot be re-excited before it has emitted, which is
what produces antibunching. Every emission is assigned to one spectral band
(or lost non-radiatively) and, for phonon-replica bands, the emitted phonons
are written to a separate stream with the same pre-jitter timestamp.

Background photons are Poissonian per band, optionally modulated by a
two-state on/off telegraph process (a mixed Poisson process, i.e. classical
bunched light).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .timetags import MAX_EMITTERS, ORIGIN_BACKGROUND, TimeTagStream
from .units import PS_PER_S, parse_duration

DEFAULT_LIFETIME = 4e-9
DEFAULT_BACKGROUND_CORRELATION_TIME = 2e-5


def _seconds(value, name):
    if isinstance(value, str):
        return parse_duration(value, default_unit="s") / PS_PER_S
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{name}: expected a number of seconds or a duration string, got {value!r}") from None


@dataclass
class EmitterConfig:
    excitation_rate: float  # 1/s
    branching: list
    phonon_tags: list = None
    excited_lifetime: float = DEFAULT_LIFETIME  # s

    def __post_init__(self):
        self.branching = [float(p) for p in self.branching]
        if self.phonon_tags is None:
            self.phonon_tags = [0] * len(self.branching)
        self.phonon_tags = [int(k) for k in self.phonon_tags]
        if not (math.isfinite(self.excitation_rate) and self.excitation_rate > 0):
            raise ConfigurationError(f"excitation_rate must be finite and > 0, got {self.excitation_rate}")
        if not (math.isfinite(self.excited_lifetime) and self.excited_lifetime > 0):
            raise ConfigurationError(f"excited_lifetime must be > 0, got {self.excited_lifetime}")
        if any(not 0 <= p <= 1 for p in self.branching):
            raise ConfigurationError(f"branching entries must lie in [0, 1]: {self.branching}")
        if sum(self.branching) > 1 + 1e-9:
            raise ConfigurationError(f"branching sums to {sum(self.branching)} > 1")
        if len(self.phonon_tags) != len(self.branching):
            raise ConfigurationError("phonon_tags and branching must have one entry per band")
        if any(k not in (0, 1, 2) for k in self.phonon_tags):
            raise ConfigurationError(f"phonon_tags entries must be 0, 1 or 2: {self.phonon_tags}")

    @property
    def cycle_rate(self):
        """Mean emission-cycle rate of the renewal process, ``1 / (1/R + lifetime)``."""
        return 1.0 / (1.0 / self.excitation_rate + self.excited_lifetime)

    def to_dict(self):
        return {"excitation_rate": self.excitation_rate, "excited_lifetime": self.excited_lifetime,
                "branching": list(self.branching), "phonon_tags": list(self.phonon_tags)}

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        if "excited_lifetime" in doc:
            doc["excited_lifetime"] = _seconds(doc["excited_lifetime"], "excited_lifetime")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigurationError(f"emitter config: {exc}") from None


@dataclass
class SceneConfig:
    """Everything needed to generate one pair of photon/phonon streams.

    ``leakage[l][m]`` is the probability that a photon emitted into band ``l``
    is detected in channel ``m`` (identity by default). ``background_bunching``
    gives the zero-delay excess ``g2(0) - 1`` of each band's background;
    zero means plain Poisson.
    """

    emitters: list
    band_count: int
    duration: float  # s
    seed: int = 0
    background_rates: list = None
    detection_efficiency: list = None
    jitter_sigma: float = 0.0  # s
    leakage: list = None
    background_bunching: list = None
    background_correlation_time: float = DEFAULT_BACKGROUND_CORRELATION_TIME  # s

    def __post_init__(self):
        nb = int(self.band_count)
        if not 1 <= nb <= 255:
            raise ConfigurationError(f"band_count must be in 1..255, got {self.band_count}")
        self.band_count = nb
        self.emitters = [e if isinstance(e, EmitterConfig) else EmitterConfig.from_dict(e) for e in self.emitters]
        if not self.emitters:
            raise ConfigurationError("a scene needs at least one emitter")
        if len(self.emitters) > MAX_EMITTERS:
            raise ConfigurationError(f"at most {MAX_EMITTERS} emitters are supported")
        for i, e in enumerate(self.emitters):
            if len(e.branching) != nb:
                raise ConfigurationError(f"emitter {i}: branching has {len(e.branching)} entries, expected {nb}")

        self.background_rates = self._per_band(self.background_rates, 0.0, "background_rates")
        self.detection_efficiency = self._per_band(self.detection_efficiency, 1.0, "detection_efficiency")
        self.background_bunching = self._per_band(self.background_bunching, 0.0, "background_bunching")
        if any(r < 0 for r in self.background_rates):
            raise ConfigurationError("background rates must be >= 0")
        if any(not 0 <= q <= 1 for q in self.detection_efficiency):
            raise ConfigurationError("detection efficiencies must lie in [0, 1]")
        if any(b < 0 for b in self.background_bunching):
            raise ConfigurationError("background bunching must be >= 0")
        if self.leakage is None:
            self.leakage = np.eye(nb).tolist()
        leak = np.asarray(self.leakage, dtype=float)
        if leak.shape != (nb, nb) or np.any(leak < 0) or not np.allclose(leak.sum(axis=1), 1.0, atol=1e-9):
            raise ConfigurationError("leakage must be a band_count x band_count row-stochastic matrix")
        self.leakage = leak.tolist()

        self.duration = _seconds(self.duration, "duration")
        self.jitter_sigma = _seconds(self.jitter_sigma, "jitter_sigma")
        self.background_correlation_time = _seconds(self.background_correlation_time,
                                                    "background_correlation_time")
        if not (math.isfinite(self.duration) and self.duration >= 0):
            raise ConfigurationError(f"duration must be >= 0, got {self.duration}")
        if not self.jitter_sigma >= 0:
            raise ConfigurationError("jitter_sigma must be >= 0")
        if not self.background_correlation_time > 0:
            raise ConfigurationError("background_correlation_time must be > 0")
        seed = int(self.seed)
        if not 0 <= seed < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        self.seed = seed

    def _per_band(self, values, default, name):
        if values is None:
            return [default] * self.band_count
        values = [float(v) for v in values]
        if len(values) != self.band_count:
            raise ConfigurationError(f"{name} needs {self.band_count} entries, got {len(values)}")
        if not all(math.isfinite(v) for v in values):
            raise ConfigurationError(f"{name} entries must be finite")
        return values

    def to_dict(self):
        return {
            "emitters": [e.to_dict() for e in self.emitters],
            "band_count": self.band_count,
            "duration": self.duration,
            "seed": self.seed,
            "background_rates": list(self.background_rates),
            "detection_efficiency": list(self.detection_efficiency),
            "jitter_sigma": self.jitter_sigma,
            "leakage": [list(r) for r in self.leakage],
            "background_bunching": list(self.background_bunching),
            "background_correlation_time": self.background_correlation_time,
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigurationError(f"scene config: {exc}") from None


def expected_counts(scene):
    """Expected detected photon counts per channel (renewal rate x branching x efficiency + background)."""
    leak = np.asarray(scene.leakage)
    eff = np.asarray(scene.detection_efficiency)
    total = np.asarray(scene.background_rates) * scene.duration
    for e in scene.emitters:
        total = total + scene.duration * e.cycle_rate * (np.asarray(e.branching) @ leak) * eff
    return total


def _round_half_up(t_ps):
    return np.floor(t_ps + 0.5).astype(np.int64)


def _emission_times(rng, emitter, duration_ps):
    """Emission times (float ps) of one two-level emitter over ``[0, duration]``."""
    wait_mean = PS_PER_S / emitter.excitation_rate
    life = emitter.excited_lifetime * PS_PER_S
    expected = duration_ps / (wait_mean + life)
    batch = int(expected + 6.0 * math.sqrt(expected) + 64)
    chunks, offset = [], 0.0
    while True:
        cycle = rng.exponential(wait_mean, batch) + rng.exponential(life, batch)
        times = offset + np.cumsum(cycle)
        if times[-1] > duration_ps:
            chunks.append(times[: np.searchsorted(times, duration_ps, side="right")])
            break
        chunks.append(times)
        offset = times[-1]
        batch = max(64, batch // 4)
    return np.concatenate(chunks)


def _telegraph_on_intervals(rng, duration_ps, p_on, corr_ps):
    """On-intervals ``(start, length)`` of a stationary two-state process."""
    mean_on = corr_ps / (1.0 - p_on)
    mean_off = corr_ps / p_on
    starts, lengths = [], []
    state_on = rng.random() < p_on
    t = 0.0
    expected = duration_ps / (mean_on + mean_off)
    batch = int(expected + 6.0 * math.sqrt(expected) + 16)
    while t < duration_ps:
        on = rng.exponential(mean_on, batch)
        off = rng.exponential(mean_off, batch)
        seq = np.empty(2 * batch)
        first, second = (on, off) if state_on else (off, on)
        seq[0::2], seq[1::2] = first, second
        edges = t + np.concatenate([[0.0], np.cumsum(seq)])
        is_on = np.zeros(2 * batch, dtype=bool)
        is_on[0 if state_on else 1::2] = True
        st, ln = edges[:-1][is_on], np.diff(edges)[is_on]
        starts.append(st)
        lengths.append(ln)
        t = edges[-1]
    st, ln = np.concatenate(starts), np.concatenate(lengths)
    keep = st < duration_ps
    st, ln = st[keep], ln[keep]
    ln = np.minimum(ln, duration_ps - st)
    return st, ln


def _background(rng, rate, bunching, corr_s, duration_ps):
    duration_s = duration_ps / PS_PER_S
    if rate <= 0 or duration_ps <= 0:
        return np.zeros(0)
    # Returned sorted: the final stable sort then only merges long runs. Tied
    # background records of one band are identical, so this changes no output.
    if bunching == 0:
        n = rng.poisson(rate * duration_s)
        return np.sort(rng.uniform(0.0, duration_ps, n))
    p_on = 1.0 / (1.0 + bunching)
    st, ln = _telegraph_on_intervals(rng, duration_ps, p_on, corr_s * PS_PER_S)
    counts = rng.poisson(rate / p_on * ln / PS_PER_S)
    return np.sort(np.repeat(st, counts) + rng.random(int(counts.sum())) * np.repeat(ln, counts))


def _sorted_stream(ts, ch, org, ph, n_channels):
    if ts.size == 0:
        return TimeTagStream.empty(n_channels)
    if ts.max() < 2**46:
        order = np.argsort((ts << 16) | (ch.astype(np.int64) << 8) | org.astype(np.int64), kind="stable")
    else:
        order = np.lexsort((org, ch, ts))
    return TimeTagStream(ts[order], ch[order], org[order], ph[order], n_channels)


def simulate(scene):
    """Generate ``(photons, phonons)`` time-tag streams for ``scene``.

    Deterministic for a given configuration (including ``seed``): all random
    numbers come from one PCG64 stream consumed in a fixed order.
    """
    rng = np.random.Generator(np.random.PCG64(scene.seed))
    nb = scene.band_count
    duration_ps = scene.duration * PS_PER_S
    leak = np.asarray(scene.leakage)
    identity = np.array_equal(leak, np.eye(nb))
    leak_cdf = np.cumsum(leak, axis=1)
    eff = np.asarray(scene.detection_efficiency)
    jitter_ps = scene.jitter_sigma * PS_PER_S

    photon_parts, phonon_parts = [], []
    for idx, em in enumerate(scene.emitters):
        if duration_ps <= 0:
            break
        emit = _emission_times(rng, em, duration_ps)
        band = np.searchsorted(np.cumsum(em.branching), rng.random(emit.size), side="right")
        radiative = band < nb
        emit, band = emit[radiative], band[radiative]
        tags = np.asarray(em.phonon_tags, dtype=np.uint8)[band]

        base_ps = _round_half_up(emit)
        has_ph = tags > 0
        reps = tags[has_ph].astype(np.int64)
        phonon_parts.append((np.repeat(base_ps[has_ph], reps), np.repeat(band[has_ph], reps).astype(np.uint8),
                             np.full(int(reps.sum()), idx, np.uint8), np.repeat(tags[has_ph], reps)))

        if identity:
            channel = band
        else:
            u = rng.random(band.size)
            channel = np.empty_like(band)
            for l in range(nb):
                sel = band == l
                channel[sel] = np.minimum(np.searchsorted(leak_cdf[l], u[sel], side="right"), nb - 1)
        detected = rng.random(band.size) < eff[channel]
        t = emit[detected]
        if jitter_ps > 0:
            t = t + rng.normal(0.0, jitter_ps, t.size)
        ts = _round_half_up(t)
        inside = (ts >= 0) & (ts <= duration_ps)
        photon_parts.append((ts[inside], channel[detected][inside].astype(np.uint8),
                             np.full(int(inside.sum()), idx, np.uint8), tags[detected][inside]))

    for l in range(nb):
        t = _background(rng, scene.background_rates[l], scene.background_bunching[l],
                        scene.background_correlation_time, duration_ps)
        ts = np.minimum(_round_half_up(t), int(duration_ps))
        photon_parts.append((ts, np.full(ts.size, l, np.uint8), np.full(ts.size, ORIGIN_BACKGROUND, np.uint8),
                             np.zeros(ts.size, np.uint8)))

    def assemble(parts):
        if not parts:
            return TimeTagStream.empty(nb)
        cols = [np.concatenate([p[i] for p in parts]) for i in range(4)]
        return _sorted_stream(cols[0].astype(np.int64), cols[1], cols[2], cols[3], nb)

    return assemble(photon_parts), assemble(phonon_parts)
