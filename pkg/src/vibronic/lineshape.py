"""Vibronic emission lineshape from a one-phonon density of states.

The emission spectrum is the Fourier transform of the generating function

    G(t) = exp(S [zeta(t) - zeta_T(0)]  +  S_ac [zeta_ac(t) - zeta_ac,T(0)]) * exp(-Gamma |t| / 2)

with

    zeta(t) = sum_i w_i [(n_i + 1) exp(i Omega_i t) + n_i exp(-i Omega_i t)]

where ``w`` is the coupling density ``rho(Omega) / Omega**2`` normalized to unit
integral and ``n`` the Bose occupation. Because ``G(0) = 1`` the spectrum
integrates to one for any coupling strength, the zero-phonon weight at
``T = 0`` is ``exp(-S)`` and a single-mode density reproduces the Poisson
progression ``exp(-S) S**k / k!``.

Units: phonon energies in meV, photon energies in eV, time in hbar/meV.
Stokes replicas (phonon emission) appear on the low-energy side of the ZPL.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.fft import irfft, next_fast_len

from .errors import ConfigurationError, DomainError, FormatError, NumericalError
from .units import K_B_MEV

PREFACTOR_MODES = ("none", "cross_section", "rate_cubed")

# Default time grid: damping exp(-Gamma t / 2) reaches exp(-30) at the grid edge.
_SPAN_DAMPING_EXPONENT = 30.0
# Time step <= hbar / (4 * E_max * 6): six-phonon sums stay unaliased.
_STEP_DIVISOR = 24.0
_NEGATIVE_TOLERANCE = 1e-9
_ZETA_BLOCK = 2048
_OHMIC_POINTS = 600
_OHMIC_EXTENT = 15.0


def bose_occupation(energy, temperature):
    """Thermal phonon occupation ``1 / (exp(E / kT) - 1)``.

    ``energy`` in meV (scalar or array, strictly positive), ``temperature`` in K.
    Returns exactly zero at ``temperature == 0``.
    """
    e = np.asarray(energy, dtype=float)
    if np.any(~np.isfinite(e)) or np.any(e <= 0):
        raise DomainError("phonon energy must be > 0")
    if not np.isfinite(temperature) or temperature < 0:
        raise DomainError("temperature must be >= 0")
    kt = K_B_MEV * temperature
    if kt == 0:  # also catches subnormal T
        n = np.zeros_like(e)
    else:
        # The floor keeps n finite (~kT/E) when E/kT underflows at huge T.
        with np.errstate(over="ignore"):
            n = 1.0 / np.expm1(np.maximum(e / kt, 1e-300))
    return float(n) if n.ndim == 0 else n


def _readonly(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PhononDOS:
    """Tabulated one-phonon density of states on an increasing energy grid (meV)."""

    energies: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        e = _readonly(self.energies)
        v = _readonly(self.values)
        if e.ndim != 1 or v.shape != e.shape:
            raise DomainError("energies and values must be 1-D arrays of equal length")
        if e.size < 2:
            raise DomainError("a DOS needs at least 2 grid points")
        if not np.all(np.isfinite(e)) or not np.all(np.isfinite(v)):
            raise DomainError("DOS contains non-finite entries")
        if np.any(np.diff(e) <= 0):
            raise DomainError("DOS energies must be strictly increasing")
        if e[0] <= 0:
            raise DomainError("DOS energies must be > 0")
        if np.any(v < 0) or not np.any(v > 0):
            raise DomainError("DOS values must be >= 0 with at least one positive entry")
        object.__setattr__(self, "energies", e)
        object.__setattr__(self, "values", v)

    @classmethod
    def single_mode(cls, energy, spacing=1.0, pad=2):
        """A DOS that is zero everywhere except the bin at ``energy``."""
        grid = energy + spacing * np.arange(-pad, pad + 1)
        vals = np.zeros_like(grid)
        vals[pad] = 1.0
        return cls(grid, vals)

    @classmethod
    def from_csv(cls, path):
        """Read a CSV with header ``energy_meV,dos``."""
        path = Path(path)
        try:
            with path.open(newline="") as fh:
                reader = csv.reader(row for row in fh if row.strip() and not row.startswith("#"))
                header = next(reader, None)
                if header is None or [h.strip() for h in header] != ["energy_meV", "dos"]:
                    raise FormatError(f"{path}: expected header 'energy_meV,dos', got {header}")
                rows = []
                for lineno, row in enumerate(reader, start=2):
                    if len(row) != 2:
                        raise FormatError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
                    try:
                        rows.append((float(row[0]), float(row[1])))
                    except ValueError as exc:
                        raise FormatError(f"{path}:{lineno}: {exc}") from None
        except OSError as exc:
            raise FormatError(f"cannot read DOS file {path}: {exc}") from None
        if not rows:
            raise FormatError(f"{path}: no data rows")
        arr = np.array(rows)
        try:
            return cls(arr[:, 0], arr[:, 1])
        except DomainError as exc:
            raise FormatError(f"{path}: {exc}") from None

    def to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["energy_meV", "dos"])
            for e, v in zip(self.energies, self.values):
                w.writerow([repr(float(e)), repr(float(v))])

    def integral(self):
        return float(np.trapezoid(self.values, self.energies))


@dataclass(frozen=True)
class LorentzPeak:
    center: float  # meV
    fwhm: float  # meV
    weight: float = 1.0

    def __post_init__(self):
        if not self.fwhm > 0:
            raise ConfigurationError(f"Lorentzian fwhm must be > 0, got {self.fwhm}")
        if not self.weight >= 0:
            raise ConfigurationError(f"Lorentzian weight must be >= 0, got {self.weight}")

    def __call__(self, energy):
        x = (np.asarray(energy, dtype=float) - self.center) / (0.5 * self.fwhm)
        return self.weight / (1.0 + x * x)


@dataclass(frozen=True)
class ReweightSpec:
    """Sum of peak-normalized Lorentzians used as a multiplicative DOS filter."""

    peaks: tuple

    def __post_init__(self):
        peaks = tuple(p if isinstance(p, LorentzPeak) else LorentzPeak(*p) for p in self.peaks)
        if not peaks:
            raise ConfigurationError("reweighting needs at least one peak")
        if not any(p.weight > 0 for p in peaks):
            raise ConfigurationError("reweighting peak weights are all zero")
        object.__setattr__(self, "peaks", peaks)

    def multiplier(self, energy):
        return sum(p(energy) for p in self.peaks)

    @classmethod
    def from_dict(cls, doc):
        try:
            return cls(tuple(LorentzPeak(float(p["center_meV"]), float(p["fwhm_meV"]), float(p.get("weight", 1.0)))
                             for p in doc["peaks"]))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed reweight spec: missing {exc}") from None

    @classmethod
    def from_json(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise FormatError(f"cannot read reweight spec {path}: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self):
        return {"peaks": [{"center_meV": p.center, "fwhm_meV": p.fwhm, "weight": p.weight} for p in self.peaks]}


def reweight_dos(dos, spec):
    """Multiply ``dos`` by the Lorentzian filter ``spec``.

    The result is rescaled to the integral of the input so that only the shape
    changes; the energy grid is shared.
    """
    lo, hi = dos.energies[0], dos.energies[-1]
    for p in spec.peaks:
        if not lo <= p.center <= hi:
            raise ConfigurationError(f"reweight peak at {p.center} meV lies outside the DOS grid [{lo}, {hi}] meV")
    values = dos.values * spec.multiplier(dos.energies)
    if not np.any(values > 0):
        raise ConfigurationError("reweighted DOS vanishes everywhere")
    values *= dos.integral() / np.trapezoid(values, dos.energies)
    return PhononDOS(dos.energies, values)


def _trapezoid_weights(x):
    h = np.diff(x)
    q = np.zeros_like(x)
    q[:-1] += 0.5 * h
    q[1:] += 0.5 * h
    return q


@dataclass(frozen=True, eq=False)
class CouplingDensity:
    """Discrete normalized coupling density: mode energies (meV) and weights summing to one."""

    energies: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_dos(cls, dos, low_cutoff=5.0):
        """Quadrature of ``rho / Omega**2`` on the DOS grid, with modes below ``low_cutoff`` removed."""
        q = _trapezoid_weights(dos.energies)
        w = q * dos.values / dos.energies**2
        w[dos.energies < low_cutoff] = 0.0
        keep = w > 0
        if not np.any(keep):
            raise ConfigurationError(f"DOS has no weight above the {low_cutoff} meV low-energy cutoff")
        return cls(_readonly(dos.energies[keep]), _readonly(w[keep] / w[keep].sum()))

    @classmethod
    def ohmic(cls, cutoff_energy):
        """Smooth acoustic density proportional to ``Omega * exp(-Omega / cutoff)`` (midpoint rule)."""
        if not cutoff_energy > 0:
            raise ConfigurationError("acoustic cutoff must be > 0")
        h = _OHMIC_EXTENT * cutoff_energy / _OHMIC_POINTS
        omega = (np.arange(_OHMIC_POINTS) + 0.5) * h
        w = omega * np.exp(-omega / cutoff_energy)
        return cls(_readonly(omega), _readonly(w / w.sum()))

    @property
    def max_energy(self):
        return float(self.energies[-1])

    def _occupation(self, temperature):
        return bose_occupation(self.energies, temperature)

    def zeta(self, t, temperature):
        t = np.asarray(t, dtype=float)
        n = self._occupation(temperature)
        phase = np.multiply.outer(t, self.energies)
        val = np.exp(1j * phase) @ (self.weights * (n + 1.0))
        if temperature > 0:
            val = val + np.exp(-1j * phase) @ (self.weights * n)
        return val

    def zeta0(self, temperature):
        """``zeta(0)`` at the given temperature, i.e. ``sum w (2n + 1)``."""
        n = self._occupation(temperature)
        return float(np.sum(self.weights * (2.0 * n + 1.0)))

    def zeta_uniform(self, n_points, dt, temperature):
        """``zeta(j * dt)`` for ``j = 0 .. n_points - 1``, by blocked matrix products."""
        n = self._occupation(temperature)
        emit = self.weights * (n + 1.0)
        absorb = self.weights * n
        block = min(_ZETA_BLOCK, n_points)
        phase_step = np.exp(1j * np.multiply.outer(np.arange(block) * dt, self.energies))
        out = np.empty(n_points, dtype=complex)
        for j0 in range(0, n_points, block):
            m = min(block, n_points - j0)
            base = np.exp(1j * self.energies * (j0 * dt))
            p = phase_step[:m]
            chunk = p @ (emit * base)
            if temperature > 0:
                chunk += np.conj(p @ (absorb * base))
            out[j0:j0 + m] = chunk
        return out


def zeta(t, dos, temperature, low_cutoff=5.0):
    """Thermally weighted phonon generating function of ``dos`` at times ``t`` (hbar/meV).

    ``zeta(0) == 1`` at zero temperature by normalization of the coupling density.
    """
    return CouplingDensity.from_dos(dos, low_cutoff).zeta(t, temperature)


@dataclass
class LineshapeParams:
    """Physical and numerical parameters of a synthesized spectrum.

    ``huang_rhys`` has no default on purpose. ``prefactor_mode`` selects the
    frequency prefactor: ``none`` (normalized lineshape), ``cross_section``
    (``omega_zpl / omega``) or ``rate_cubed`` (``(omega / omega_zpl)**3``).
    """

    huang_rhys: float
    temperature: float = 0.0
    zpl_energy: float = 2.21  # eV
    zpl_fwhm: float = 1.3  # meV
    amplitude: float = 1.0
    acoustic_s: float = 0.0
    acoustic_cutoff: float = 10.0  # meV
    prefactor_mode: str = "none"
    dos_cutoff: float = 5.0  # meV

    def __post_init__(self):
        checks = [
            (self.huang_rhys >= 0, "huang_rhys must be >= 0"),
            (self.temperature >= 0, "temperature must be >= 0"),
            (self.zpl_energy > 0, "zpl_energy must be > 0"),
            (self.zpl_fwhm > 0, "zpl_fwhm must be > 0"),
            (self.amplitude > 0, "amplitude must be > 0"),
            (self.acoustic_s >= 0, "acoustic_s must be >= 0"),
            (self.acoustic_cutoff > 0, "acoustic_cutoff must be > 0"),
            (self.dos_cutoff >= 0, "dos_cutoff must be >= 0"),
            (self.prefactor_mode in PREFACTOR_MODES, f"prefactor_mode must be one of {PREFACTOR_MODES}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigurationError(f"{msg} (got {self})")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown lineshape parameters: {sorted(unknown)}")
        if "huang_rhys" not in doc or doc["huang_rhys"] is None:
            raise ConfigurationError("huang_rhys must be set explicitly")
        return cls(**doc)


@dataclass(eq=False)
class Spectrum:
    """Emission intensity (arbitrary units per eV) on an increasing photon-energy grid (eV)."""

    energies: np.ndarray
    intensities: np.ndarray
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.energies = np.asarray(self.energies, dtype=float)
        self.intensities = np.asarray(self.intensities, dtype=float)
        if self.energies.shape != self.intensities.shape or self.energies.ndim != 1:
            raise DomainError("spectrum grids must be 1-D and of equal length")
        if np.any(np.diff(self.energies) <= 0):
            raise DomainError("spectrum energies must be strictly increasing")
        if np.any(self.intensities < 0):
            raise DomainError("spectrum intensities must be >= 0")

    @property
    def zpl_energy(self):
        return self.params["zpl_energy"]

    def integral(self, low=None, high=None):
        """Integral of the piecewise-linear interpolant over ``[low, high]`` (eV)."""
        e, y = self.energies, self.intensities
        low = e[0] if low is None else low
        high = e[-1] if high is None else high
        if low < e[0] - 1e-12 or high > e[-1] + 1e-12 or high < low:
            raise ConfigurationError(f"integration range [{low}, {high}] eV outside spectrum [{e[0]}, {e[-1]}]")
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(e))])

        def primitive(x):
            i = int(np.clip(np.searchsorted(e, x, side="right") - 1, 0, e.size - 2))
            dx = x - e[i]
            slope = (y[i + 1] - y[i]) / (e[i + 1] - e[i])
            return cum[i] + y[i] * dx + 0.5 * slope * dx * dx

        return float(primitive(high) - primitive(low))

    def to_csv(self, path):
        """Write ``energy_eV,intensity`` CSV plus a ``.json`` sidecar holding the parameters."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["energy_eV", "intensity"])
            for e, v in zip(self.energies, self.intensities):
                w.writerow([f"{e:.12g}", f"{v:.12g}"])
        path.with_suffix(".json").write_text(json.dumps(self.params, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_csv(cls, path):
        path = Path(path)
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        sidecar = path.with_suffix(".json")
        params = json.loads(sidecar.read_text()) if sidecar.exists() else {}
        return cls(data[:, 0], data[:, 1], params)


def _default_window(params, e_max):
    """Relative window (red, blue) in meV around the ZPL."""
    s_tot = params.huang_rhys + params.acoustic_s
    n_red = max(8, math.ceil(s_tot + 8.0 * math.sqrt(s_tot)))
    red = n_red * e_max + 50.0 * params.zpl_fwhm
    red = min(red, 0.95 * params.zpl_energy * 1e3)
    blue = max(2.0 * e_max, 50.0 * params.zpl_fwhm)
    return red, blue


def synthesize_spectrum(params, dos, *, time_step=None, time_span=None, window=None):
    """Synthesize the emission spectrum for ``params`` and coupling density ``dos``.

    ``time_step`` and ``time_span`` (hbar/meV; ``time_span`` is the largest |t|
    sampled) override the automatic grid and are validated against the ZPL
    width and DOS bandwidth. ``window`` is an optional ``(low, high)`` photon
    energy range in eV for the returned spectrum.
    """
    lattice = CouplingDensity.from_dos(dos, params.dos_cutoff)
    acoustic = CouplingDensity.ohmic(params.acoustic_cutoff) if params.acoustic_s > 0 else None
    e_max = lattice.max_energy
    if acoustic is not None:
        e_max = max(e_max, acoustic.max_energy)

    max_step = 1.0 / (_STEP_DIVISOR * e_max)
    min_span = 10.0 / params.zpl_fwhm
    if time_step is None:
        time_step = max_step
    elif time_step > max_step:
        raise ConfigurationError(
            f"time step {time_step:g} hbar/meV cannot cover the {e_max:g} meV DOS bandwidth; need <= {max_step:g}")
    if time_span is None:
        time_span = 2.0 * _SPAN_DAMPING_EXPONENT / params.zpl_fwhm
    elif time_span < min_span:
        raise ConfigurationError(
            f"time span {time_span:g} hbar/meV cannot resolve zpl_fwhm={params.zpl_fwhm} meV; need >= {min_span:g}")

    n_fft = next_fast_len(2 * math.ceil(time_span / time_step))
    n_fft += n_fft % 2
    n_half = n_fft // 2 + 1
    t = np.arange(n_half) * time_step

    exponent = params.huang_rhys * (lattice.zeta_uniform(n_half, time_step, params.temperature)
                                    - lattice.zeta0(params.temperature))
    if acoustic is not None:
        exponent += params.acoustic_s * (acoustic.zeta_uniform(n_half, time_step, params.temperature)
                                         - acoustic.zeta0(params.temperature))
    exponent -= 0.5 * params.zpl_fwhm * t
    g = np.exp(exponent)
    g[-1] = g[-1].real

    # G(-t) = conj(G(t)), so the transform is real: I(dE) = dt/(2 pi) sum_j G_j exp(i dE t_j).
    spec = irfft(g, n_fft) * (n_fft * time_step / (2.0 * math.pi))
    d_e = 2.0 * math.pi / (n_fft * time_step)
    k = np.fft.fftfreq(n_fft, d=1.0 / n_fft)
    order = np.argsort(k)
    shift = k[order] * d_e
    spec = spec[order]

    e0_mev = params.zpl_energy * 1e3
    if window is None:
        red, blue = _default_window(params, e_max)
        lo_rel, hi_rel = -red, blue
    else:
        lo_rel, hi_rel = (window[0] * 1e3 - e0_mev), (window[1] * 1e3 - e0_mev)
        if hi_rel <= lo_rel or window[0] <= 0:
            raise ConfigurationError(f"invalid spectral window {window}")
    if lo_rel < shift[0] or hi_rel > shift[-1]:
        raise ConfigurationError(
            f"spectral window [{lo_rel:g}, {hi_rel:g}] meV exceeds the unaliased range "
            f"[{shift[0]:g}, {shift[-1]:g}] meV; reduce time_step")
    sel = (shift >= lo_rel) & (shift <= hi_rel)
    shift, spec = shift[sel], spec[sel]

    peak = spec.max()
    if spec.min() < -_NEGATIVE_TOLERANCE * peak:
        raise NumericalError(
            f"spectrum has negative excursions down to {spec.min() / peak:.3g} of the peak; "
            "the time grid is too short or too coarse")
    spec = np.where(spec < 0, 0.0, spec)

    energies = (e0_mev + shift) * 1e-3
    intens = spec * 1e3 * params.amplitude  # per eV
    if params.prefactor_mode == "cross_section":
        intens = intens * (params.zpl_energy / energies)
    elif params.prefactor_mode == "rate_cubed":
        intens = intens * (energies / params.zpl_energy) ** 3

    meta = params.to_dict()
    meta.update(time_step=time_step, time_span=time_span, n_fft=n_fft, energy_step_meV=d_e)
    return Spectrum(energies, intens, meta)


def debye_waller_fraction(spectrum, zpl_window):
    """Fraction of the spectral weight within ``+-zpl_window`` meV of the ZPL."""
    fwhm = spectrum.params.get("zpl_fwhm")
    if fwhm is not None and zpl_window < 3 * fwhm:
        raise ConfigurationError(f"zpl_window {zpl_window} meV must be >= 3 x zpl_fwhm ({3 * fwhm} meV)")
    e0 = spectrum.zpl_energy
    lo, hi = e0 - zpl_window * 1e-3, e0 + zpl_window * 1e-3
    if lo < spectrum.energies[0] or hi > spectrum.energies[-1]:
        raise ConfigurationError("zpl_window exceeds the spectral range")
    return spectrum.integral(lo, hi) / spectrum.integral()


def band_weights(spectrum, bands):
    """Per-band fraction of total intensity for non-overlapping ``(low, high)`` bands in eV."""
    bands = [(float(lo), float(hi)) for lo, hi in bands]
    for lo, hi in bands:
        if not hi > lo:
            raise ConfigurationError(f"band ({lo}, {hi}) is empty")
        if lo < spectrum.energies[0] or hi > spectrum.energies[-1]:
            raise ConfigurationError(f"band ({lo}, {hi}) eV lies outside the spectral range "
                                     f"[{spectrum.energies[0]:.4f}, {spectrum.energies[-1]:.4f}] eV")
    ordered = sorted(bands)
    for (lo1, hi1), (lo2, hi2) in zip(ordered, ordered[1:]):
        if lo2 < hi1:
            raise ConfigurationError(f"bands ({lo1}, {hi1}) and ({lo2}, {hi2}) overlap")
    total = spectrum.integral()
    return [spectrum.integral(lo, hi) / total for lo, hi in bands]
