"""Bayesian fit of the two-level antibunching model to a correlation histogram.

Model::

    g2(tau) = b - a * exp(-|tau - t0| / tau_d)

averaged analytically over each histogram bin. The likelihood is Poisson on
the raw coincidence counts with expected counts ``norm_k * g2_k``, where
``norm`` comes from the measured stream rates. The baseline ``b`` acts as the
normalization nuisance parameter and is inferred jointly with the shape
parameters (no tail-based renormalization).

Sampling runs in the coordinates ``(a, ln tau_d, ln(b - a), t0)`` (with the
matching Jacobian), so the ``b >= a`` wall that holds the mass of a fully
antibunched source does not stall the walk. A multi-start maximization (one
start per chain, drawn from the prior) locates the mode; chains are then
started from overdispersed points around it and advanced by random-walk
Metropolis. The proposal covariance is adapted during burn-in only, and
burn-in draws are discarded.
"""

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .correlator import CorrelationHistogram
from .errors import ConfigurationError, FormatError

PARAMS = ("a", "tau_d", "b", "t0")
QUANTITIES = PARAMS + ("g2_zero",)
SCHEMA = "vibronic.posterior/1"
_NS = 1e-9


@dataclass
class Priors:
    """Weakly informative priors (times in seconds, t0 range in bins)."""

    a_max: float = 1.05
    tau_min: float = 0.1e-9
    tau_max: float = 1e-6
    b_mean: float = 1.0
    b_sd: float = 0.1
    t0_halfwidth_bins: float = 5.0

    def __post_init__(self):
        if not (self.a_max > 0 and 0 < self.tau_min < self.tau_max and self.b_sd > 0
                and self.t0_halfwidth_bins > 0):
            raise ConfigurationError(f"invalid priors: {self}")


@dataclass
class SamplerSettings:
    chains: int = 4
    samples: int = 2000
    burn_in: int = 1000
    rhat_threshold: float = 1.05
    curve_draws: int = 1000

    def __post_init__(self):
        if self.chains < 4:
            raise ConfigurationError(f"at least 4 chains are required, got {self.chains}")
        if self.samples < 20 or self.burn_in < 0:
            raise ConfigurationError("need samples >= 20 and burn_in >= 0")


def load_fit_config(doc):
    """``(Priors, SamplerSettings)`` from a ``{"priors": {...}, "sampler": {...}}`` document."""
    def build(cls, sub):
        sub = dict(sub or {})
        known = {f.name for f in fields(cls)}
        if set(sub) - known:
            raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(set(sub) - known)}")
        return cls(**sub)

    return build(Priors, doc.get("priors")), build(SamplerSettings, doc.get("sampler"))


class _Problem:
    """Histogram data and log-density in sampling coordinates ``(a, ln tau_ns, b, t0_ns)``."""

    def __init__(self, hist, priors):
        w_ns = hist.bin_width * 1e-3
        centers = hist.bin_centers * 1e-3
        self.lo = centers - 0.5 * w_ns
        self.hi = centers + 0.5 * w_ns
        self.width = self.hi - self.lo
        self.centers = centers
        self.counts = hist.counts.astype(float)
        self.norm = np.asarray(hist.norm, dtype=float)
        self.priors = priors
        self.u_lo = math.log(priors.tau_min / _NS)
        self.u_hi = math.log(priors.tau_max / _NS)
        self.t0_max = priors.t0_halfwidth_bins * w_ns
        self.positive = self.counts > 0

    def model(self, x):
        """Bin-averaged g2 for parameter rows ``x`` of shape (n, 4)."""
        x = np.atleast_2d(x)
        a, tau, b, t0 = x[:, :1], np.exp(x[:, 1:2]), x[:, 2:3], x[:, 3:4]

        def primitive(s):
            return np.sign(s) * tau * -np.expm1(-np.abs(s) / tau)

        kern = (primitive(self.hi - t0) - primitive(self.lo - t0)) / self.width
        return b - a * kern

    def in_support(self, x):
        x = np.atleast_2d(x)
        p = self.priors
        return ((x[:, 0] >= 0) & (x[:, 0] <= p.a_max) & (x[:, 1] >= self.u_lo) & (x[:, 1] <= self.u_hi)
                & (x[:, 2] > 0) & (x[:, 2] >= x[:, 0]) & (np.abs(x[:, 3]) <= self.t0_max))

    def log_likelihood(self, x):
        mu = self.norm * self.model(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(self.positive, self.counts * np.log(mu), 0.0) - mu
        ll = terms.sum(axis=1)
        bad = np.any((mu <= 0) & self.positive, axis=1) | ~np.isfinite(ll)
        return np.where(bad, -np.inf, ll)

    def log_prior(self, x):
        x = np.atleast_2d(x)
        p = self.priors
        lp = -0.5 * ((x[:, 2] - p.b_mean) / p.b_sd) ** 2
        return np.where(self.in_support(x), lp, -np.inf)

    def log_post(self, x):
        x = np.atleast_2d(x)
        lp = self.log_prior(x)
        out = np.full(x.shape[0], -np.inf)
        ok = np.isfinite(lp)
        if np.any(ok):
            out[ok] = lp[ok] + self.log_likelihood(x[ok])
        return out

    def prior_draw(self, rng):
        p = self.priors
        for _ in range(1000):
            x = np.array([rng.uniform(0, p.a_max), rng.uniform(self.u_lo, self.u_hi),
                          rng.normal(p.b_mean, p.b_sd), rng.uniform(-self.t0_max, self.t0_max)])
            if self.in_support(x)[0]:
                return x
        raise ConfigurationError("could not draw a point inside the prior support")

    def heuristic_start(self):
        """Data-driven starting point: tail level, central depth and a 1/e width."""
        g2 = self.counts / self.norm
        n = g2.size
        edge = max(1, n // 5)
        b = float(np.clip(np.mean(np.r_[g2[:edge], g2[-edge:]]), 0.05, None))
        mid = n // 2
        a = float(np.clip(b - np.mean(g2[mid - 1:mid + 2]), 0.0, min(b, self.priors.a_max)))
        depth = b - g2[mid:]
        below = np.flatnonzero(depth < a / math.e)
        tau = self.centers[mid + below[0]] if below.size and below[0] > 0 else 4.0
        u = float(np.clip(math.log(max(tau, 1e-3)), self.u_lo + 1e-6, self.u_hi - 1e-6))
        return np.array([a * 0.999, u, b, 0.0])


_GAP_MIN = 1e-300


def _to_walk(x):
    """Sampling coordinates -> walk coordinates ``(a, u, ln(b - a), t0)``."""
    x = np.asarray(x, dtype=float)
    z = x.copy()
    z[..., 2] = np.log(np.maximum(x[..., 2] - x[..., 0], _GAP_MIN))
    return z


def _from_walk(z):
    x = np.array(z, dtype=float)
    x[..., 2] = x[..., 0] + np.exp(z[..., 2])
    return x


def _log_target(problem, z):
    """Log posterior density in walk coordinates (Jacobian of b - a = exp(v) included)."""
    z = np.atleast_2d(z)
    return problem.log_post(_from_walk(z)) + z[:, 2]


def _maximize(problem, starts):
    """Mode of the walk-coordinate density over several starts (returned in walk coordinates)."""
    p = problem.priors
    bounds = [(0.0, p.a_max), (problem.u_lo, problem.u_hi), (-60.0, 10.0), (-problem.t0_max, problem.t0_max)]
    lo, hi = np.array(bounds).T

    def objective(z):
        v = _log_target(problem, z)[0]
        return 1e300 if not np.isfinite(v) else -v

    best, best_val = None, np.inf
    for x0 in starts:
        z0 = np.clip(_to_walk(x0), lo, hi)
        res = minimize(objective, z0, method="L-BFGS-B", bounds=bounds, options={"maxiter": 500})
        res = minimize(objective, res.x, method="Nelder-Mead",
                       options={"xatol": 1e-8, "fatol": 1e-9, "maxiter": 4000})
        z = np.clip(res.x, lo, hi)
        val = objective(z)
        if val < best_val:
            best, best_val = z, val
    return best


def _laplace_covariance(problem, x):
    """Inverse Hessian of the negative log density at walk coordinates ``x``, regularized to be positive definite."""
    scale = np.array([0.01, 0.01, 0.01, 0.01 * max(problem.width[0], 1e-3)])
    f0 = _log_target(problem, x)[0]
    d = x.size
    h = np.zeros((d, d))
    for i in range(d):
        for j in range(i, d):
            if i == j:
                yp, ym = x.copy(), x.copy()
                yp[i] += scale[i]
                ym[i] -= scale[i]
                terms = (_log_target(problem, yp)[0], -2 * f0, _log_target(problem, ym)[0])
                denom = scale[i] ** 2
            else:
                terms = []
                for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                    y = x.copy()
                    y[i] += si * scale[i]
                    y[j] += sj * scale[j]
                    terms.append(si * sj * _log_target(problem, y)[0])
                denom = 4 * scale[i] * scale[j]
            # A step outside the support gives -inf; such entries fall back to zero curvature.
            val = sum(terms) / denom if all(np.isfinite(terms)) else np.nan
            h[i, j] = h[j, i] = -val if np.isfinite(val) else 0.0
    fallback = np.array([0.05, 0.2, 0.5, 0.2 * problem.width[0]]) ** 2
    try:
        w, v = np.linalg.eigh(h)
    except np.linalg.LinAlgError:
        return np.diag(fallback)
    if not np.all(np.isfinite(w)) or np.all(w <= 0):
        return np.diag(fallback)
    w = np.where(w > 1e-8 * w.max(), w, 1e-8 * w.max())
    cov = (v / w) @ v.T
    sd = np.sqrt(np.diag(cov))
    cap = np.sqrt(fallback) * 20
    if np.any(sd > cap):
        r = np.minimum(1.0, cap / sd)
        cov = cov * np.outer(r, r)
    return cov


def split_rhat(draws):
    """Split-chain potential scale reduction for ``draws`` of shape (chains, n)."""
    m, n = draws.shape
    half = n // 2
    parts = np.concatenate([draws[:, :half], draws[:, n - half:]], axis=0)
    means = parts.mean(axis=1)
    w = parts.var(axis=1, ddof=1).mean()
    b_over_n = means.var(ddof=1)
    if w <= 0:
        return 1.0 if b_over_n <= 0 else float("inf")
    var_plus = (half - 1) / half * w + b_over_n
    return float(math.sqrt(var_plus / w))


def effective_sample_size(draws):
    """Multi-chain ESS with Geyer's initial monotone sequence estimator."""
    m, n = draws.shape
    xc = draws - draws.mean(axis=1, keepdims=True)
    f = np.fft.rfft(xc, n=2 * n, axis=1)
    acov = np.fft.irfft(f * np.conj(f), axis=1)[:, :n] / n
    chain_var = acov[:, 0] * n / (n - 1)
    w = chain_var.mean()
    var_plus = w * (n - 1) / n + (draws.mean(axis=1).var(ddof=1) if m > 1 else 0.0)
    if var_plus <= 0:
        return float(m * n)
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    total, prev = 0.0, np.inf
    for t in range(0, n - 1, 2):
        pair = rho[t] + rho[t + 1]
        if pair <= 0:
            break
        pair = min(pair, prev)
        total += pair
        prev = pair
    tau = max(-1.0 + 2.0 * total, 1.0 / math.log10(max(m * n, 10)))
    return float(m * n / tau)


@dataclass(eq=False)
class PosteriorSummary:
    """Posterior draws and derived summaries of a two-level g2 fit.

    ``samples`` maps each quantity in :data:`QUANTITIES` to an array of shape
    (chains, draws); times are in seconds.
    """

    samples: dict
    tau_ps: np.ndarray
    median_curve: np.ndarray
    band_low: np.ndarray
    band_high: np.ndarray
    diagnostics: dict
    map_estimate: dict
    settings: dict = field(default_factory=dict)
    source: dict = field(default_factory=dict)

    @property
    def converged(self):
        return bool(self.diagnostics.get("converged", False))

    def flat(self, quantity):
        if quantity not in self.samples:
            raise ConfigurationError(f"unknown quantity {quantity!r}; choose from {sorted(self.samples)}")
        return np.asarray(self.samples[quantity]).ravel()

    def median(self, quantity):
        return float(np.median(self.flat(quantity)))

    def mean_sd(self, quantity):
        x = self.flat(quantity)
        return float(x.mean()), float(x.std(ddof=1))

    def report(self, quantity="g2_zero", digits=2):
        """``"g2(0) = 0.55 +- 0.06"``-style line (posterior mean and standard deviation)."""
        m, s = self.mean_sd(quantity)
        label = "g2(0)" if quantity == "g2_zero" else quantity
        return f"{label} = {m:.{digits}f} ± {s:.{digits}f}"

    def parameter_table(self):
        table = {}
        for q in QUANTITIES:
            x = self.flat(q)
            lo, hi = credible_interval(self, q, 0.95)
            table[q] = {"median": float(np.median(x)), "mean": float(x.mean()), "sd": float(x.std(ddof=1)),
                        "ci95": [lo, hi]}
        return table

    def to_dict(self):
        return {
            "schema": SCHEMA,
            "parameters": self.parameter_table(),
            "g2_zero_report": self.report(),
            "converged": self.converged,
            "diagnostics": self.diagnostics,
            "map_estimate": self.map_estimate,
            "settings": self.settings,
            "source": self.source,
            "curve": {"tau_ps": self.tau_ps.tolist(), "median": self.median_curve.tolist(),
                      "low": self.band_low.tolist(), "high": self.band_high.tolist()},
            "samples": {q: np.asarray(v).tolist() for q, v in self.samples.items()},
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("schema") != SCHEMA:
            raise FormatError(f"not a posterior document (schema {doc.get('schema')!r})")
        try:
            c = doc["curve"]
            return cls({q: np.asarray(v, dtype=float) for q, v in doc["samples"].items()},
                       np.asarray(c["tau_ps"], dtype=float), np.asarray(c["median"], dtype=float),
                       np.asarray(c["low"], dtype=float), np.asarray(c["high"], dtype=float),
                       dict(doc["diagnostics"]), dict(doc.get("map_estimate", {})),
                       dict(doc.get("settings", {})), dict(doc.get("source", {})))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed posterior document: {exc}") from None

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def from_json(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, ValueError) as exc:
            raise FormatError(f"cannot read posterior {path}: {exc}") from None

    def curve_csv(self, path):
        with Path(path).open("w") as fh:
            fh.write("tau_ps,median,low,high\n")
            for row in zip(self.tau_ps, self.median_curve, self.band_low, self.band_high):
                fh.write(",".join(f"{v:.10g}" for v in row) + "\n")


def _physical(x):
    """Sampling coordinates -> dict of physical quantities (seconds)."""
    return {"a": x[..., 0], "tau_d": np.exp(x[..., 1]) * _NS, "b": x[..., 2], "t0": x[..., 3] * _NS,
            "g2_zero": x[..., 2] - x[..., 0]}


def _sampling_coords(params):
    return np.array([params["a"], math.log(params["tau_d"] / _NS), params["b"], params["t0"] / _NS], dtype=float)


def log_likelihood(hist, params, priors=None):
    """Poisson log-likelihood (up to a data-only constant) of physical ``params`` for ``hist``."""
    prob = _Problem(hist, priors or Priors())
    return float(prob.log_likelihood(_sampling_coords(params)[None, :])[0])


def model_curve(hist, params):
    """Bin-averaged model g2 on the histogram grid for physical ``params``."""
    prob = _Problem(hist, Priors(tau_min=min(1e-12, params["tau_d"] / 2), tau_max=max(1.0, params["tau_d"] * 2)))
    return prob.model(_sampling_coords(params)[None, :])[0]


def fit_g2(hist, priors=None, sampler=None, seed=0):
    """Sample the posterior of the two-level model for ``hist``.

    Deterministic for a given ``seed``. An unconverged run (split R-hat above
    the threshold for any quantity) is returned with
    ``diagnostics["converged"] = False`` rather than raising.
    """
    priors = priors or Priors()
    sampler = sampler or SamplerSettings()
    if hist.n_bins <= 10:
        raise ConfigurationError(f"fit needs more than 10 bins, histogram has {hist.n_bins}")
    if not np.any(hist.counts > 0):
        raise ConfigurationError("degenerate histogram: all counts are zero")
    prob = _Problem(hist, priors)
    seeds = np.random.SeedSequence(int(seed)).spawn(sampler.chains + 1)
    rngs = [np.random.default_rng(s) for s in seeds[:-1]]
    init_rng = np.random.default_rng(seeds[-1])

    starts = [prob.heuristic_start()] + [prob.prior_draw(r) for r in rngs]
    z_mode = _maximize(prob, starts)
    cov = _laplace_covariance(prob, z_mode)
    chol = np.linalg.cholesky(cov + 1e-14 * np.eye(4))

    def target(z):
        return _log_target(prob, z)

    n_chains, n_keep, n_burn = sampler.chains, sampler.samples, sampler.burn_in
    x = np.empty((n_chains, 4))
    for c in range(n_chains):
        for _ in range(200):
            cand = z_mode + 2.0 * chol @ init_rng.standard_normal(4)
            if np.isfinite(target(cand)[0]):
                break
        else:
            cand = z_mode.copy()
        x[c] = cand

    n_steps = n_burn + n_keep
    noise = np.stack([r.standard_normal((n_steps, 4)) for r in rngs], axis=1)
    log_u = np.log(np.stack([r.random(n_steps) for r in rngs], axis=1))

    lp = target(x)
    step = 2.38 / 2.0
    accepted = np.zeros(n_chains)
    kept = np.empty((n_chains, n_keep, 4))
    burn_trace = []
    for s in range(n_steps):
        prop = x + step * noise[s] @ chol.T
        lp_prop = target(prop)
        acc = log_u[s] < lp_prop - lp
        x = np.where(acc[:, None], prop, x)
        lp = np.where(acc, lp_prop, lp)
        if s < n_burn:
            # Robbins-Monro step-size adaptation towards ~25 % acceptance; burn-in only.
            step *= math.exp((acc.mean() - 0.25) / math.sqrt(s + 1.0))
            burn_trace.append(x.copy())
            # Proposal covariance from the pooled chains, re-estimated at 1/2 and 3/4 of burn-in.
            if n_burn >= 200 and s + 1 in (n_burn // 2, 3 * n_burn // 4):
                pooled = np.concatenate(burn_trace[(s + 1) // 2:], axis=0)
                emp = np.cov(pooled, rowvar=False)
                if np.all(np.isfinite(emp)) and np.all(np.linalg.eigvalsh(emp) > 0):
                    chol = np.linalg.cholesky(emp + 1e-12 * np.diag(np.diag(emp)))
                    step = 2.38 / 2.0
        else:
            accepted += acc
            kept[:, s - n_burn] = x

    kept = _from_walk(kept)
    phys = _physical(kept)
    rhat = {q: split_rhat(phys[q]) for q in QUANTITIES}
    ess = {q: effective_sample_size(phys[q]) for q in QUANTITIES}
    diagnostics = {
        "rhat": rhat,
        "ess": ess,
        "acceptance_rate": (accepted / n_keep).tolist(),
        "converged": bool(all(r <= sampler.rhat_threshold for r in rhat.values())),
        "rhat_threshold": sampler.rhat_threshold,
    }

    flat = kept.reshape(-1, 4)
    idx = np.unique(np.linspace(0, flat.shape[0] - 1, min(sampler.curve_draws, flat.shape[0])).astype(int))
    curves = prob.model(flat[idx])
    low, med, high = np.percentile(curves, [2.5, 50.0, 97.5], axis=0)

    map_phys = {k: float(v) for k, v in _physical(_from_walk(z_mode)).items()}
    return PosteriorSummary(
        samples=phys,
        tau_ps=hist.bin_centers.astype(float),
        median_curve=med,
        band_low=low,
        band_high=high,
        diagnostics=diagnostics,
        map_estimate=map_phys,
        settings={"priors": asdict(priors), "sampler": asdict(sampler), "seed": int(seed)},
        source={"bin_width_ps": int(hist.bin_width), "n_bins": hist.n_bins, "total_counts": int(hist.counts.sum())},
    )


def credible_interval(summary, quantity, level=0.95):
    """Central ``level`` quantile interval of the posterior draws of ``quantity``."""
    if not 0 < level <= 1:
        raise ConfigurationError(f"level must lie in (0, 1], got {level}")
    x = summary.flat(quantity)
    lo, hi = np.quantile(x, [(1 - level) / 2, 1 - (1 - level) / 2])
    return float(lo), float(hi)


def synthetic_histogram(params, bin_width, max_tau, counts_per_bin, rng=None):
    """Histogram whose counts are drawn from the bin-averaged model (``rng=None``: exact expectations).

    ``params`` uses physical units (seconds). ``counts_per_bin`` is the expected
    count at ``g2 = 1``.
    """
    n_side = int(max_tau) // int(bin_width)
    w = int(bin_width)
    lags = np.full(2 * n_side + 1, w, dtype=np.int64)
    if w % 2 == 0:
        lags[n_side] = w - 1
    norm = counts_per_bin * lags / w
    stub = CorrelationHistogram(w, np.ones(2 * n_side + 1, dtype=np.int64), lags, norm, norm, norm, {})
    expected = norm * model_curve(stub, params)
    counts = np.rint(expected).astype(np.int64) if rng is None else rng.poisson(expected).astype(np.int64)
    g2 = counts / norm
    sigma = np.sqrt(np.maximum(counts, 1)) / norm
    meta = {"synthetic": True, "truth": {k: float(v) for k, v in params.items()}, "self_correlation": False,
            "zero_count_bins": np.flatnonzero(counts == 0).tolist()}
    return CorrelationHistogram(w, counts, lags, norm, g2, sigma, meta)
