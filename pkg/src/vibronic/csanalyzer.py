"""Cauchy-Schwarz test on zero-delay correlation posteriors.

For bands l and m the classical two-mode bound is
``g2_lm(0)**2 <= g2_ll(0) * g2_mm(0)``. Independent draws from the three
g2(0) posteriors give samples of ``R = g2_lm(0)**2 / (g2_ll(0) * g2_mm(0))``;
the verdict follows from ``P(R > 1)``.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError

CLASSICAL, VIOLATION, INCONCLUSIVE = "classical", "violation", "inconclusive"
EXIT_CODES = {CLASSICAL: 0, VIOLATION: 10, INCONCLUSIVE: 11}
SCHEMA = "vibronic.cs_verdict/1"
ZERO_MASS_LIMIT = 0.01


@dataclass(eq=False)
class CSVerdict:
    pair: tuple
    ratio: float  # posterior median of R
    probability_violation: float
    mc_error: float
    classification: str
    ratio_summary: dict
    inputs: dict
    diagnostics: list = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    @property
    def exit_code(self):
        return EXIT_CODES[self.classification]

    def to_dict(self):
        return {
            "schema": SCHEMA,
            "pair": list(self.pair),
            "ratio": self.ratio,
            "probability_violation": self.probability_violation,
            "mc_error": self.mc_error,
            "classification": self.classification,
            "ratio_summary": self.ratio_summary,
            "inputs": self.inputs,
            "diagnostics": self.diagnostics,
            "settings": self.settings,
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("schema") != SCHEMA:
            raise FormatError(f"not a verdict document (schema {doc.get('schema')!r})")
        try:
            return cls(tuple(doc["pair"]), doc["ratio"], float(doc["probability_violation"]),
                       float(doc["mc_error"]), doc["classification"], dict(doc["ratio_summary"]),
                       dict(doc["inputs"]), list(doc.get("diagnostics", [])), dict(doc.get("settings", {})))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed verdict document: {exc}") from None

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def _g2_zero(posterior):
    """Flat g2(0) samples from a PosteriorSummary or a plain array."""
    if hasattr(posterior, "samples"):
        x = posterior.flat("g2_zero")
    else:
        x = np.asarray(posterior, dtype=float).ravel()
    if x.size == 0 or not np.all(np.isfinite(x)):
        raise ConfigurationError("g2(0) samples must be finite and non-empty")
    if np.any(x < 0):
        raise ConfigurationError("g2(0) samples must be >= 0")
    return x


def _order_key(x):
    # Invariant under positive rescaling of the samples, so the canonical
    # ll/mm order (and hence the draws) survives a common scale factor.
    ranks = np.argsort(x, kind="stable")
    return (hashlib.sha256(ranks.astype(np.int64).tobytes()).hexdigest(), x.size)


def _summary(x):
    return {"median": float(np.median(x)), "mean": float(x.mean()), "sd": float(x.std(ddof=1)) if x.size > 1 else 0.0,
            "ci95": [float(v) for v in np.quantile(x, [0.025, 0.975])]}


def _ratio_summary(r):
    finite = r[np.isfinite(r)]
    out = {"n_draws": int(r.size), "n_infinite": int(r.size - finite.size)}
    if finite.size:
        with np.errstate(invalid="ignore"):
            q = np.quantile(r, [0.025, 0.16, 0.5, 0.84, 0.975])
        q = np.where(np.isnan(q), np.inf, q)  # interpolation between two infinite draws
        out.update({"mean_finite": float(finite.mean()), "min": float(finite.min()),
                    "quantiles": {k: (float(v) if np.isfinite(v) else None)
                                  for k, v in zip(("2.5", "16", "50", "84", "97.5"), q)}})
    return out


def _unconverged(posterior):
    return hasattr(posterior, "converged") and not posterior.converged


def cs_check(posterior_ll, posterior_mm, posterior_lm, *, n_draws=10_000, seed=0,
             violation_threshold=0.95, classical_threshold=0.05, pair=("l", "m"), require_converged=True):
    """Classify a band pair as classical, violation or inconclusive.

    Inputs are :class:`~vibronic.fitter.PosteriorSummary` objects (their
    ``g2_zero = b - a`` samples are used) or raw arrays of g2(0) samples.
    The result is symmetric in ``posterior_ll`` and ``posterior_mm`` and
    deterministic for a given ``seed``. With ``require_converged`` an input
    flagged unconverged forces ``inconclusive`` (with a diagnostic).
    """
    if not 0 <= classical_threshold < violation_threshold <= 1:
        raise ConfigurationError("need 0 <= classical_threshold < violation_threshold <= 1")
    if n_draws < 100:
        raise ConfigurationError("n_draws must be >= 100")
    ll, mm, lm = _g2_zero(posterior_ll), _g2_zero(posterior_mm), _g2_zero(posterior_lm)
    settings = {"n_draws": int(n_draws), "seed": int(seed), "violation_threshold": violation_threshold,
                "classical_threshold": classical_threshold}
    inputs = {"g2_ll": _summary(ll), "g2_mm": _summary(mm), "g2_lm": _summary(lm)}

    diagnostics = []
    if require_converged:
        for post, name in ((posterior_ll, "g2_ll"), (posterior_mm, "g2_mm"), (posterior_lm, "g2_lm")):
            if _unconverged(post):
                diagnostics.append(f"unconverged input: {name} fit has R-hat above threshold")
    for x, name in ((ll, "g2_ll"), (mm, "g2_mm")):
        zero = float(np.mean(x == 0))
        if zero > ZERO_MASS_LIMIT:
            diagnostics.append(f"divide-by-zero: {zero:.1%} of {name}(0) posterior mass is exactly 0")
    first, second = sorted((ll, mm), key=_order_key)
    rng = np.random.default_rng(int(seed))
    x1 = first[rng.integers(0, first.size, n_draws)]
    x2 = second[rng.integers(0, second.size, n_draws)]
    x3 = lm[rng.integers(0, lm.size, n_draws)]
    with np.errstate(divide="ignore", invalid="ignore"):
        r = x3 ** 2 / (x1 * x2)
    r = np.where(np.isnan(r), np.inf, r)  # 0/0: no classical bound can hold

    p = float(np.mean(r > 1))
    mc = math.sqrt(max(p * (1 - p), 1.0 / n_draws) / n_draws)
    if diagnostics:
        cls = INCONCLUSIVE
    elif p >= violation_threshold:
        cls = VIOLATION
    elif p <= classical_threshold:
        cls = CLASSICAL
    else:
        cls = INCONCLUSIVE
    median = float(np.median(r))
    return CSVerdict(tuple(pair), median if np.isfinite(median) else None, p, mc, cls, _ratio_summary(r), inputs,
                     diagnostics, settings)
