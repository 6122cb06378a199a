"""Second-order correlation histograms g2_ab(tau) from time-tag streams.

Every ordered pair (a_i, b_j) with ``tau = t_b - t_a`` inside the histogram
range is counted (full correlation, not start-stop). Bins have width ``w``
ps and are centred on ``k * w`` for ``k = -K .. K``. A delay lying exactly on
a bin edge goes to the bin farther from zero, so the binning is mirror
symmetric: ``correlate(a, b)`` at ``tau`` equals ``correlate(b, a)`` at
``-tau`` bin for bin. With an even width the central bin therefore holds
``w - 1`` integer delays and all others ``w``; normalization uses these
per-bin lag counts.

Normalization divides the counts by ``N_a * N_b * lags / T`` where ``T`` is the
overlap of the two acquisition spans and ``N`` the events inside it, so that
uncorrelated stationary streams give ``g2 = 1``.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba as nb
import numpy as np

from .errors import ConfigurationError, FormatError, StreamError
from .timetags import TimeTagStream

# The bundled TBB is too old for numba; prefer OpenMP without warning about it.
nb.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

BRUTE_FORCE_LIMIT = 100_000
SCHEMA = "vibronic.histogram/1"


@nb.njit(cache=True, nogil=True)
def _count_chunk(ta, tb, i0, i1, w, n_side, exclude_self, hist):
    span2 = w * (2 * n_side + 1)  # |tau| < span2 / 2 lands inside the histogram
    inv = 1.0 / (2.0 * w)
    nb_ = tb.shape[0]
    j = np.searchsorted(tb, ta[i0] - (span2 + 1) // 2, side="right")
    for i in range(i0, i1):
        t = ta[i]
        while j < nb_ and 2 * (tb[j] - t) <= -span2:
            j += 1
        jj = j
        while jj < nb_ and 2 * (tb[jj] - t) < span2:
            if not (exclude_self and jj == i):
                # Bin of |tau| is the k with (2k - 1) w <= |2 tau| < (2k + 1) w: a float
                # estimate (no per-pair integer division), then an exact integer fix-up.
                tau = tb[jj] - t
                s = 2 * tau if tau >= 0 else -2 * tau
                k = np.int64((s + w) * inv)
                if (2 * k + 1) * w <= s:
                    k += 1
                elif (2 * k - 1) * w > s:
                    k -= 1
                hist[n_side + k if tau >= 0 else n_side - k] += 1
            jj += 1


@nb.njit(cache=True, parallel=True)
def _count_pairs(ta, tb, w, n_side, exclude_self, n_chunks):
    n_bins = 2 * n_side + 1
    partial = np.zeros((n_chunks, n_bins), dtype=np.int64)
    size = (ta.shape[0] + n_chunks - 1) // n_chunks
    for c in nb.prange(n_chunks):
        i0 = c * size
        i1 = min(ta.shape[0], i0 + size)
        if i0 < i1:
            _count_chunk(ta, tb, i0, i1, w, n_side, exclude_self, partial[c])
    return partial.sum(axis=0)


@nb.njit(cache=True)
def _count_pairs_brute(ta, tb, w, n_side, exclude_self):
    # Doubled bin edges (2k - 1) w for k = 1 .. n_side + 1; bin = number of edges <= 2|tau|.
    edges2 = (2 * np.arange(1, n_side + 2) - 1) * w
    hist = np.zeros(2 * n_side + 1, dtype=np.int64)
    for i in range(ta.shape[0]):
        for j in range(tb.shape[0]):
            if exclude_self and i == j:
                continue
            tau = tb[j] - ta[i]
            k = np.searchsorted(edges2, 2 * abs(tau), side="right")
            if k <= n_side:
                hist[n_side + (k if tau >= 0 else -k)] += 1
    return hist


@dataclass(eq=False)
class CorrelationHistogram:
    """Binned coincidence counts and normalized g2 estimate.

    ``norm[k]`` is the expected count in bin ``k`` for uncorrelated streams
    (``g2 = counts / norm``). ``sigma`` is the Poisson error ``sqrt(counts) / norm``;
    empty bins use ``counts = 1`` as an upper-bound convention and are listed
    in ``meta["zero_count_bins"]``.
    """

    bin_width: int  # ps
    counts: np.ndarray
    lag_counts: np.ndarray
    norm: np.ndarray
    g2: np.ndarray
    sigma: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_side(self):
        return (self.counts.shape[0] - 1) // 2

    @property
    def n_bins(self):
        return int(self.counts.shape[0])

    @property
    def bin_centers(self):
        """Bin centres in ps."""
        return np.arange(-self.n_side, self.n_side + 1, dtype=np.int64) * self.bin_width

    @property
    def bin_edges(self):
        """Bin boundaries in ps (half-integers when the width is odd)."""
        return (np.arange(-self.n_side, self.n_side + 2) - 0.5) * self.bin_width

    def to_dict(self):
        return {
            "schema": SCHEMA,
            "bin_width_ps": int(self.bin_width),
            "bin_centers_ps": self.bin_centers.tolist(),
            "bin_edges_ps": self.bin_edges.tolist(),
            "lag_counts": self.lag_counts.tolist(),
            "counts": self.counts.tolist(),
            "norm": self.norm.tolist(),
            "g2": self.g2.tolist(),
            "sigma": self.sigma.tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("schema") != SCHEMA:
            raise FormatError(f"not a histogram document (schema {doc.get('schema')!r})")
        try:
            counts = np.asarray(doc["counts"], dtype=np.int64)
            h = cls(int(doc["bin_width_ps"]), counts, np.asarray(doc["lag_counts"], dtype=np.int64),
                    np.asarray(doc["norm"], dtype=float), np.asarray(doc["g2"], dtype=float),
                    np.asarray(doc["sigma"], dtype=float), dict(doc.get("meta", {})))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed histogram document: {exc}") from None
        if counts.ndim != 1 or counts.shape[0] % 2 == 0:
            raise FormatError("histogram must have an odd number of bins")
        return h

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def from_json(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, ValueError) as exc:
            raise FormatError(f"cannot read histogram {path}: {exc}") from None


def _as_timestamps(stream, name):
    if isinstance(stream, TimeTagStream):
        ts = stream.timestamps
    else:
        ts = np.ascontiguousarray(stream, dtype=np.int64)
        if ts.ndim != 1:
            raise StreamError(f"{name}: expected a 1-D timestamp array")
        if np.any(np.diff(ts) < 0):
            raise StreamError(f"{name}: timestamps are not sorted")
    if ts.shape[0] == 0:
        raise StreamError(f"{name}: empty stream (zero count rate); cannot normalize")
    return ts


def _is_self(a, b, ta, tb):
    # Identity, not equality: two distinct streams with equal content (e.g. a
    # noiseless photon band and its phonon stream) are genuinely coincident.
    return a is b or ta is tb


def _check_binning(bin_width, max_tau):
    if int(bin_width) != bin_width or bin_width < 1:
        raise ConfigurationError(f"bin_width must be an integer >= 1 ps, got {bin_width}")
    if max_tau < bin_width:
        raise ConfigurationError(f"max_tau ({max_tau} ps) must be >= bin_width ({bin_width} ps)")
    return int(bin_width), int(max_tau) // int(bin_width)


def _finish(counts, ta, tb, w, exclude_self):
    n_side = (counts.shape[0] - 1) // 2
    start = max(int(ta[0]), int(tb[0]))
    stop = min(int(ta[-1]), int(tb[-1]))
    span = stop - start
    if span <= 0:
        raise StreamError("streams do not overlap in time; cannot normalize")
    n_a = int(np.searchsorted(ta, stop, side="right") - np.searchsorted(ta, start, side="left"))
    n_b = int(np.searchsorted(tb, stop, side="right") - np.searchsorted(tb, start, side="left"))
    pairs = n_a * (n_b - 1) if exclude_self else n_a * n_b
    if pairs <= 0:
        raise StreamError("fewer than two events in the overlap window; cannot normalize")
    lags = np.full(2 * n_side + 1, w, dtype=np.int64)
    if w % 2 == 0:
        lags[n_side] = w - 1
    norm = pairs * lags / span
    g2 = counts / norm
    sigma = np.sqrt(np.maximum(counts, 1)) / norm
    zero = np.flatnonzero(counts == 0)
    meta = {
        "rate_a_per_s": n_a / span * 1e12,
        "rate_b_per_s": n_b / span * 1e12,
        "events_a": n_a,
        "events_b": n_b,
        "overlap_ps": span,
        "overlap_start_ps": start,
        "bin_width_ps": w,
        "self_correlation": bool(exclude_self),
        "zero_count_bins": zero.tolist(),
        "mode": "full-pair",
    }
    return CorrelationHistogram(w, counts.astype(np.int64), lags, norm, g2, sigma, meta)


def correlate(stream_a, stream_b, bin_width, max_tau, n_chunks=None):
    """Correlate two sorted streams; returns a :class:`CorrelationHistogram`.

    ``bin_width`` and ``max_tau`` are integer picoseconds; the histogram has
    ``max_tau // bin_width`` bins on each side of the central bin. Passing the
    same stream object twice excludes each event's pairing with itself.
    ``n_chunks`` only changes how the work is split, never the result.
    """
    ta = _as_timestamps(stream_a, "stream_a")
    tb = _as_timestamps(stream_b, "stream_b")
    w, n_side = _check_binning(bin_width, max_tau)
    exclude_self = _is_self(stream_a, stream_b, ta, tb)
    if n_chunks is None:
        n_chunks = 4 * nb.get_num_threads()
    n_chunks = max(1, min(int(n_chunks), ta.shape[0]))
    counts = _count_pairs(ta, tb, np.int64(w), np.int64(n_side), exclude_self, n_chunks)
    return _finish(counts, ta, tb, w, exclude_self)


def brute_force_correlate(stream_a, stream_b, bin_width, max_tau):
    """Reference implementation of :func:`correlate` by explicit enumeration of all pairs."""
    ta = _as_timestamps(stream_a, "stream_a")
    tb = _as_timestamps(stream_b, "stream_b")
    if ta.shape[0] > BRUTE_FORCE_LIMIT or tb.shape[0] > BRUTE_FORCE_LIMIT:
        raise ConfigurationError(f"brute force is limited to {BRUTE_FORCE_LIMIT} events per stream")
    w, n_side = _check_binning(bin_width, max_tau)
    exclude_self = _is_self(stream_a, stream_b, ta, tb)
    counts = _count_pairs_brute(ta, tb, np.int64(w), np.int64(n_side), exclude_self)
    return _finish(counts, ta, tb, w, exclude_self)


def g2_at_zero(hist, window_bins=1):
    """Mean g2 over the central ``window_bins`` bins and its propagated Poisson error."""
    if window_bins < 1 or window_bins % 2 == 0 or window_bins > hist.n_bins:
        raise ConfigurationError(f"window_bins must be odd and <= {hist.n_bins}, got {window_bins}")
    if not np.any(hist.counts > 0):
        raise ConfigurationError("histogram holds no coincidences")
    half = window_bins // 2
    sel = slice(hist.n_side - half, hist.n_side + half + 1)
    value = float(np.mean(hist.g2[sel]))
    err = float(math.sqrt(np.sum(hist.sigma[sel] ** 2)) / window_bins)
    return value, err


def renormalize_tail(hist, min_abs_tau):
    """Rescale g2 so that its mean over ``|tau| >= min_abs_tau`` equals one (optional post-step)."""
    tail = np.abs(hist.bin_centers) >= min_abs_tau
    if not np.any(tail) or hist.g2[tail].mean() <= 0:
        raise ConfigurationError("no usable tail bins for renormalization")
    factor = float(hist.g2[tail].mean())
    meta = dict(hist.meta, tail_renormalization=factor)
    return CorrelationHistogram(hist.bin_width, hist.counts, hist.lag_counts, hist.norm * factor,
                                hist.g2 / factor, hist.sigma / factor, meta)
