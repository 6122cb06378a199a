import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from vibronic.correlator import (CorrelationHistogram, brute_force_correlate, correlate, g2_at_zero,
                                 renormalize_tail)
from vibronic.errors import ConfigurationError, FormatError, StreamError
from vibronic.fitter import synthetic_histogram
from vibronic.simulator import EmitterConfig, SceneConfig, simulate
from vibronic.timetags import TimeTagStream


def sorted_ints(draw, n, hi):
    return np.sort(np.array(draw(st.lists(st.integers(0, hi), min_size=n, max_size=n)), dtype=np.int64))


@st.composite
def stream_pairs(draw):
    hi = draw(st.integers(50, 100_000))
    a = sorted_ints(draw, draw(st.integers(2, 120)), hi)
    b = sorted_ints(draw, draw(st.integers(2, 120)), hi)
    w = draw(st.integers(1, 40))
    max_tau = draw(st.integers(w, 60 * w))
    # the normalization needs a nonzero overlap window with events of both streams inside
    start, stop = max(a[0], b[0]), min(a[-1], b[-1])
    assume(start < stop)
    assume(all(np.searchsorted(x, stop, "right") - np.searchsorted(x, start) >= 2 for x in (a, b)))
    return a, b, w, max_tau


@given(stream_pairs(), st.integers(1, 9))
def test_main_path_equals_brute_force(case, n_chunks):
    a, b, w, max_tau = case
    fast = correlate(a, b, w, max_tau, n_chunks=n_chunks)
    slow = brute_force_correlate(a, b, w, max_tau)
    assert np.array_equal(fast.counts, slow.counts)
    np.testing.assert_array_equal(fast.g2, slow.g2)


@given(stream_pairs())
def test_exchange_symmetry(case):
    a, b, w, max_tau = case
    ab = correlate(a, b, w, max_tau)
    ba = correlate(b, a, w, max_tau)
    assert np.array_equal(ab.counts, ba.counts[::-1])


@given(stream_pairs())
def test_self_correlation_symmetric_and_matches_oracle(case):
    a, _, w, max_tau = case
    h = correlate(a, a, w, max_tau)
    assert np.array_equal(h.counts, h.counts[::-1])
    assert np.array_equal(h.counts, brute_force_correlate(a, a, w, max_tau).counts)
    assert h.meta["self_correlation"]


def test_hand_countable_pair():
    h = correlate(np.array([0, 20_000]), np.array([7000, 40_000]), 1000, 10_000)
    k = h.n_side + 7
    assert h.counts[k] == 1 and h.counts.sum() == 1
    h2 = correlate(np.array([7000, 40_000]), np.array([0, 20_000]), 1000, 10_000)
    assert h2.counts[h.n_side - 7] == 1 and h2.counts.sum() == 1


def test_edge_ties_go_away_from_zero():
    # width 10: bin 0 covers (-5, 5), bin 1 covers [5, 15), bin -1 covers (-15, -5]
    a = np.array([0, 100])
    b = np.array([5, 117, 300])
    h = correlate(a, b, 10, 40)
    assert h.counts[h.n_side + 1] == 1 and h.counts[h.n_side + 2] == 1 and h.counts.sum() == 2
    h_rev = correlate(b, a, 10, 40)
    assert h_rev.counts[h.n_side - 1] == 1 and h_rev.counts[h.n_side] == 0
    # odd width 9: edges at +-4.5, so a 5 ps delay lies in bin 1
    odd = correlate(np.array([0, 100]), np.array([5, 200]), 9, 40)
    assert odd.counts[odd.n_side + 1] == 1 and odd.counts.sum() == 1


def test_edges_exact_for_wide_bins_and_long_delays():
    w = 999_983
    taus = np.array([(2 * k + 1) * w // 2 + d for k in range(0, 40, 3) for d in (-1, 0, 1)] + [w // 2 * 2 + 1])
    a = np.array([0, 10**12])
    b = np.sort(np.r_[taus, -taus[taus < 30 * w]] + 10**11)
    a = np.sort(np.r_[a, 10**11])
    fast = correlate(a, b, w, 45 * w)
    assert np.array_equal(fast.counts, brute_force_correlate(a, b, w, 45 * w).counts)


def test_even_width_central_bin_has_one_lag_less():
    h = correlate(np.arange(0, 10**6, 37), np.arange(5, 10**6, 41), 10, 100)
    assert h.lag_counts[h.n_side] == 9 and np.all(np.delete(h.lag_counts, h.n_side) == 10)
    odd = correlate(np.arange(0, 10**6, 37), np.arange(5, 10**6, 41), 11, 110)
    assert np.all(odd.lag_counts == 11)


def test_histogram_shape_and_edges():
    h = correlate(np.arange(0, 10**5, 13), np.arange(0, 10**5, 17), 100, 1050)
    assert h.n_bins == 21 and h.n_bins % 2 == 1
    assert h.bin_centers[h.n_side] == 0
    np.testing.assert_array_equal(h.bin_edges, (np.arange(-10, 12) - 0.5) * 100)


def test_poisson_baseline():
    rng = np.random.default_rng(7)
    t = 2 * 10**12
    a = np.sort(rng.integers(0, t, 2 * 10**6))
    b = np.sort(rng.integers(0, t, 2 * 10**6))
    h = correlate(a, b, 1000, 250_000)
    assert np.mean(h.counts) > 1e3
    assert abs(h.g2.mean() - 1.0) < 0.01
    assert np.mean(np.abs(h.g2 - 1) < 3 * h.sigma) > 0.95
    assert np.all(h.sigma > 0)


def test_stationarity_tail_of_emitter_stream():
    ph, _ = simulate(SceneConfig([EmitterConfig(1e6, [1.0])], 1, 1.0, seed=21))
    h = correlate(ph, ph, 1000, 100_000)
    tail = np.abs(h.bin_centers) > 40_000
    assert 0.98 <= h.g2[tail].mean() <= 1.02


def test_errors():
    with pytest.raises(StreamError):
        correlate(np.array([3, 1, 2]), np.array([1, 2]), 1, 10)
    with pytest.raises(StreamError):
        correlate(np.array([], dtype=np.int64), np.array([1, 2]), 1, 10)
    with pytest.raises(StreamError):
        correlate(TimeTagStream.empty(), np.array([1, 2]), 1, 10)
    with pytest.raises(StreamError):
        correlate(np.array([1, 2]), np.array([10, 20]), 1, 10)
    with pytest.raises(ConfigurationError):
        correlate(np.array([1, 2]), np.array([1, 2]), 0, 10)
    with pytest.raises(ConfigurationError):
        correlate(np.array([1, 2]), np.array([1, 2]), 10, 5)
    with pytest.raises(ConfigurationError):
        brute_force_correlate(np.arange(200_000), np.arange(10), 1, 10)


def test_zero_count_bins_flagged_with_unit_sigma():
    h = correlate(np.array([0, 1000]), np.array([0, 1000]) + 3, 10, 100)
    assert h.meta["zero_count_bins"]
    k = h.meta["zero_count_bins"][0]
    assert h.sigma[k] == pytest.approx(1.0 / h.norm[k])


def test_json_roundtrip(tmp_path):
    h = correlate(np.arange(0, 10**5, 13), np.arange(0, 10**5, 17), 100, 1000)
    h.to_json(tmp_path / "h.json")
    back = CorrelationHistogram.from_json(tmp_path / "h.json")
    assert np.array_equal(back.counts, h.counts) and np.array_equal(back.g2, h.g2)
    assert back.bin_width == 100 and back.meta == h.meta
    (tmp_path / "bad.json").write_text('{"schema": "other"}')
    with pytest.raises(FormatError):
        CorrelationHistogram.from_json(tmp_path / "bad.json")


def test_g2_at_zero_flat_and_ideal():
    flat = synthetic_histogram({"a": 0.0, "tau_d": 4e-9, "b": 1.0, "t0": 0.0}, 500, 20_000, 1e4)
    assert g2_at_zero(flat)[0] == pytest.approx(1.0, abs=1e-3)
    ideal = synthetic_histogram({"a": 1.0, "tau_d": 4e-9, "b": 1.0, "t0": 0.0}, 500, 20_000, 1e6)
    value, err = g2_at_zero(ideal)
    assert 0 <= value <= 500 / (2 * 4000) and err > 0
    assert g2_at_zero(ideal, 3)[0] > value
    with pytest.raises(ConfigurationError):
        g2_at_zero(ideal, 2)


def test_two_equal_independent_emitters_in_one_band():
    ems = [EmitterConfig(5e5, [1.0]), EmitterConfig(5e5, [1.0])]
    ph, _ = simulate(SceneConfig(ems, 1, 2.0, seed=8))
    value, _ = g2_at_zero(correlate(ph, ph, 500, 50_000))
    assert 0.45 <= value <= 0.65


def test_chunk_count_does_not_change_result():
    rng = np.random.default_rng(1)
    a = np.sort(rng.integers(0, 10**9, 50_000))
    b = np.sort(rng.integers(0, 10**9, 50_000))
    ref = correlate(a, b, 100, 100_000, n_chunks=1).counts
    for n in (2, 7, 64, 10**6):
        assert np.array_equal(correlate(a, b, 100, 100_000, n_chunks=n).counts, ref)


def test_renormalize_tail():
    h = synthetic_histogram({"a": 0.5, "tau_d": 4e-9, "b": 1.2, "t0": 0.0}, 500, 100_000, 1e4)
    r = renormalize_tail(h, 60_000)
    assert r.g2[np.abs(r.bin_centers) >= 60_000].mean() == pytest.approx(1.0)
    assert r.meta["tail_renormalization"] == pytest.approx(1.2, rel=1e-3)
