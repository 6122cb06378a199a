import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vibronic.errors import ConfigurationError, FormatError
from vibronic.fitter import (PosteriorSummary, Priors, SamplerSettings, _laplace_covariance, _physical,
                             _Problem, _sampling_coords, credible_interval, effective_sample_size, fit_g2, load_fit_config,
                             log_likelihood, model_curve, split_rhat, synthetic_histogram)

FAST = SamplerSettings(chains=4, samples=800, burn_in=600)
TRUTH = {"a": 0.8, "tau_d": 4e-9, "b": 1.0, "t0": 0.0}


@pytest.fixture(scope="module")
def recovery_fit():
    hist = synthetic_histogram(TRUTH, 500, 40_000, 1e4, np.random.default_rng(42))
    return hist, fit_g2(hist, sampler=FAST, seed=3)


def test_recovers_synthetic_truth(recovery_fit):
    _, fit = recovery_fit
    assert fit.converged
    for q in ("a", "tau_d", "b", "t0"):
        lo, hi = credible_interval(fit, q)
        assert lo <= TRUTH[q] <= hi, q
    lo, hi = credible_interval(fit, "g2_zero")
    assert lo <= 0.2 <= hi
    assert abs(fit.median("a") - 0.8) < 0.05
    assert np.all(fit.band_low <= fit.median_curve) and np.all(fit.median_curve <= fit.band_high)
    assert np.all(np.asarray(fit.diagnostics["acceptance_rate"]) > 0.1)
    assert all(v > 100 for v in fit.diagnostics["ess"].values())


def test_flat_histogram_gives_null_result():
    hist = synthetic_histogram({"a": 0.0, "tau_d": 4e-9, "b": 1.0, "t0": 0.0}, 500, 40_000, 1e4)
    fit = fit_g2(hist, sampler=FAST, seed=1)
    assert fit.median("a") < 0.05
    lo, hi = credible_interval(fit, "g2_zero")
    assert lo <= 1.0 <= hi


def test_report_format(recovery_fit):
    _, fit = recovery_fit
    line = fit.report()
    assert re.fullmatch(r"g2\(0\) = \d\.\d\d ± \d\.\d\d", line)
    m, s = fit.mean_sd("g2_zero")
    assert line == f"g2(0) = {m:.2f} ± {s:.2f}"


def test_credible_interval_edges(recovery_fit):
    _, fit = recovery_fit
    x = fit.flat("a")
    assert credible_interval(fit, "a", 1.0) == (x.min(), x.max())
    with pytest.raises(ConfigurationError):
        credible_interval(fit, "bogus")
    with pytest.raises(ConfigurationError):
        credible_interval(fit, "a", 0.0)
    with pytest.raises(ConfigurationError):
        credible_interval(fit, "a", 1.5)


def test_interval_of_symmetric_posterior_is_symmetric():
    rng = np.random.default_rng(0)
    samples = {q: rng.normal(2.0, 0.5, (4, 5000)) for q in ("a", "tau_d", "b", "t0", "g2_zero")}
    summ = PosteriorSummary(samples, np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3), {}, {})
    lo, hi = credible_interval(summ, "b")
    med = summ.median("b")
    assert abs((hi - med) - (med - lo)) < 0.05 * (hi - lo)
    assert not summ.converged


@settings(derandomize=True, max_examples=25)
@given(st.floats(0.2, 0.85), st.floats(1e-9, 2e-8), st.floats(0.9, 1.1), st.integers(0, 2**32 - 1))
def test_truth_beats_five_sigma_perturbations(a, tau, b, seed):
    truth = {"a": a, "tau_d": tau, "b": b, "t0": 0.0}
    hist = synthetic_histogram(truth, 500, 40_000, 2000, np.random.default_rng(seed))
    x = _sampling_coords(truth)
    sd = np.sqrt(np.diag(_laplace_covariance(_Problem(hist, Priors()), x)))
    ll_true = log_likelihood(hist, truth)
    for i, name in enumerate(("a", "tau_d", "b", "t0")):
        y = x.copy()
        y[i] += 5 * sd[i]
        moved = {k: float(v) for k, v in _physical(y).items()}
        assert ll_true > log_likelihood(hist, moved), name


def test_seed_determinism():
    hist = synthetic_histogram(TRUTH, 500, 30_000, 2000, np.random.default_rng(1))
    s = SamplerSettings(chains=4, samples=200, burn_in=200)
    one, two = fit_g2(hist, sampler=s, seed=9), fit_g2(hist, sampler=s, seed=9)
    other = fit_g2(hist, sampler=s, seed=10)
    assert one.to_dict() == two.to_dict()
    assert not np.array_equal(one.samples["a"], other.samples["a"])


def test_count_rescaling_keeps_medians():
    hist = synthetic_histogram(TRUTH, 500, 40_000, 1000, np.random.default_rng(11))
    base = fit_g2(hist, sampler=FAST, seed=2)
    k = 4
    scaled = type(hist)(hist.bin_width, hist.counts * k, hist.lag_counts, hist.norm * k, hist.g2,
                        hist.sigma / np.sqrt(k), dict(hist.meta))
    big = fit_g2(scaled, sampler=FAST, seed=2)
    for q in ("a", "tau_d"):
        _, sd = base.mean_sd(q)
        assert abs(big.median(q) - base.median(q)) < sd
        assert big.mean_sd(q)[1] < sd


def test_degenerate_histograms_rejected():
    hist = synthetic_histogram(TRUTH, 500, 40_000, 100)
    zero = type(hist)(hist.bin_width, np.zeros_like(hist.counts), hist.lag_counts, hist.norm, hist.g2 * 0,
                      hist.sigma, {})
    with pytest.raises(ConfigurationError):
        fit_g2(zero)
    small = synthetic_histogram(TRUTH, 500, 2000, 100)
    assert small.n_bins <= 10
    with pytest.raises(ConfigurationError):
        fit_g2(small)


def test_model_curve_matches_closed_form_for_wide_bins_average():
    hist = synthetic_histogram(TRUTH, 500, 10_000, 100)
    tau = hist.bin_centers * 1e-12
    w = 500e-12
    lo, hi = np.abs(tau) - w / 2, np.abs(tau) + w / 2
    expected = 1.0 - 0.8 * 4e-9 / w * (np.exp(-lo / 4e-9) - np.exp(-hi / 4e-9))
    centre = len(tau) // 2
    expected[centre] = 1.0 - 0.8 * 2 * 4e-9 / w * (1 - np.exp(-w / 2 / 4e-9))
    np.testing.assert_allclose(model_curve(hist, TRUTH), expected, rtol=1e-9)


def test_posterior_json_roundtrip(recovery_fit, tmp_path):
    _, fit = recovery_fit
    fit.to_json(tmp_path / "p.json")
    back = PosteriorSummary.from_json(tmp_path / "p.json")
    for q in fit.samples:
        np.testing.assert_array_equal(back.samples[q], fit.samples[q])
    assert back.converged == fit.converged and back.report() == fit.report()
    fit.curve_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert len(lines) == fit.tau_ps.size + 1
    (tmp_path / "bad.json").write_text('{"schema": "nope"}')
    with pytest.raises(FormatError):
        PosteriorSummary.from_json(tmp_path / "bad.json")


def test_settings_validation():
    with pytest.raises(ConfigurationError):
        SamplerSettings(chains=3)
    with pytest.raises(ConfigurationError):
        SamplerSettings(samples=5)
    with pytest.raises(ConfigurationError):
        Priors(tau_min=2e-6)
    priors, sampler = load_fit_config({"priors": {"b_sd": 0.2}, "sampler": {"chains": 6}})
    assert priors.b_sd == 0.2 and sampler.chains == 6
    with pytest.raises(ConfigurationError):
        load_fit_config({"sampler": {"thin": 2}})


def test_rhat_and_ess_sanity():
    rng = np.random.default_rng(0)
    iid = rng.standard_normal((4, 2000))
    assert split_rhat(iid) == pytest.approx(1.0, abs=0.01)
    assert effective_sample_size(iid) == pytest.approx(8000, rel=0.15)
    shifted = iid + np.array([0, 0, 0, 1.0])[:, None]
    assert split_rhat(shifted) > 1.1
    ar = np.zeros((4, 4000))
    for t in range(1, 4000):
        ar[:, t] = 0.9 * ar[:, t - 1] + rng.standard_normal(4)
    expected = 16000 * (1 - 0.9) / (1 + 0.9)
    assert effective_sample_size(ar) == pytest.approx(expected, rel=0.3)
