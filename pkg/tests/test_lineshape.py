import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vibronic.errors import ConfigurationError, DomainError, FormatError
from vibronic.lineshape import (CouplingDensity, LineshapeParams, LorentzPeak, PhononDOS, ReweightSpec, Spectrum,
                                band_weights, bose_occupation, debye_waller_fraction, reweight_dos,
                                synthesize_spectrum, zeta)
from vibronic.units import K_B_MEV

E0 = 2.21


def single_mode_spectrum(s, omega=170.0, temperature=0.0, fwhm=1.3):
    return synthesize_spectrum(LineshapeParams(huang_rhys=s, temperature=temperature, zpl_fwhm=fwhm),
                               PhononDOS.single_mode(omega))


def replica_weight(spec, k, omega=170.0):
    """Weight between the midpoints to the neighbouring lines; the ZPL window extends to the blue edge at T = 0."""
    center = E0 - k * omega * 1e-3
    half = 0.5 * omega * 1e-3
    high = spec.energies[-1] if k == 0 and spec.params["temperature"] == 0 else center + half
    return spec.integral(center - half, high) / spec.integral()


def test_bose_zero_temperature():
    assert bose_occupation(166.0, 0.0) == 0.0


def test_bose_values_match_formula():
    assert bose_occupation(166.0, 300.0) == pytest.approx(1 / math.expm1(166 / (K_B_MEV * 300)), rel=1e-12)
    assert bose_occupation(166.0, 300.0) == pytest.approx(1.63e-3, rel=0.01)
    assert bose_occupation(10.0, 3.6) == pytest.approx(1 / math.expm1(10 / (K_B_MEV * 3.6)), rel=1e-12)


@pytest.mark.parametrize("energy", [0.0, -5.0, float("nan")])
def test_bose_rejects_nonpositive_energy(energy):
    with pytest.raises(DomainError):
        bose_occupation(energy, 10.0)


@pytest.mark.parametrize("energies, values", [
    ([1.0], [1.0]),
    ([1.0, 1.0], [1.0, 1.0]),
    ([2.0, 1.0], [1.0, 1.0]),
    ([0.0, 1.0], [1.0, 1.0]),
    ([1.0, 2.0], [-1.0, 1.0]),
    ([1.0, 2.0], [0.0, 0.0]),
])
def test_dos_validation(energies, values):
    with pytest.raises(DomainError):
        PhononDOS(energies, values)


def test_dos_csv_roundtrip(tmp_path):
    dos = PhononDOS(np.linspace(1, 200, 50), np.linspace(0, 3, 50) ** 2)
    dos.to_csv(tmp_path / "d.csv")
    back = PhononDOS.from_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.energies, dos.energies)
    np.testing.assert_array_equal(back.values, dos.values)


@pytest.mark.parametrize("content", ["energy,dos\n1,2\n3,4\n", "energy_meV,dos\n1,2,3\n", "energy_meV,dos\n1,x\n",
                                     "energy_meV,dos\n", "energy_meV,dos\n2,1\n1,1\n"])
def test_dos_csv_malformed(tmp_path, content):
    p = tmp_path / "bad.csv"
    p.write_text(content)
    with pytest.raises(FormatError):
        PhononDOS.from_csv(p)


def test_reweight_wide_lorentzian_is_flat():
    dos = PhononDOS(np.linspace(1, 200, 400), 1 + np.sin(np.linspace(0, 6, 400)))
    out = reweight_dos(dos, ReweightSpec([LorentzPeak(100.0, 1e7)]))
    np.testing.assert_allclose(out.values / dos.values, (out.values / dos.values)[0], rtol=1e-8)


def test_reweight_three_peaks_on_uniform_dos():
    grid = np.arange(1.0, 210.0, 0.25)
    out = reweight_dos(PhononDOS(grid, np.ones_like(grid)),
                       ReweightSpec([LorentzPeak(166, 3), LorentzPeak(177, 3), LorentzPeak(200, 3, 4)]))
    v = out.values
    maxima = grid[1:-1][(v[1:-1] > v[:-2]) & (v[1:-1] > v[2:])]
    np.testing.assert_allclose(maxima, [166, 177, 200], atol=0.25)
    assert out.integral() == pytest.approx(210.0 - 1.25, rel=1e-12)


def test_reweight_preserves_support():
    dos = PhononDOS.single_mode(100.0)
    out = reweight_dos(dos, ReweightSpec([LorentzPeak(100.0, 3.0)]))
    assert np.count_nonzero(out.values) == 1 and out.values[2] > 0


def test_reweight_center_outside_grid():
    with pytest.raises(ConfigurationError):
        reweight_dos(PhononDOS.single_mode(100.0), ReweightSpec([LorentzPeak(300.0, 3.0)]))


def test_reweight_spec_validation():
    with pytest.raises(ConfigurationError):
        LorentzPeak(100.0, 0.0)
    with pytest.raises(ConfigurationError):
        ReweightSpec([LorentzPeak(100.0, 1.0, 0.0)])
    with pytest.raises(FormatError):
        ReweightSpec.from_dict({"peaks": [{"center_meV": 1.0}]})


def test_reweight_spec_roundtrip():
    spec = ReweightSpec([LorentzPeak(166, 3, 1), LorentzPeak(200, 3, 4)])
    assert ReweightSpec.from_dict(spec.to_dict()) == spec


def test_zeta_zero_temperature_is_one():
    dos = PhononDOS(np.linspace(6, 200, 300), np.linspace(1, 2, 300))
    assert zeta(0.0, dos, 0.0) == pytest.approx(1.0, abs=1e-12)


@given(st.floats(0.1, 500.0))
def test_zeta_zero_at_finite_temperature_is_real_and_at_least_one(temperature):
    dos = PhononDOS(np.linspace(6, 200, 100), np.ones(100))
    z = zeta(0.0, dos, temperature)
    assert abs(z.imag) < 1e-14 and z.real >= 1.0


@given(st.floats(-50.0, 50.0))
def test_zeta_single_mode_is_phase(t):
    z = zeta(t, PhononDOS.single_mode(170.0), 0.0)
    assert z == pytest.approx(np.exp(1j * 170.0 * t), abs=1e-12)


@given(st.floats(0.0, 20.0), st.floats(0.0, 400.0))
def test_zeta_hermitian(t, temperature):
    dos = PhononDOS(np.linspace(6, 200, 80), np.linspace(2, 1, 80))
    assert zeta(-t, dos, temperature) == pytest.approx(np.conj(zeta(t, dos, temperature)), abs=1e-12)


def test_zeta_uniform_matches_direct():
    lat = CouplingDensity.from_dos(PhononDOS(np.linspace(6, 200, 90), np.ones(90)))
    direct = lat.zeta(np.arange(5000) * 0.003, 77.0)
    np.testing.assert_allclose(lat.zeta_uniform(5000, 0.003, 77.0), direct, atol=1e-11)


def test_zero_coupling_gives_lorentzian():
    spec = synthesize_spectrum(LineshapeParams(huang_rhys=0.0, zpl_fwhm=2.0), PhononDOS.single_mode(170.0))
    e = (spec.energies - E0) * 1e3
    expected = 1e3 * (1.0 / math.pi) * 1.0 / (1.0 + e**2)  # per eV, half-width 1 meV
    assert spec.energies[np.argmax(spec.intensities)] == pytest.approx(E0, abs=1e-4)
    assert np.max(np.abs(spec.intensities - expected)) < 1e-3 * expected.max()
    inside = math.atan(e[-1]) - math.atan(e[0])  # Lorentzian mass within the synthesized window
    assert debye_waller_fraction(spec, 50.0) == pytest.approx(2 * math.atan(50) / inside, abs=1e-3)


@pytest.mark.parametrize("s", [0.5, 1.0, 2.0])
def test_single_mode_poisson_progression(s):
    spec = single_mode_spectrum(s)
    for k in range(6):
        assert replica_weight(spec, k) == pytest.approx(math.exp(-s) * s**k / math.factorial(k), abs=1e-3)


@pytest.mark.parametrize("s", [0.25, 0.5, 1.0, 2.0])
def test_debye_waller_law(s):
    assert debye_waller_fraction(single_mode_spectrum(s), 85.0) == pytest.approx(math.exp(-s), rel=0.01)


def test_total_weight_independent_of_coupling():
    totals = [single_mode_spectrum(s).integral() for s in np.linspace(0, 2, 5)]
    assert (max(totals) - min(totals)) / np.mean(totals) < 5e-3


def test_detailed_balance():
    omega, temp = 50.0, 300.0
    spec = synthesize_spectrum(LineshapeParams(huang_rhys=1.0, temperature=temp, zpl_fwhm=0.2),
                               PhononDOS.single_mode(omega))
    n = bose_occupation(omega, temp)
    stokes = replica_weight(spec, 1, omega)
    anti = replica_weight(spec, -1, omega)
    assert anti / stokes == pytest.approx(n / (n + 1), rel=0.02)


def test_prefactor_modes():
    dos = PhononDOS.single_mode(170.0)
    base = synthesize_spectrum(LineshapeParams(huang_rhys=1.0), dos)
    cross = synthesize_spectrum(LineshapeParams(huang_rhys=1.0, prefactor_mode="cross_section"), dos)
    cubed = synthesize_spectrum(LineshapeParams(huang_rhys=1.0, prefactor_mode="rate_cubed"), dos)
    np.testing.assert_allclose(cross.intensities, base.intensities * E0 / base.energies, rtol=1e-12)
    np.testing.assert_allclose(cubed.intensities, base.intensities * (base.energies / E0) ** 3, rtol=1e-12)


def test_amplitude_scales_intensity():
    dos = PhononDOS.single_mode(170.0)
    a = synthesize_spectrum(LineshapeParams(huang_rhys=1.0), dos)
    b = synthesize_spectrum(LineshapeParams(huang_rhys=1.0, amplitude=3.0), dos)
    np.testing.assert_allclose(b.intensities, 3 * a.intensities)


def test_acoustic_term_lowers_zpl_fraction():
    dos = PhononDOS.single_mode(170.0)
    plain = debye_waller_fraction(synthesize_spectrum(LineshapeParams(huang_rhys=1.0), dos), 5.0)
    acoustic = debye_waller_fraction(
        synthesize_spectrum(LineshapeParams(huang_rhys=1.0, acoustic_s=0.5, acoustic_cutoff=10.0), dos), 5.0)
    assert acoustic < plain


def test_grid_validation():
    params = LineshapeParams(huang_rhys=1.0)
    dos = PhononDOS.single_mode(170.0)
    with pytest.raises(ConfigurationError):
        synthesize_spectrum(params, dos, time_step=0.01)
    with pytest.raises(ConfigurationError):
        synthesize_spectrum(params, dos, time_span=1.0)


def test_params_validation_and_required_coupling():
    with pytest.raises(ConfigurationError):
        LineshapeParams(huang_rhys=1.0, zpl_fwhm=0.0)
    with pytest.raises(ConfigurationError):
        LineshapeParams(huang_rhys=-1.0)
    with pytest.raises(ConfigurationError):
        LineshapeParams(huang_rhys=1.0, prefactor_mode="bogus")
    with pytest.raises(ConfigurationError):
        LineshapeParams.from_dict({"temperature": 3.6})
    p = LineshapeParams(huang_rhys=1.2, temperature=3.6)
    assert LineshapeParams.from_dict(p.to_dict()) == p


def test_spectrum_nonnegative_and_sidecar_roundtrip(tmp_path):
    spec = single_mode_spectrum(1.0)
    assert np.all(spec.intensities >= 0)
    spec.to_csv(tmp_path / "s.csv")
    back = Spectrum.from_csv(tmp_path / "s.csv")
    assert back.params["huang_rhys"] == 1.0
    np.testing.assert_allclose(back.intensities, spec.intensities, rtol=1e-11, atol=1e-12 * spec.intensities.max())


def test_debye_waller_window_checks():
    spec = single_mode_spectrum(1.0)
    with pytest.raises(ConfigurationError):
        debye_waller_fraction(spec, 1.0)
    with pytest.raises(ConfigurationError):
        debye_waller_fraction(spec, 5000.0)


def test_band_weights_examples():
    spec = single_mode_spectrum(1.0)
    assert band_weights(spec, [(spec.energies[0], spec.energies[-1])]) == [pytest.approx(1.0)]
    w0, w1 = band_weights(spec, [(E0 - 0.085, E0 + 0.085), (E0 - 0.255, E0 - 0.085)])
    assert w0 == pytest.approx(math.exp(-1), abs=2e-3) and w1 == pytest.approx(math.exp(-1), abs=2e-3)
    flat = synthesize_spectrum(LineshapeParams(huang_rhys=0.0), PhononDOS.single_mode(170.0))
    assert band_weights(flat, [(E0 - 0.2, E0 - 0.1)])[0] < 2e-3  # Lorentzian tail mass only


def test_band_weights_errors():
    spec = single_mode_spectrum(1.0)
    with pytest.raises(ConfigurationError):
        band_weights(spec, [(2.0, 2.1), (2.05, 2.2)])
    with pytest.raises(ConfigurationError):
        band_weights(spec, [(0.1, 0.2)])
    with pytest.raises(ConfigurationError):
        band_weights(spec, [(2.1, 2.0)])


def test_bundled_dos_replica_positions():
    from vibronic.pipeline import resolve_data_path

    dos = reweight_dos(PhononDOS.from_csv(resolve_data_path("builtin:hbn_model_dos.csv")),
                       ReweightSpec.from_json(resolve_data_path("builtin:hbn_reweight.json")))
    spec = synthesize_spectrum(LineshapeParams(huang_rhys=1.0, temperature=3.6), dos)
    red = (E0 - spec.energies) * 1e3
    sel = (red > 150) & (red < 215)
    y, x = spec.intensities[sel], red[sel]
    peaks = x[1:-1][(y[1:-1] > y[:-2]) & (y[1:-1] > y[2:])]
    top3 = sorted(peaks[np.argsort(y[1:-1][(y[1:-1] > y[:-2]) & (y[1:-1] > y[2:])])[-3:]])
    np.testing.assert_allclose(top3, [166, 177, 200], atol=2.0)
