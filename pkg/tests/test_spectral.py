import numpy as np
import pytest
from hypothesis import given, strategies as st

from vibrolase.errors import NumericError, ValidationError
from vibrolase.spectral import (
    BathCorrelationSamples,
    CavityBathModel,
    SpectralDensity,
    bath_correlation,
    cavity_bcf,
    default_grid,
    default_tau_grid,
    effective_density,
)
from vibrolase.vibdata import MoleculeSpec, OhmicEnvironment, VibrationalMode


def molecule(rows):
    return MoleculeSpec(0.0, tuple(VibrationalMode(w, s) for w, s in rows))


def lorentzian(centre, width, hi, n=40001):
    def func(w):
        w = np.asarray(w, dtype=float)
        return (width / np.pi) / ((w - centre) ** 2 + width**2)

    grid = np.linspace(0.0, hi, n)
    return SpectralDensity(grid, func(grid), func, 1.0)


def test_single_mode_weight():
    # frequency 1 in units of 1000 cm^-1: weight w^2 S / 2 = 0.25
    spec = molecule([(1000.0, 0.5)])
    env = OhmicEnvironment(0.02, 4000.0)
    J = effective_density(spec, env, default_grid(spec, env, unit_cm=1000.0), unit_cm=1000.0)
    assert J.integral() == pytest.approx(0.25, rel=1e-6)


def test_narrow_limit_weights_per_peak():
    rows = [(800.0, 0.3), (1500.0, 0.1), (2600.0, 0.05)]
    spec = molecule(rows)
    env = OhmicEnvironment(1e-4, 4000.0)
    J = effective_density(spec, env, default_grid(spec, env, unit_cm=1000.0), unit_cm=1000.0)
    edges = [0.0, 1.15, 2.05, J.grid[-1]]
    for (w, s), lo, hi in zip(rows, edges[:-1], edges[1:]):
        sel = (J.grid >= lo) & (J.grid <= hi)
        weight = np.trapezoid(J.values[sel], J.grid[sel])
        assert weight == pytest.approx((w / 1000.0) ** 2 * s / 2, rel=0.01)


def test_total_weight_invariant_under_broadening():
    spec = molecule([(600.0, 0.2), (1300.0, 0.1), (1900.0, 0.05)])
    totals = []
    for eta in (0.005, 0.015, 0.03):
        env = OhmicEnvironment(eta, 4000.0)
        J = effective_density(spec, env, default_grid(spec, env, unit_cm=1000.0), unit_cm=1000.0)
        totals.append(J.integral())
    assert np.ptp(totals) <= 0.01 * totals[0]


def test_peaks_at_mode_frequencies():
    spec = molecule([(600.0, 0.2), (1300.0, 0.1)])
    env = OhmicEnvironment(0.01, 4000.0)
    J = effective_density(spec, env, default_grid(spec, env, unit_cm=1000.0), unit_cm=1000.0)
    np.testing.assert_allclose(J.peaks(), [0.6, 1.3], atol=2 * (J.grid[1] - J.grid[0]))


def test_grid_too_narrow():
    spec = molecule([(1000.0, 0.5)])
    env = OhmicEnvironment(0.02, 4000.0)
    with pytest.raises(ValidationError):
        effective_density(spec, env, np.linspace(0, 1.05, 100), unit_cm=1000.0)
    with pytest.raises(ValidationError):
        effective_density(spec, env, np.linspace(1.1, 3.0, 100), unit_cm=1000.0)


def test_spectral_density_invariants():
    with pytest.raises(ValidationError):
        SpectralDensity(np.array([0.0, 1.0, 0.5]), np.zeros(3))
    with pytest.raises(ValidationError):
        SpectralDensity(np.linspace(0, 1, 3), np.array([0.0, -1.0, 0.0]))


def test_lorentzian_bcf_matches_analytic_pair():
    centre, width, hi = 2.0, 0.05, 12.0
    J = lorentzian(centre, width, hi)
    missing = 1.0 - (np.arctan((hi - centre) / width) + np.arctan(centre / width)) / np.pi
    tau = np.linspace(0.0, 60.0, 601)
    s = bath_correlation(J, tau)
    exact = np.exp(-(1j * centre + width) * tau)
    # |int_outside J exp(-i w t)| <= weight outside [0, hi]
    assert np.max(np.abs(s.alpha - exact)) <= missing + 1e-6
    assert missing < 0.01


def test_zero_density():
    grid = np.linspace(0.0, 5.0, 101)
    s = bath_correlation(SpectralDensity(grid, np.zeros_like(grid)), np.linspace(0, 10, 11))
    assert np.all(s.alpha == 0)


def test_alpha_zero_is_total_weight(shipped_bath):
    s, J = shipped_bath.samples, shipped_bath.density
    assert abs(s.alpha[0].imag) < 1e-6 * J.integral()
    assert s.alpha[0].real == pytest.approx(J.integral(), rel=1e-6)


def test_bcf_bounded_by_zero_time_value(shipped_bath):
    s = shipped_bath.samples
    assert np.all(np.abs(s.alpha) <= s.alpha[0].real * (1 + 1e-9))


def test_quadrature_converged_under_refinement():
    J = lorentzian(1.3, 0.03, 4.0, n=8001)
    tau = np.linspace(0, 100, 257)
    a = bath_correlation(J, tau).alpha
    b = bath_correlation(J.refined(2), tau).alpha
    assert np.max(np.abs(a - b)) / abs(a[0]) < 1e-6


def test_unconverged_tabulated_quadrature_raises():
    grid = np.linspace(0.0, 4.0, 41)
    J = SpectralDensity(grid, 0.03 / np.pi / ((grid - 1.3) ** 2 + 0.03**2))
    with pytest.raises(NumericError):
        bath_correlation(J, np.linspace(0, 50, 20))


def test_tau_grid_must_start_at_zero():
    J = lorentzian(1.0, 0.1, 5.0, n=2001)
    with pytest.raises(ValidationError):
        bath_correlation(J, np.linspace(1.0, 2.0, 5))


def test_default_tau_grid_covers_decay_and_resolves_period():
    J = lorentzian(1.0, 0.1, 5.0, n=4001)
    tau = default_tau_grid(J)
    s = bath_correlation(J, tau)
    assert np.max(np.abs(s.alpha[int(0.9 * tau.size):])) < 1e-4 * s.alpha[0].real
    assert tau[1] - tau[0] <= 2 * np.pi / (20 * 1.0) + 1e-12


def test_samples_hermitian_extension():
    s = BathCorrelationSamples(np.array([0.0, 1.0]), np.array([1.0, 0.5 + 0.5j]))
    assert s.at(-1.0) == pytest.approx(0.5 - 0.5j)


@pytest.mark.parametrize("g,omega,kappa,tau,expected", [
    (0.7, 0.3, 1.1, 0.0, 0.49),
    (0.0, 0.3, 1.1, 2.0, 0.0),
    (1.0, 0.0, 1.0, 1.0, np.exp(-1.0)),
])
def test_cavity_bcf_examples(g, omega, kappa, tau, expected):
    assert cavity_bcf(CavityBathModel(g, kappa, omega), tau) == pytest.approx(expected, abs=1e-15)


def test_cavity_bcf_validation():
    with pytest.raises(ValidationError):
        CavityBathModel(0.1, 0.0)
    with pytest.raises(ValidationError):
        cavity_bcf(CavityBathModel(0.1, 1.0), -1.0)


def test_cavity_as_exponential():
    cav = CavityBathModel(0.2, 3.3, 0.4)
    tau = np.linspace(0, 3, 7)
    np.testing.assert_allclose(cav.as_exponential()(tau), cavity_bcf(cav, tau), rtol=1e-14)


def test_csv_export(tmp_path, shipped_bath):
    shipped_bath.density.write_csv(tmp_path / "spectrum.csv")
    shipped_bath.samples.write_csv(tmp_path / "bcf.csv")
    spec = np.loadtxt(tmp_path / "spectrum.csv", delimiter=",", skiprows=1)
    bcf = np.loadtxt(tmp_path / "bcf.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(spec[:, 1], shipped_bath.density.values)
    np.testing.assert_array_equal(bcf[:, 1] + 1j * bcf[:, 2], shipped_bath.samples.alpha)
    assert open(tmp_path / "bcf.csv").readline().strip() == "tau,re_alpha,im_alpha"


@given(st.lists(st.tuples(st.floats(200.0, 3000.0), st.floats(0.0, 0.5)), min_size=1, max_size=4))
def test_bcf_modulus_property(rows):
    spec = molecule(rows)
    env = OhmicEnvironment(0.02, 4000.0)
    J = effective_density(spec, env, default_grid(spec, env, unit_cm=1000.0), unit_cm=1000.0)
    if J.integral() == 0:
        return
    tau = np.linspace(0.0, 200.0, 101)
    s = bath_correlation(J, tau)
    assert np.all(np.abs(s.alpha) <= s.alpha[0].real * (1 + 1e-6))
