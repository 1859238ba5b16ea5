import numpy as np
import pytest

from vibrolase.errors import CapacityError, NumericError, ValidationError
from vibrolase.expfit import ExponentialBathModel
from vibrolase.operators import PROJ_E
from vibrolase.oracle import (
    OracleModel, OracleSpec, build_liouvillian, ground_state, load_golden, propagate_exact, save_golden,
    steady_state_exact,
)

BATH = ExponentialBathModel.from_terms([(0.05, 0.3 + 1.0j)])


def small_cavity(mode="coherent", n=2, drive=0.4, cutoff=2):
    vib = BATH if mode == "coherent" else ExponentialBathModel.empty()
    return OracleSpec(n, drive, mode, vib, (2,) if mode == "coherent" else (), g_cav=0.3, kappa=1.0,
                      cavity_cutoff=cutoff, gamma_down=0.02)


def test_liouvillian_preserves_trace():
    spec = small_cavity()
    gen = build_liouvillian(spec)
    dim = spec.hilbert_dim
    trace_row = np.eye(dim).reshape(-1)
    assert np.max(np.abs(gen.T @ trace_row)) < 1e-12


def test_zero_hamiltonian_zero_rates_is_zero_superoperator():
    spec = OracleSpec(2, 0.0, "coherent", cavity_cutoff=2)
    assert build_liouvillian(spec).count_nonzero() == 0


def test_jaynes_cummings_vacuum_rabi_period():
    g = 0.25
    spec = OracleSpec(1, 0.0, "coherent", g_cav=g, cavity_cutoff=3)
    rho0 = np.zeros((8, 8), dtype=complex)
    rho0[4, 4] = 1.0  # excited emitter, empty cavity
    pe = OracleModel(spec).proj_e[0]
    period = 2 * np.pi / (2 * g)
    t = np.linspace(0, period, 101)
    out = propagate_exact(spec, rho0, t, {"pe": pe})["pe"].real
    np.testing.assert_allclose(out, np.cos(g * t) ** 2, atol=1e-8)
    assert out[-1] == pytest.approx(1.0, abs=1e-8)


def test_driven_two_level_steady_state():
    drive, gamma = 0.2, 0.05
    res = steady_state_exact(OracleSpec(1, drive, "coherent", gamma_down=gamma))
    s = 2 * drive**2 / gamma**2
    assert res.observables.p_e == pytest.approx(s / (2 * (1 + s)), abs=1e-12)
    assert res.residual < 1e-10


def test_incoherent_pump_two_level_steady_state():
    pump, gamma = 0.3, 0.1
    res = steady_state_exact(OracleSpec(1, pump, "incoherent", gamma_down=gamma))
    assert res.observables.p_e == pytest.approx(pump / (pump + gamma), abs=1e-12)


def test_degenerate_kernel_is_reported():
    with pytest.raises(NumericError, match="degenerate"):
        steady_state_exact(OracleSpec(1, 0.0, "coherent", g_cav=0.2, cavity_cutoff=2))


def test_capacity_error_carries_size():
    with pytest.raises(CapacityError) as exc:
        OracleSpec(3, 0.1, "coherent", BATH, (8,), cavity_cutoff=10)
    assert exc.value.size == (2 * 9) ** 3 * 11


def test_spec_validation():
    with pytest.raises(ValidationError):
        OracleSpec(4)
    with pytest.raises(ValidationError):
        OracleSpec(1, mode="pulsed")
    with pytest.raises(ValidationError):
        OracleSpec(1, vib_bath=ExponentialBathModel.from_terms([(0.1j, 1.0)]), pseudomode_cutoffs=(3,))
    with pytest.raises(ValidationError):
        OracleSpec(1, -0.1, "incoherent")


@pytest.mark.parametrize("mode", ["coherent", "incoherent"])
def test_krylov_matches_direct(mode):
    spec = small_cavity(mode)
    lu = steady_state_exact(spec, lu_limit=10**6)
    kr = steady_state_exact(spec, lu_limit=0)
    assert lu.method == "inverse-iteration" and kr.method == "preconditioned-gmres"
    np.testing.assert_allclose(kr.rho, lu.rho, atol=1e-9)
    assert kr.residual < 1e-9


def test_steady_state_is_a_density_matrix():
    res = steady_state_exact(small_cavity())
    rho = res.rho
    assert np.trace(rho) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(rho, rho.conj().T, atol=1e-14)
    assert np.linalg.eigvalsh(rho).min() > -1e-10


def test_pair_coherence_is_exchange_symmetric():
    res = steady_state_exact(small_cavity())
    m = OracleModel(small_cavity())
    swapped = m.sigma_minus[1].getH() @ m.sigma_minus[0]
    other = complex(np.sum(swapped.T.multiply(res.rho)))
    assert other == pytest.approx(np.conj(res.observables.pair_coherence), abs=1e-10)


def test_cavity_cutoff_convergence():
    weak = [steady_state_exact(small_cavity("incoherent", drive=0.1, cutoff=c)).observables.cavity_occupation
            for c in (6, 8)]
    assert abs(weak[1] - weak[0]) < 1e-4 * weak[1]


def test_propagation_reaches_steady_state():
    spec = OracleSpec(1, 0.2, "coherent", gamma_down=0.05)
    t = np.linspace(0, 400, 5)
    pe = propagate_exact(spec, ground_state(spec), t, {"pe": PROJ_E})["pe"].real
    assert pe[-1] == pytest.approx(steady_state_exact(spec).observables.p_e, abs=1e-9)


def test_golden_round_trip(tmp_path):
    spec = small_cavity("incoherent")
    res = steady_state_exact(spec)
    save_golden(tmp_path / "g.json", spec, res, label="unit")
    back_spec, back = load_golden(tmp_path / "g.json")
    assert back_spec.to_dict() == spec.to_dict()
    assert back["observables"]["p_e"] == res.observables.p_e
    again = steady_state_exact(back_spec)
    assert again.observables.cavity_occupation == pytest.approx(back["observables"]["cavity_occupation"], rel=1e-10)
