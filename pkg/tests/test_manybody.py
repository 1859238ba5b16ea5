import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vibrolase.errors import ValidationError
from vibrolase.expfit import ExponentialBathModel
from vibrolase.heom import HeomConfig, expectation, steady_state_direct
from vibrolase.manybody import (
    ClusterModel, EnsembleSpec, cavity_occupation, evolve_ensemble, incoherent_reference, trajectory,
)
from vibrolase.operators import PROJ_E
from vibrolase.oracle import OracleSpec, steady_state_exact
from vibrolase.spectral import CavityBathModel

VIB = ExponentialBathModel.from_terms([(0.05, 0.3 + 1.0j)])
CAV = CavityBathModel(0.3, 1.0)


def coherent(n, drive=0.5):
    return EnsembleSpec(n, drive, CAV, VIB, 0.02, "coherent")


def incoherent(n, pump=0.5):
    return EnsembleSpec(n, pump, CAV, gamma_down=0.02, mode="incoherent")


def test_single_emitter_is_exact_hierarchy():
    spec = coherent(1)
    cfg = HeomConfig(depth=3)
    state = evolve_ensemble(spec, cfg, verify=False)
    ref = steady_state_direct(spec.emitter_spec(), cfg)
    np.testing.assert_allclose(state.vector, ref.vector, atol=1e-10)


def test_single_emitter_matches_oracle():
    state = evolve_ensemble(coherent(1), HeomConfig(depth=4), verify=False)
    ref = steady_state_exact(OracleSpec(1, 0.5, "coherent", VIB, (4,), g_cav=0.3, kappa=1.0,
                                        cavity_cutoff=4, gamma_down=0.02)).observables
    obs = state.observables()
    assert obs.p_e == pytest.approx(ref.p_e, rel=1e-5)
    assert obs.cavity_occupation == pytest.approx(ref.cavity_occupation, rel=1e-4)


def test_two_emitters_with_full_pair_block_match_oracle():
    state = evolve_ensemble(incoherent(2), HeomConfig(depth=4), pair_depth=2, verify=False)
    ref = steady_state_exact(OracleSpec(2, 0.5, "incoherent", g_cav=0.3, kappa=1.0, cavity_cutoff=6,
                                        gamma_down=0.02)).observables
    obs = state.observables()
    assert obs.p_e == pytest.approx(ref.p_e, rel=1e-5)
    assert obs.cavity_occupation == pytest.approx(ref.cavity_occupation, rel=1e-4)
    assert obs.pair_coherence.real == pytest.approx(ref.pair_coherence.real, rel=1e-4)


def test_newton_and_propagation_agree():
    cfg = HeomConfig(depth=2)
    a = evolve_ensemble(coherent(3), cfg, method="newton")
    b = evolve_ensemble(coherent(3), cfg, method="propagate")
    assert a.converged and b.converged
    assert a.observables().p_e == pytest.approx(b.observables().p_e, abs=1e-5)
    assert a.observables().cavity_occupation == pytest.approx(b.observables().cavity_occupation, rel=1e-3)


@pytest.mark.parametrize("n", [2, 7, 1000])
def test_state_size_is_independent_of_n(n):
    ref = ClusterModel(coherent(2), depth=2).state_size
    assert ClusterModel(coherent(n), depth=2).state_size == ref


def test_meanfield_has_no_pair_block():
    m = ClusterModel(coherent(5), depth=2, closure="meanfield")
    assert not m.has_pair and m.state_size == m.d
    s = evolve_ensemble(coherent(5), HeomConfig(depth=2), closure="meanfield", verify=False)
    assert s.pair_block is None
    # uncorrelated emitters: <sigma_+ sigma_-'> factorises into |<sigma_->|^2
    coherence = s.one_body.rho[1, 0]
    assert s.observables().pair_coherence == pytest.approx(abs(coherence) ** 2, abs=1e-15)


def test_uncoupled_cavity_stays_empty():
    spec = EnsembleSpec(4, 0.5, CavityBathModel(0.0, 1.0), VIB, 0.02, "coherent")
    s = evolve_ensemble(spec, HeomConfig(depth=2), verify=False)
    assert s.observables().cavity_occupation == pytest.approx(0.0, abs=1e-14)
    single = steady_state_direct(spec.with_(n_emitters=1).emitter_spec(), HeomConfig(depth=2))
    assert s.observables().p_e == pytest.approx(expectation(single, PROJ_E).real, abs=1e-10)


def test_unpumped_ensemble_stays_in_ground_state():
    obs = incoherent_reference(incoherent(6, pump=0.0), HeomConfig(depth=2))
    assert obs.p_e == pytest.approx(0.0, abs=1e-14)
    assert obs.cavity_occupation == pytest.approx(0.0, abs=1e-14)


def test_pair_block_is_exchange_symmetric():
    s = evolve_ensemble(coherent(4), HeomConfig(depth=2), verify=False)
    c = s.pair_block
    np.testing.assert_allclose(c, c.T, atol=1e-12)


def test_estimators_agree_in_the_bad_cavity_limit():
    spec = EnsembleSpec(1, 0.02, CavityBathModel(0.3, 50.0), VIB, 0.02, "coherent")
    s = evolve_ensemble(spec, HeomConfig(depth=3), verify=False)
    assert cavity_occupation(s, estimator="input-output") == pytest.approx(cavity_occupation(s), rel=1e-4)
    with pytest.raises(ValidationError):
        cavity_occupation(s, coherent(1))
    with pytest.raises(ValidationError):
        cavity_occupation(s, estimator="guess")


def test_trajectory_csv(tmp_path):
    res = trajectory(coherent(3), HeomConfig(depth=2), 5.0, n_samples=6)
    res.write_csv(tmp_path / "t.csv")
    data = np.loadtxt(tmp_path / "t.csv", delimiter=",", skiprows=1)
    assert data.shape == (6, 5)
    assert data[0, 1] == 0.0 and data[-1, 1] > 0


def test_spec_json_round_trip():
    spec = coherent(7, 0.25)
    back = EnsembleSpec.from_json(spec.to_json())
    assert back.to_dict() == spec.to_dict()


def test_validation():
    with pytest.raises(ValidationError):
        EnsembleSpec(0, 0.1, CAV)
    with pytest.raises(ValidationError):
        EnsembleSpec(2, 0.1, CAV, mode="pulsed")
    with pytest.raises(ValidationError):
        EnsembleSpec(2, -0.1, CAV, mode="incoherent")
    with pytest.raises(ValidationError):
        ClusterModel(coherent(2), depth=1, pair_depth=2)
    with pytest.raises(ValidationError):
        incoherent_reference(coherent(2), HeomConfig(depth=2))


@settings(max_examples=10)
@given(st.floats(0.0, 1.0), st.integers(2, 50))
def test_closed_state_is_physical(drive, n):
    s = evolve_ensemble(coherent(n, drive), HeomConfig(depth=2), verify=False)
    rho = s.one_body.rho
    assert abs(np.trace(rho) - 1) <= 1e-8
    assert np.linalg.eigvalsh(rho).min() >= -1e-6
    assert s.observables().cavity_occupation >= 0
