import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from vibrolase.errors import CapacityError, ValidationError
from vibrolase.expfit import ExponentialBathModel
from vibrolase.heom import (
    HeomConfig, HeomState, SteadyStateCriterion, SystemSpec, bath_occupation, build_hierarchy,
    count_ados, enumerate_indices, expectation, propagate, select_depth, steady_state,
    steady_state_direct,
)
from vibrolase.operators import PROJ_E, SIGMA_MINUS, SIGMA_X, SIGMA_Z
from vibrolase.oracle import OracleModel, OracleSpec, ground_state, propagate_exact, steady_state_exact

TIGHT = HeomConfig(depth=6, rtol=1e-11, atol=1e-13)


def driven(drive=0.3, gamma=0.01, bath=None):
    baths = ((PROJ_E, bath),) if bath is not None else ()
    return SystemSpec(drive * SIGMA_X, baths, ((SIGMA_MINUS, gamma),))


@pytest.mark.parametrize("dirs,depth,expected", [(1, 2, 3), (5, 3, 56), (0, 4, 1)])
def test_ado_count_examples(dirs, depth, expected):
    assert count_ados(dirs, depth) == expected
    assert enumerate_indices(dirs, depth).shape == (expected, dirs)


@given(st.integers(0, 6), st.integers(1, 4))
def test_index_set_is_complete(dirs, depth):
    idx = enumerate_indices(dirs, depth)
    assert idx.shape[0] == math.comb(dirs + depth, depth)
    assert len({tuple(r) for r in idx.tolist()}) == idx.shape[0]
    assert np.all(idx.sum(axis=1) <= depth) and np.all(idx >= 0)


def test_no_bath_is_single_ado():
    state = build_hierarchy(driven(), HeomConfig(depth=3))
    assert state.hierarchy.n_ados == 1


def test_each_exponential_term_opens_two_directions():
    bath = ExponentialBathModel.from_terms([(0.1, 0.5 + 1j)])
    state = build_hierarchy(driven(bath=bath), HeomConfig(depth=2))
    assert state.hierarchy.n_ados == count_ados(2, 2)


def test_decay_spectrum_of_dissipator():
    gamma = 0.37
    spec = SystemSpec(np.zeros((2, 2)), (), ((SIGMA_MINUS, gamma),))
    ev = np.sort(np.linalg.eigvals(spec.system_liouvillian().toarray()).real)
    np.testing.assert_allclose(ev, [-2 * gamma, -gamma, -gamma, 0.0], atol=1e-14)


def test_spontaneous_decay_matches_oracle():
    gamma = 0.05
    spec = SystemSpec(np.zeros((2, 2)), (), ((SIGMA_MINUS, gamma),))
    cfg = HeomConfig(depth=1, rtol=1e-11, atol=1e-13)
    excited = np.diag([0.0, 1.0]).astype(complex)
    _, traj = propagate(build_hierarchy(spec, cfg, excited), spec, cfg, 20.0, {"pe": PROJ_E}, 41)
    osp = OracleSpec(1, 0.0, "coherent", gamma_down=gamma)
    ref = propagate_exact(osp, excited, traj.times, {"pe": PROJ_E})["pe"]
    np.testing.assert_allclose(traj.values[:, 0].real, ref.real, atol=1e-9)
    np.testing.assert_allclose(ref.real, np.exp(-2 * gamma * traj.times), atol=1e-9)


def test_pseudomode_equivalence():
    bath = ExponentialBathModel.from_terms([(0.1, 0.5 + 1j)])
    spec = driven(bath=bath)
    T = 5 / 0.5
    _, traj = propagate(build_hierarchy(spec, TIGHT), spec, TIGHT, T, {"sz": SIGMA_Z}, 201)
    osp = OracleSpec(1, 0.3, "coherent", bath, (6,), gamma_down=0.01)
    m = OracleModel(osp)
    sz = 2 * m.proj_e[0] - sp.identity(osp.hilbert_dim)
    ref = propagate_exact(osp, ground_state(osp), traj.times, {"sz": sz})["sz"]
    assert np.max(np.abs(traj.values[:, 0] - ref)) <= 1e-6
    assert traj.max_trace_error <= 1e-8


def test_bloch_steady_state():
    drive, gamma = 0.2, 0.05
    res = steady_state_direct(driven(drive, gamma), HeomConfig(depth=1))
    s = 2 * drive**2 / gamma**2
    assert expectation(res, PROJ_E).real == pytest.approx(s / (2 * (1 + s)), abs=1e-12)


def test_undriven_ground_state_is_stationary():
    bath = ExponentialBathModel.from_terms([(0.1, 0.5 + 1j)])
    spec = driven(drive=0.0, bath=bath)
    end, traj = propagate(build_hierarchy(spec, TIGHT), spec, TIGHT, 30.0, {"pe": PROJ_E}, 31)
    assert np.max(np.abs(traj.values)) < 1e-14
    assert np.max(np.abs(end.vector[4:])) < 1e-14


def test_vanishing_bath_reduces_to_gksl():
    tiny = ExponentialBathModel.from_terms([(1e-14, 0.5 + 1j)])
    a = steady_state_direct(driven(bath=tiny), HeomConfig(depth=2))
    b = steady_state_direct(driven(), HeomConfig(depth=1))
    np.testing.assert_allclose(a.rho, b.rho, atol=1e-10)


def test_steady_state_and_bath_occupation_match_oracle():
    bath = ExponentialBathModel.from_terms([(0.1, 0.5 + 1j)])
    spec = driven(bath=bath)
    state = steady_state_direct(spec, TIGHT)
    osp = OracleSpec(1, 0.3, "coherent", bath, (6,), gamma_down=0.01)
    ref = steady_state_exact(osp)
    assert expectation(state, PROJ_E).real == pytest.approx(ref.observables.p_e, abs=1e-7)
    assert bath_occupation(state).real == pytest.approx(OracleModel(osp).bath_occupation(ref.rho), abs=1e-7)


def test_direct_and_propagated_steady_states_agree():
    spec = driven(0.2, 0.05)
    cfg = HeomConfig(depth=1, rtol=1e-11, atol=1e-13)
    crit = SteadyStateCriterion({"pe": PROJ_E}, window=20.0, tol=1e-9)
    a = steady_state(spec, cfg, crit, method="direct")
    b = steady_state(spec, cfg, crit, method="propagate")
    assert a.converged and b.converged
    assert expectation(a.state, PROJ_E) == pytest.approx(expectation(b.state, PROJ_E), abs=1e-8)


def test_propagation_is_deterministic():
    bath = ExponentialBathModel.from_terms([(0.1, 0.5 + 1j)])
    spec = driven(bath=bath)
    cfg = HeomConfig(depth=3)
    a = propagate(build_hierarchy(spec, cfg), spec, cfg, 5.0)
    b = propagate(build_hierarchy(spec, cfg), spec, cfg, 5.0)
    np.testing.assert_array_equal(a.vector, b.vector)


def test_errors():
    spec = driven()
    cfg = HeomConfig(depth=1)
    state = propagate(build_hierarchy(spec, cfg), spec, cfg, 1.0)
    with pytest.raises(ValidationError):
        propagate(state, spec, cfg, 0.5)
    with pytest.raises(ValidationError):
        expectation(state, np.eye(3))
    with pytest.raises(ValidationError):
        HeomConfig(depth=0)
    bath = ExponentialBathModel.from_terms([(0.1, 0.5 + 1j)] * 5)
    with pytest.raises(CapacityError) as exc:
        build_hierarchy(driven(bath=bath), HeomConfig(depth=8, budget=10_000))
    assert exc.value.size > 10_000


def test_checkpoint_round_trip(tmp_path):
    bath = ExponentialBathModel.from_terms([(0.1, 0.5 + 1j)])
    spec = driven(bath=bath)
    cfg = HeomConfig(depth=3)
    state = propagate(build_hierarchy(spec, cfg), spec, cfg, 2.0)
    state.save(tmp_path / "ck.npz")
    back = HeomState.load(tmp_path / "ck.npz", spec)
    np.testing.assert_array_equal(back.vector, state.vector)
    assert back.time == 2.0
    a = propagate(state, spec, cfg, 4.0)
    b = propagate(back, spec, cfg, 4.0)
    np.testing.assert_array_equal(a.vector, b.vector)
    with pytest.raises(ValidationError):
        HeomState.load(tmp_path / "ck.npz", driven(bath=ExponentialBathModel.from_terms([(0.1, 1.0)] * 2)))


def test_select_depth_converges():
    bath = ExponentialBathModel.from_terms([(0.05, 0.5 + 1j)])
    depth, history = select_depth(driven(bath=bath), {"pe": PROJ_E}, tol=1e-6)
    assert 1 <= depth < max(history)
    assert abs(history[depth + 1][0] - history[depth][0]) < 1e-6


@given(st.floats(0.0, 1.0), st.floats(0.001, 0.2), st.floats(0.01, 0.3), st.floats(0.1, 2.0))
def test_trace_preserved_property(drive, gamma, g, w):
    bath = ExponentialBathModel.from_terms([(g, w + 0.5j)])
    spec = driven(drive, gamma, bath)
    cfg = HeomConfig(depth=3)
    _, traj = propagate(build_hierarchy(spec, cfg), spec, cfg, 10.0, {"pe": PROJ_E}, 11)
    assert traj.max_trace_error <= 1e-8
