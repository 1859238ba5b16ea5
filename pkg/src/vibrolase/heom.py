"""Hierarchical equations of motion for exponential baths.

A system couples to each bath through ``Q (x) B^dag + Q^dag (x) B`` with a
zero-temperature correlation function <B(t) B^dag(0)> = sum_k G_k exp(-W_k t).
Every exponential term opens two hierarchy directions:

  ``+``: decay rate W,  raising operator Q^dag, lowering action  G  Q rho
  ``-``: decay rate W*, raising operator Q,     lowering action -G* rho Q^dag

and the auxiliary density operators (ADOs) obey

  d/dt rho_n = L_sys rho_n - sum_j n_j w_j rho_n
               - i sum_j sqrt((n_j + 1) s_j) [A_j, rho_{n+e_j}]
               - i sum_j sqrt(n_j / s_j) c_j(rho_{n-e_j}),

with the scale s_j = |G_j| keeping all ADOs of order one.  A Hermitian ``Q``
describes a bath coupled as Q (x) (B + B^dag) (e.g. a displaced vibration);
``Q = sigma_-`` describes a lossy cavity mode seen as a bath.  For a real
positive G the ADOs are moments of an explicit damped mode b:
rho_(p,q) = G^((p+q)/2) Tr_b[b^p rho b^dag^q] / sqrt(p! q! s^(p+q)).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import solve_ivp

from .errors import CapacityError, ConvergenceError, IntegrityError, NumericError, ValidationError
from .expfit import ExponentialBathModel
from .operators import dag, liouvillian, spost, spre

#: default ceiling on the number of complex numbers in a hierarchy
DEFAULT_BUDGET = 20_000_000


@dataclass(frozen=True, eq=False)
class SystemSpec:
    """Hamiltonian, exponential baths and GKSL terms of one open system.

    ``bath_couplings`` is a sequence of ``(Q, model)``; ``lindblad_terms`` a
    sequence of ``(L, rate)`` entering as ``rate * D[L]``.
    """

    hamiltonian: np.ndarray
    bath_couplings: tuple = ()
    lindblad_terms: tuple = ()

    def __post_init__(self):
        h = np.asarray(self.hamiltonian, dtype=complex)
        if h.ndim != 2 or h.shape[0] != h.shape[1]:
            raise ValidationError("hamiltonian must be a square matrix")
        if not np.allclose(h, dag(h), atol=1e-12, rtol=0):
            raise ValidationError("hamiltonian must be Hermitian to 1e-12")
        baths = []
        for op, model in self.bath_couplings:
            op = np.asarray(op, dtype=complex)
            if op.shape != h.shape:
                raise ValidationError("bath coupling operator has the wrong shape")
            if not isinstance(model, ExponentialBathModel):
                raise ValidationError("bath models must be ExponentialBathModel instances")
            baths.append((op, model))
        terms = []
        for op, rate in self.lindblad_terms:
            op = np.asarray(op, dtype=complex)
            if op.shape != h.shape:
                raise ValidationError("Lindblad operator has the wrong shape")
            if not rate >= 0:
                raise ValidationError(f"Lindblad rates must be non-negative, got {rate}")
            terms.append((op, float(rate)))
        object.__setattr__(self, "hamiltonian", h)
        object.__setattr__(self, "bath_couplings", tuple(baths))
        object.__setattr__(self, "lindblad_terms", tuple(terms))

    @property
    def dim(self) -> int:
        return self.hamiltonian.shape[0]

    def system_liouvillian(self):
        return liouvillian(self.hamiltonian, self.lindblad_terms)


@dataclass
class HeomConfig:
    depth: int = 3
    method: str = "DOP853"
    rtol: float = 1e-8
    atol: float = 1e-10
    max_time: float = 1e4
    budget: int = DEFAULT_BUDGET
    trace_tol: float = 1e-8
    positivity_tol: float = 1e-6

    def __post_init__(self):
        if self.depth < 1:
            raise ValidationError("hierarchy depth must be at least 1")


@dataclass(frozen=True)
class Direction:
    """One hierarchy direction (bath ``bath``, exponential term ``term``, sign)."""

    bath: int
    term: int
    sign: int
    rate: complex
    amplitude: complex
    scale: float
    raise_op: np.ndarray = field(repr=False)
    lower: object = field(repr=False)  # sparse superoperator


def directions_for(spec: SystemSpec) -> list[Direction]:
    out = []
    for b, (q, model) in enumerate(spec.bath_couplings):
        for k, (g, w) in enumerate(model.terms):
            s = abs(g) if g != 0 else 1.0
            out.append(Direction(b, k, +1, w, g, s, dag(q), g * spre(q)))
            out.append(Direction(b, k, -1, np.conj(w), g, s, q, -np.conj(g) * spost(dag(q))))
    return out


def enumerate_indices(n_dirs: int, depth: int) -> np.ndarray:
    """All multi-indices of total order <= depth, by order then lexicographic."""
    rows = [np.zeros(n_dirs, dtype=np.int16)]
    for order in range(1, depth + 1):
        for combo in itertools.combinations_with_replacement(range(n_dirs), order):
            n = np.zeros(n_dirs, dtype=np.int16)
            for c in combo:
                n[c] += 1
            rows.append(n)
    return np.array(rows, dtype=np.int16).reshape(len(rows), n_dirs)


def count_ados(n_dirs: int, depth: int) -> int:
    return math.comb(n_dirs + depth, depth)


class Hierarchy:
    """ADO index set and sparse generator for one system."""

    def __init__(self, spec: SystemSpec, depth: int, budget: int = DEFAULT_BUDGET):
        self.spec = spec
        self.depth = depth
        self.directions = directions_for(spec)
        nd = len(self.directions)
        count = count_ados(nd, depth)
        size = count * spec.dim**2
        if size > budget:
            raise CapacityError(
                f"{count} ADOs x {spec.dim**2} = {size} amplitudes exceeds the budget of {budget}", size
            )
        self.indices = enumerate_indices(nd, depth)
        self.lookup = {tuple(n): i for i, n in enumerate(self.indices.tolist())}
        self.d2 = spec.dim**2
        self._generator = None

    @property
    def n_ados(self) -> int:
        return self.indices.shape[0]

    @property
    def size(self) -> int:
        return self.n_ados * self.d2

    def index_of(self, n) -> int:
        return self.lookup[tuple(int(x) for x in n)]

    def orders(self) -> np.ndarray:
        return self.indices.sum(axis=1)

    def raise_map(self, j: int):
        """ADO-space matrix U with U[m, k] = sqrt((n_j + 1) s_j) for ADO k = m + e_j."""
        s = self.directions[j].scale
        rows, cols, vals = [], [], []
        for m, n in enumerate(self.indices):
            up = n.copy()
            up[j] += 1
            k = self.lookup.get(tuple(up.tolist()))
            if k is not None:
                rows.append(m)
                cols.append(k)
                vals.append(math.sqrt((n[j] + 1) * s))
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n_ados, self.n_ados), dtype=complex)

    def lower_map(self, j: int):
        """ADO-space matrix with entry sqrt(n_j / s_j) from ADO n - e_j to ADO n."""
        s = self.directions[j].scale
        rows, cols, vals = [], [], []
        for m, n in enumerate(self.indices):
            if n[j] == 0:
                continue
            down = n.copy()
            down[j] -= 1
            rows.append(m)
            cols.append(self.lookup[tuple(down.tolist())])
            vals.append(math.sqrt(n[j] / s))
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n_ados, self.n_ados), dtype=complex)

    def damping(self) -> np.ndarray:
        rates = np.array([d.rate for d in self.directions], dtype=complex)
        return self.indices.astype(float) @ rates if rates.size else np.zeros(self.n_ados, complex)

    def build_generator(self):
        eye = sp.identity(self.n_ados, dtype=complex, format="csr")
        gen = sp.kron(eye, self.spec.system_liouvillian(), format="csr")
        gen = gen - sp.kron(sp.diags(self.damping()), sp.identity(self.d2, dtype=complex), format="csr")
        for j, d in enumerate(self.directions):
            comm = spre(d.raise_op) - spost(d.raise_op)
            gen = gen + sp.kron(-1j * self.raise_map(j), comm, format="csr")
            gen = gen + sp.kron(-1j * self.lower_map(j), d.lower, format="csr")
        gen = gen.tocsr()
        gen.eliminate_zeros()
        return gen

    @property
    def generator(self):
        if self._generator is None:
            self._generator = self.build_generator()
        return self._generator

    def trace_functional(self) -> np.ndarray:
        """Row vector giving Tr rho_0 of a hierarchy vector."""
        ell = np.zeros(self.size, dtype=complex)
        dim = self.spec.dim
        ell[np.arange(dim) * (dim + 1)] = 1.0
        return ell

    def observable_functional(self, op, ado: int = 0) -> np.ndarray:
        """Row vector giving Tr(op rho_ado) of a hierarchy vector."""
        op = np.asarray(op, dtype=complex)
        f = np.zeros(self.size, dtype=complex)
        # Tr(op X) = sum_ab op[b, a] X[a, b] with row-major vec(X)[a*dim + b]
        f[ado * self.d2:(ado + 1) * self.d2] = op.T.reshape(-1)
        return f

    def initial_vector(self, rho0) -> np.ndarray:
        rho0 = np.asarray(rho0, dtype=complex)
        if rho0.shape != (self.spec.dim,) * 2:
            raise ValidationError("initial density matrix has the wrong shape")
        y = np.zeros(self.size, dtype=complex)
        y[: self.d2] = rho0.reshape(-1)
        return y


@dataclass
class HeomState:
    hierarchy: Hierarchy
    vector: np.ndarray
    time: float = 0.0

    @property
    def rho(self) -> np.ndarray:
        d = self.hierarchy.spec.dim
        return self.vector[: d * d].reshape(d, d).copy()

    def ado(self, n) -> np.ndarray:
        h = self.hierarchy
        d = h.spec.dim
        k = h.index_of(n)
        return self.vector[k * d * d:(k + 1) * d * d].reshape(d, d)

    @property
    def ados(self) -> dict:
        d = self.hierarchy.spec.dim
        blocks = self.vector.reshape(-1, d, d)
        return {tuple(n): blocks[i] for i, n in enumerate(self.hierarchy.indices.tolist())}

    def save(self, path) -> None:
        np.savez(path, vector=self.vector, time=self.time, indices=self.hierarchy.indices,
                 depth=self.hierarchy.depth)

    @classmethod
    def load(cls, path, spec: SystemSpec, budget: int = DEFAULT_BUDGET) -> "HeomState":
        with np.load(path) as data:
            hier = Hierarchy(spec, int(data["depth"]), budget)
            if not np.array_equal(hier.indices, data["indices"]):
                raise ValidationError("checkpoint does not match the hierarchy of this spec")
            return cls(hier, data["vector"].copy(), float(data["time"]))


def build_hierarchy(spec: SystemSpec, config: HeomConfig, rho0=None) -> HeomState:
    """Enumerate the ADOs and place ``rho0`` (default: ground state) at order zero."""
    hier = Hierarchy(spec, config.depth, config.budget)
    if rho0 is None:
        rho0 = np.zeros((spec.dim, spec.dim), dtype=complex)
        rho0[0, 0] = 1.0
    return HeomState(hier, hier.initial_vector(rho0), 0.0)


def _hierarchy_for(state: HeomState, spec: SystemSpec) -> Hierarchy:
    if state.hierarchy.spec is not spec:
        raise ValidationError("state was built for a different SystemSpec")
    return state.hierarchy


def check_density(rho, trace_tol: float, positivity_tol: float, where: str = "") -> dict:
    """Trace, Hermiticity and positivity diagnostics; raises IntegrityError on violation."""
    tr = np.trace(rho)
    herm = float(np.max(np.abs(rho - dag(rho)))) if rho.size else 0.0
    evals = np.linalg.eigvalsh(0.5 * (rho + dag(rho)))
    diag = {"trace_error": float(abs(tr - 1)), "hermiticity": herm, "min_eigenvalue": float(evals.min())}
    if diag["trace_error"] > trace_tol:
        raise IntegrityError(f"trace drifted by {diag['trace_error']:.2e}{where}")
    if diag["min_eigenvalue"] < -positivity_tol:
        raise IntegrityError(f"density matrix eigenvalue {diag['min_eigenvalue']:.2e} < 0{where}")
    return diag


@dataclass
class Trajectory:
    times: np.ndarray
    values: np.ndarray  # (n_times, n_observables)
    names: list
    max_trace_error: float = 0.0
    min_eigenvalue: float = 0.0
    max_hermiticity: float = 0.0

    def write_csv(self, path) -> None:
        cols = ["time"]
        for name in self.names:
            cols += [f"re_{name}", f"im_{name}"]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for t, row in zip(self.times, self.values):
                vals = [repr(float(t))]
                for v in row:
                    vals += [repr(float(v.real)), repr(float(v.imag))]
                fh.write(",".join(vals) + "\n")


def integrate(rhs: Callable, y0, t0: float, t1: float, config: HeomConfig, t_eval=None, jac=None):
    """solve_ivp on a complex state; NumericError on failure."""
    kwargs = {"jac": jac} if jac is not None else {}
    sol = solve_ivp(rhs, (t0, t1), y0, method=config.method, rtol=config.rtol, atol=config.atol,
                    t_eval=t_eval, **kwargs)
    if sol.status < 0:
        raise NumericError(f"integration failed at t={sol.t[-1] if sol.t.size else t0}: {sol.message}")
    return sol


def propagate(state: HeomState, spec: SystemSpec, config: HeomConfig, t_final: float,
              observables: Optional[dict] = None, n_samples: int = 0):
    """Advance ``state`` to ``t_final``.

    With ``observables`` (name -> matrix) and ``n_samples`` > 0 a
    :class:`Trajectory` sampled on a uniform grid is returned alongside the
    new state.  Trace and positivity of rho are checked on every sample.
    """
    hier = _hierarchy_for(state, spec)
    if t_final < state.time:
        raise ValidationError("t_final must not precede the current time")
    gen = hier.generator
    t_eval = None
    if n_samples:
        t_eval = np.linspace(state.time, t_final, n_samples)
    if t_final == state.time:
        sol_y = state.vector[:, None]
        sol_t = np.array([state.time])
    else:
        sol = integrate(lambda t, y: gen @ y, state.vector, state.time, t_final, config, t_eval)
        sol_y, sol_t = sol.y, sol.t
    d = spec.dim
    worst = {"trace_error": 0.0, "hermiticity": 0.0, "min_eigenvalue": np.inf}
    for k in range(sol_y.shape[1]):
        rho = sol_y[: d * d, k].reshape(d, d)
        diag = check_density(rho, config.trace_tol, config.positivity_tol, f" at t={sol_t[k]:.4g}")
        worst["trace_error"] = max(worst["trace_error"], diag["trace_error"])
        worst["hermiticity"] = max(worst["hermiticity"], diag["hermiticity"])
        worst["min_eigenvalue"] = min(worst["min_eigenvalue"], diag["min_eigenvalue"])
    new = HeomState(hier, sol_y[:, -1].copy(), float(t_final))
    if not observables:
        return new
    names = list(observables)
    ops = np.array([np.asarray(observables[n], dtype=complex).T.reshape(-1) for n in names])
    values = (ops @ sol_y[: d * d]).T
    traj = Trajectory(sol_t, values, names, worst["trace_error"], worst["min_eigenvalue"], worst["hermiticity"])
    return new, traj


def expectation(state: HeomState, observable) -> complex:
    """Tr(rho O) from the order-zero ADO."""
    observable = np.asarray(observable, dtype=complex)
    if observable.shape != state.rho.shape:
        raise ValidationError("observable dimension does not match the system")
    return complex(np.trace(state.rho @ observable))


def bath_occupation(state: HeomState, bath: int = 0, term: int = 0) -> complex:
    """<b^dag b> of the damped mode behind one exponential term.

    Exact for terms with real positive amplitude (pseudomode picture); for
    other terms it is the analytic continuation of the same moment.
    """
    hier = state.hierarchy
    idx = np.zeros(len(hier.directions), dtype=int)
    for j, d in enumerate(hier.directions):
        if d.bath == bath and d.term == term:
            idx[j] = 1
    if idx.sum() != 2:
        raise ValidationError("no such bath term")
    if hier.depth < 2:
        raise ValidationError("bath occupation needs hierarchy depth >= 2")
    d = next(x for x in hier.directions if x.bath == bath and x.term == term)
    if d.amplitude == 0:
        return 0j
    return complex(np.trace(state.ado(idx)) * d.scale / d.amplitude)


# ---------------------------------------------------------------------------
# steady states


@dataclass
class SteadyStateCriterion:
    """Every monitored observable must vary less than ``tol`` over a trailing ``window``."""

    observables: dict
    window: float = 50.0
    tol: float = 1e-6
    samples_per_window: int = 50


@dataclass
class SteadyStateResult:
    state: HeomState
    converged: bool
    time: float
    deltas: dict
    residual: float = np.nan


def steady_state_direct(spec: SystemSpec, config: HeomConfig) -> HeomState:
    """Null vector of the hierarchy generator, normalised to Tr rho = 1."""
    hier = Hierarchy(spec, config.depth, config.budget)
    gen = hier.generator.tolil()
    ell = hier.trace_functional()
    # replace the first diagonal-element equation by the trace condition
    gen[0, :] = ell
    rhs = np.zeros(hier.size, dtype=complex)
    rhs[0] = 1.0
    y = spla.spsolve(gen.tocsc(), rhs)
    if not np.all(np.isfinite(y)):
        raise NumericError("singular hierarchy generator: steady state is not unique")
    return HeomState(hier, y, np.inf)


def steady_state(spec: SystemSpec, config: HeomConfig, criterion: SteadyStateCriterion,
                 method: str = "propagate", state: Optional[HeomState] = None) -> SteadyStateResult:
    """Steady state by propagation with a windowed criterion, or by a direct solve.

    ``method="direct"`` solves the stationary equations and then propagates
    one window to confirm the criterion; ``"propagate"`` starts from ``state``
    (default: ground state) and advances window by window until the
    criterion holds or ``config.max_time`` is exceeded.
    """
    names = list(criterion.observables)
    if method == "direct":
        st = steady_state_direct(spec, config)
        st = HeomState(st.hierarchy, st.vector, 0.0)
        gen = st.hierarchy.generator
        residual = float(np.linalg.norm(gen @ st.vector))
        end, traj = propagate(st, spec, config, criterion.window, criterion.observables,
                              criterion.samples_per_window)
        deltas = {n: float(np.ptp(traj.values[:, i].real) + np.ptp(traj.values[:, i].imag))
                  for i, n in enumerate(names)}
        ok = all(v < criterion.tol for v in deltas.values())
        if not ok:
            raise ConvergenceError("direct steady state drifts under propagation", deltas=deltas)
        return SteadyStateResult(st, True, 0.0, deltas, residual)
    if method != "propagate":
        raise ValidationError(f"unknown steady-state method {method!r}")
    if state is None:
        state = build_hierarchy(spec, config)
    deltas = {}
    while state.time < config.max_time:
        state, traj = propagate(state, spec, config, state.time + criterion.window, criterion.observables,
                                criterion.samples_per_window)
        deltas = {n: float(np.ptp(traj.values[:, i].real) + np.ptp(traj.values[:, i].imag))
                  for i, n in enumerate(names)}
        if all(v < criterion.tol for v in deltas.values()):
            res = float(np.linalg.norm(state.hierarchy.generator @ state.vector))
            return SteadyStateResult(state, True, state.time, deltas, res)
    raise ConvergenceError(
        f"no steady state within max_time={config.max_time}", deltas=deltas, time=state.time
    )


def select_depth(spec: SystemSpec, observables: dict, tol: float = 1e-4, max_depth: int = 8,
                 config: Optional[HeomConfig] = None) -> tuple[int, dict]:
    """Smallest depth whose steady observables change < ``tol`` at depth + 1."""
    config = config or HeomConfig()
    history = {}
    prev = None
    for depth in range(1, max_depth + 1):
        cfg = HeomConfig(**{**config.__dict__, "depth": depth})
        st = steady_state_direct(spec, cfg)
        vals = np.array([expectation(st, op) for op in observables.values()])
        history[depth] = vals
        if prev is not None and np.max(np.abs(vals - prev)) < tol:
            return depth - 1, history
        prev = vals
    raise ConvergenceError(f"depth not converged up to {max_depth}", history=history)
