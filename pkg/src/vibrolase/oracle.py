"""Brute-force reference: the full master equation on a truncated Hilbert space.

Emitters, an explicit cavity mode and one damped boson (pseudomode) per
exponential term of each emitter's vibrational bath are kept exactly.  A term
G exp(-(gamma + i Omega) t) with real G > 0 becomes a mode of frequency Omega,
coupling sqrt(G) and loss ``gamma * D[b]``; under the package's dissipator
convention this reproduces the correlation function exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import solve_ivp
from scipy.linalg import schur, solve_triangular

from .errors import CapacityError, ConvergenceError, NumericError, ValidationError
from .expfit import ExponentialBathModel
from .observables import Observables
from .operators import PROJ_E, SIGMA_MINUS, SIGMA_X, destroy, liouvillian

DEFAULT_DIM_CAP = 4096
MAX_EMITTERS = 3
#: largest superoperator dimension for the dense kernel check
DENSE_LIMIT = 1600


@dataclass(frozen=True, eq=False)
class OracleSpec:
    """Physical parameters mirrored from an ensemble, plus truncations.

    ``mode`` is ``"coherent"`` (drive ``E_d sigma_x`` and vibrational bath) or
    ``"incoherent"`` (pump ``E_d D[sigma_+]``, no vibrational bath).
    ``cavity_cutoff`` is the largest photon number kept (``None``: no cavity).
    """

    n_emitters: int = 1
    drive: float = 0.0
    mode: str = "coherent"
    vib_bath: ExponentialBathModel = field(default_factory=ExponentialBathModel.empty)
    pseudomode_cutoffs: tuple = ()
    g_cav: float = 0.0
    kappa: float = 0.0
    cavity_detuning: float = 0.0
    cavity_cutoff: Optional[int] = None
    gamma_down: float = 0.0
    dim_cap: int = DEFAULT_DIM_CAP

    def __post_init__(self):
        if not 1 <= self.n_emitters <= MAX_EMITTERS:
            raise ValidationError(f"oracle supports 1..{MAX_EMITTERS} emitters")
        if self.mode not in ("coherent", "incoherent"):
            raise ValidationError(f"unknown drive mode {self.mode!r}")
        if self.kappa < 0 or self.gamma_down < 0:
            raise ValidationError("loss rates must be non-negative")
        if self.mode == "incoherent" and self.drive < 0:
            raise ValidationError("incoherent pump rate must be non-negative")
        cutoffs = tuple(int(c) for c in self.pseudomode_cutoffs)
        if self.mode == "coherent":
            if len(cutoffs) == 0 and self.vib_bath.K:
                cutoffs = (4,) * self.vib_bath.K
            if len(cutoffs) != self.vib_bath.K:
                raise ValidationError("one pseudomode cutoff per bath term is required")
            if self.vib_bath.K and not np.all(self.vib_bath.admissible()):
                raise ValidationError(
                    "bath terms need real positive amplitudes to be represented by pseudomodes"
                )
        else:
            cutoffs = ()
        object.__setattr__(self, "pseudomode_cutoffs", cutoffs)
        if self.hilbert_dim > self.dim_cap:
            raise CapacityError(
                f"Hilbert dimension {self.hilbert_dim} exceeds the cap of {self.dim_cap}", self.hilbert_dim
            )

    @property
    def has_cavity(self) -> bool:
        return self.cavity_cutoff is not None

    @property
    def site_dims(self) -> list[int]:
        """Factor dimensions: (emitter, its pseudomodes...) per emitter, then the cavity."""
        dims = []
        for _ in range(self.n_emitters):
            dims.append(2)
            dims.extend(c + 1 for c in self.pseudomode_cutoffs)
        if self.has_cavity:
            dims.append(self.cavity_cutoff + 1)
        return dims

    @property
    def hilbert_dim(self) -> int:
        return int(np.prod(self.site_dims))

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "vib_bath"}
        d["vib_bath"] = self.vib_bath.to_dict()
        d["pseudomode_cutoffs"] = list(self.pseudomode_cutoffs)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "OracleSpec":
        data = dict(data)
        data["vib_bath"] = ExponentialBathModel.from_dict(data.get("vib_bath", {"terms": []}))
        data["pseudomode_cutoffs"] = tuple(data.get("pseudomode_cutoffs", ()))
        return cls(**data)


def _embed(op, site: int, dims):
    out = None
    for k, d in enumerate(dims):
        f = sp.csr_matrix(op, dtype=complex) if k == site else sp.identity(d, dtype=complex, format="csr")
        out = f if out is None else sp.kron(out, f, format="csr")
    return out


class OracleModel:
    """Operators of the truncated space and the full Liouvillian."""

    def __init__(self, spec: OracleSpec):
        self.spec = spec
        dims = spec.site_dims
        self.dims = dims
        stride = 1 + len(spec.pseudomode_cutoffs)
        self.emitter_sites = [i * stride for i in range(spec.n_emitters)]
        self.sigma_minus = [_embed(SIGMA_MINUS, s, dims) for s in self.emitter_sites]
        self.proj_e = [_embed(PROJ_E, s, dims) for s in self.emitter_sites]
        self.pseudomodes = [
            [_embed(destroy(c + 1), s + 1 + k, dims) for k, c in enumerate(spec.pseudomode_cutoffs)]
            for s in self.emitter_sites
        ]
        self.cavity = _embed(destroy(spec.cavity_cutoff + 1), len(dims) - 1, dims) if spec.has_cavity else None

    def hamiltonian(self):
        s = self.spec
        dim = int(np.prod(self.dims))
        h = sp.csr_matrix((dim, dim), dtype=complex)
        for i, site in enumerate(self.emitter_sites):
            if s.mode == "coherent":
                h = h + s.drive * _embed(SIGMA_X, site, self.dims)
                for (g, w), b in zip(s.vib_bath.terms, self.pseudomodes[i]):
                    bd = b.getH()
                    h = h + w.imag * (bd @ b) + np.sqrt(g.real) * (self.proj_e[i] @ (b + bd))
            if self.cavity is not None:
                a = self.cavity
                sm = self.sigma_minus[i]
                h = h + s.g_cav * (sm.getH() @ a + sm @ a.getH())
        if self.cavity is not None:
            h = h + s.cavity_detuning * (self.cavity.getH() @ self.cavity)
        return h.tocsr()

    def lindblad_terms(self):
        s = self.spec
        terms = []
        for i in range(s.n_emitters):
            terms.append((self.sigma_minus[i], s.gamma_down))
            if s.mode == "incoherent":
                terms.append((self.sigma_minus[i].getH().tocsr(), s.drive))
            else:
                for (g, w), b in zip(s.vib_bath.terms, self.pseudomodes[i]):
                    terms.append((b, w.real))
        if self.cavity is not None:
            terms.append((self.cavity, s.kappa))
        return terms

    def liouvillian(self):
        return liouvillian(self.hamiltonian(), self.lindblad_terms())

    def observables(self, rho) -> Observables:
        p_e = np.mean([np.real(np.sum(pe.T.multiply(rho))) for pe in self.proj_e])
        n_cav = 0.0
        if self.cavity is not None:
            num = self.cavity.getH() @ self.cavity
            n_cav = float(np.real(np.sum(num.T.multiply(rho))))
        pair = 0j
        if self.spec.n_emitters > 1:
            op = self.sigma_minus[0].getH() @ self.sigma_minus[1]
            pair = complex(np.sum(op.T.multiply(rho)))
        return Observables(float(p_e), n_cav, pair)

    def bath_occupation(self, rho, emitter: int = 0, term: int = 0) -> float:
        b = self.pseudomodes[emitter][term]
        return float(np.real(np.sum((b.getH() @ b).T.multiply(rho))))

    def expectation(self, rho, op_factor, site: int) -> complex:
        op = _embed(op_factor, site, self.dims)
        return complex(np.sum(op.T.multiply(rho)))


def build_liouvillian(spec: OracleSpec):
    """Sparse superoperator of the full master equation (row-major vectorisation)."""
    return OracleModel(spec).liouvillian()


@dataclass
class OracleResult:
    rho: np.ndarray = field(repr=False)
    observables: Observables
    residual: float
    method: str

    def to_dict(self) -> dict:
        return {"observables": self.observables.to_dict(), "residual": self.residual, "method": self.method}


def _null_vector(gen, dim: int, shift: float, iters: int, tol: float, seed: int):
    """Eigenvector of the eigenvalue nearest zero by shifted inverse iteration.

    Two independent starts are run; if they converge to different vectors
    the kernel is degenerate.
    """
    n = gen.shape[0]
    lu = spla.splu((gen - shift * sp.identity(n, dtype=complex, format="csc")).tocsc())
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(2):
        x = rng.normal(size=n) + 1j * rng.normal(size=n)
        x /= np.linalg.norm(x)
        ok = False
        for _ in range(iters):
            y = lu.solve(x)
            y /= np.linalg.norm(y)
            # align global phase before comparing iterates
            y *= np.exp(-1j * np.angle(np.vdot(x, y)))
            if np.linalg.norm(y - x) < tol:
                x = y
                ok = True
                break
            x = y
        if not ok:
            return None, None
        out.append(x)
    overlap = abs(np.vdot(out[0], out[1]))
    return out[0], overlap


class _KroneckerSumSolver:
    """Solves (A - shift) X + X B^T = Y with cached Schur forms (Bartels-Stewart)."""

    def __init__(self, A, B, shift: float):
        self.T, self.U = schur(np.asarray(A, dtype=complex), output="complex")
        self.S, self.W = schur(np.asarray(B, dtype=complex).T, output="complex")
        self.shift = shift

    def solve(self, Y):
        Yt = self.U.conj().T @ Y @ self.W
        X = np.zeros_like(Yt)
        S, T = self.S, self.T
        diag = np.einsum("ii->i", T)  # writable view: shift the diagonal in place
        base = diag.copy()
        for k in range(S.shape[0]):
            rhs = Yt[:, k] - X[:, :k] @ S[:k, k]
            diag[:] = base + (S[k, k] - self.shift)
            try:
                X[:, k] = solve_triangular(T, rhs)
            finally:
                diag[:] = base
        return self.U @ X @ self.W.conj().T


def _krylov_steady(model: "OracleModel", gen, rtol: float, x0=None):
    """Stationary state by GMRES preconditioned with the emitter-cavity decoupled generator.

    With L = L0 + V (V the emitter-cavity coupling) and x0 a null vector of
    L0, the correction solves L d = -L x0; the decoupled generator is a
    Kronecker sum that is inverted exactly by a Sylvester solve.
    """
    spec = model.spec
    em = OracleModel(replace(spec, cavity_cutoff=None, dim_cap=spec.dim_cap))
    A = em.liouvillian().toarray()
    nc = spec.cavity_cutoff + 1
    a = destroy(nc)
    B = liouvillian(spec.cavity_detuning * (a.conj().T @ a), [(a, spec.kappa)]).toarray()
    ne = em.spec.hilbert_dim
    scale = max(np.abs(A).max(), np.abs(B).max())
    pre = _KroneckerSumSolver(A, B, -1e-3 * scale)

    def to_pair(v):  # (ae ac, be bc) -> (ae be, ac bc)
        return v.reshape(ne, nc, ne, nc).transpose(0, 2, 1, 3).reshape(ne * ne, nc * nc)

    def from_pair(X):
        return X.reshape(ne, ne, nc, nc).transpose(0, 2, 1, 3).reshape(-1)

    n = gen.shape[0]
    M = spla.LinearOperator((n, n), matvec=lambda v: from_pair(pre.solve(to_pair(v))), dtype=complex)
    if x0 is None:
        rho_e = _dense_null(A).reshape(ne, ne)
        rho_c = np.zeros((nc, nc), dtype=complex)
        rho_c[0, 0] = 1.0
        x0 = np.kron(rho_e / np.trace(rho_e), rho_c).reshape(-1)
    b = -(gen @ x0)
    d, info = spla.gmres(gen, b, M=M, rtol=rtol, atol=0.0, restart=60, maxiter=50)
    if info != 0:
        return None
    return x0 + d


def _dense_null(A):
    w, v = np.linalg.eig(A)
    return v[:, np.argmin(np.abs(w))]


def steady_state_exact(spec: OracleSpec, shift: float = 1e-9, iters: int = 50, tol: float = 1e-12,
                       seed: int = 0, lu_limit: int = 6000) -> OracleResult:
    """Unique stationary state of the full Liouvillian, normalised to trace one.

    Small problems use shifted inverse iteration with a sparse LU factor;
    larger problems with a cavity use preconditioned GMRES (sparse LU fill-in
    is prohibitive there).  Propagation is the fallback for both.
    """
    model = OracleModel(spec)
    gen = model.liouvillian().tocsc()
    dim = spec.hilbert_dim
    n = dim * dim
    x = None
    if n <= lu_limit or not spec.has_cavity:
        x, overlap = _null_vector(gen, dim, shift, iters, tol, seed)
        method = "inverse-iteration"
        if x is not None and overlap < 1 - 1e-6:
            raise NumericError(
                "the Liouvillian kernel is degenerate (several stationary states); "
                "analyse the symmetry sectors separately"
            )
    else:
        method = "preconditioned-gmres"
        x = _krylov_steady(model, gen, rtol=1e-13)
        if x is not None:
            # a second start must give the same normalised state unless the kernel is degenerate
            alt0 = np.eye(dim, dtype=complex).reshape(-1) / dim
            alt = _krylov_steady(model, gen, rtol=1e-13, x0=alt0)
            if alt is not None:
                diff = np.linalg.norm(x / _trace(x, dim) - alt / _trace(alt, dim))
                if diff > 1e-6:
                    raise NumericError(
                        "the Liouvillian kernel is degenerate (several stationary states); "
                        "analyse the symmetry sectors separately"
                    )
    if x is None and n <= DENSE_LIMIT:
        w, v = np.linalg.eig(gen.toarray())
        null = np.abs(w) < 1e-10 * max(1.0, np.abs(w).max())
        if null.sum() > 1:
            raise NumericError(
                f"the Liouvillian kernel is degenerate ({int(null.sum())} stationary states); "
                "analyse the symmetry sectors separately"
            )
        if null.sum() == 1:
            x = v[:, np.argmax(null)]
            method = "dense-eigen"
    if x is None:
        x = _propagate_to_steady(gen, dim)
        alt = _propagate_to_steady(gen, dim, start=np.eye(dim, dtype=complex).reshape(-1) / dim)
        if np.linalg.norm(x / _trace(x, dim) - alt / _trace(alt, dim)) > 1e-6:
            raise NumericError("propagation from two initial states reached different stationary states")
        method = "propagation"
    rho = x.reshape(dim, dim)
    rho = rho / np.trace(rho)
    rho = 0.5 * (rho + rho.conj().T)
    residual = float(np.linalg.norm(gen @ rho.reshape(-1)))
    return OracleResult(rho, model.observables(rho), residual, method)


def _trace(x, dim):
    return x.reshape(dim, dim).trace()


def _propagate_to_steady(gen, dim: int, t_chunk: float = 100.0, tol: float = 1e-10, max_time: float = 1e6,
                         start=None):
    if start is None:
        y = np.zeros(dim * dim, dtype=complex)
        y[0] = 1.0
    else:
        y = np.asarray(start, dtype=complex).copy()
    t = 0.0
    while t < max_time:
        sol = solve_ivp(lambda _, v: gen @ v, (t, t + t_chunk), y, method="DOP853", rtol=1e-10, atol=1e-12)
        if sol.status < 0:
            raise NumericError(sol.message)
        new = sol.y[:, -1]
        if np.linalg.norm(new - y) < tol:
            return new
        y, t = new, t + t_chunk
    raise ConvergenceError("oracle propagation did not reach a steady state", time=t)


def propagate_exact(spec: OracleSpec, rho0, times, observables: dict, rtol: float = 1e-10,
                    atol: float = 1e-12) -> dict:
    """Observable trajectories from the full Liouvillian.

    ``observables`` maps names to sparse/dense operators on the full space.
    """
    model = OracleModel(spec)
    gen = model.liouvillian()
    times = np.asarray(times, dtype=float)
    sol = solve_ivp(lambda _, v: gen @ v, (times[0], times[-1]), np.asarray(rho0, complex).reshape(-1),
                    t_eval=times, method="DOP853", rtol=rtol, atol=atol)
    if sol.status < 0:
        raise NumericError(sol.message)
    out = {}
    for name, op in observables.items():
        vec = sp.csr_matrix(op).T.toarray().reshape(-1) if sp.issparse(op) else np.asarray(op).T.reshape(-1)
        out[name] = vec @ sol.y
    return out


def ground_state(spec: OracleSpec) -> np.ndarray:
    dim = spec.hilbert_dim
    rho = np.zeros((dim, dim), dtype=complex)
    rho[0, 0] = 1.0
    return rho


# ---------------------------------------------------------------------------
# golden files


def save_golden(path, spec: OracleSpec, result: OracleResult, label: str = "") -> None:
    doc = {"label": label, "spec": spec.to_dict(), "result": result.to_dict()}
    Path(path).write_text(json.dumps(doc, indent=2))


def load_golden(path) -> tuple[OracleSpec, dict]:
    doc = json.loads(Path(path).read_text())
    return OracleSpec.from_dict(doc["spec"]), doc["result"]
