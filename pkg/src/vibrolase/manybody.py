"""N identical emitters sharing a lossy cavity, with N-independent equations.

Each emitter ("particle") carries its two-level density matrix, the ADOs of
its own vibrational bath and the ADOs of the cavity field it has radiated
itself.  The cavity field felt by emitter i is the sum of the fields radiated
by all emitters, so the exact hierarchy only couples particles in pairs,

    dR/dt = sum_i L_i R + sum_{i != j} sum_(+-) C_(+-)^(i) S_(+-)^(j) R,

where C applies -i[A, .] to emitter i (A = sigma_+ or sigma_-) and S raises
the cavity index of source j.  Writing the two-particle marginal as
r (x) r + c and dropping connected three-particle correlations gives closed
equations for the one-body vector r and the symmetric pair block c in which
N only appears in the coefficients N - 1 and N - 2.  The closure is exact for
N = 1 and N = 2 (the latter when the pair block keeps the full depth).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, NumericError, ValidationError
from .expfit import ExponentialBathModel
from .heom import HeomConfig, HeomState, Hierarchy, SteadyStateCriterion, check_density, integrate
from .observables import Observables
from .operators import PROJ_E, SIGMA_MINUS, SIGMA_PLUS, SIGMA_X, spost, spre
from .spectral import CavityBathModel

COHERENT = "coherent"
INCOHERENT = "incoherent"
#: pair-block magnitude treated as a closure blow-up
DIVERGENCE_BOUND = 1e6
# the input-output form neglects emitter-cavity correlations beyond stationarity; see cavity_occupation
DEFAULT_ESTIMATOR = "ado"


@dataclass(frozen=True, eq=False)
class EnsembleSpec:
    """N identical emitters: drive, vibrational bath, spontaneous decay and a shared cavity.

    In ``incoherent`` mode the coherent drive and the vibrational bath are
    replaced by a pump ``drive * D[sigma_+]``.
    """

    n_emitters: int
    drive: float
    cavity: CavityBathModel
    vib_bath: ExponentialBathModel = field(default_factory=ExponentialBathModel.empty)
    gamma_down: float = 1e-3
    mode: str = COHERENT

    def __post_init__(self):
        if int(self.n_emitters) != self.n_emitters or self.n_emitters < 1:
            raise ValidationError("n_emitters must be a positive integer")
        if self.mode not in (COHERENT, INCOHERENT):
            raise ValidationError(f"unknown drive mode {self.mode!r}")
        if self.gamma_down < 0:
            raise ValidationError("gamma_down must be non-negative")
        if self.mode == INCOHERENT and self.drive < 0:
            raise ValidationError("incoherent pump rate must be non-negative")

    def emitter_spec(self):
        from .heom import SystemSpec

        baths = []
        lind = [(SIGMA_MINUS, self.gamma_down)]
        if self.mode == COHERENT:
            h = self.drive * SIGMA_X
            if self.vib_bath.K:
                baths.append((PROJ_E, self.vib_bath))
        else:
            h = np.zeros((2, 2), dtype=complex)
            lind.append((SIGMA_PLUS, self.drive))
        baths.append((SIGMA_MINUS, self.cavity.as_exponential()))
        return SystemSpec(h, tuple(baths), tuple(lind))

    def with_(self, **changes) -> "EnsembleSpec":
        data = {k: getattr(self, k) for k in
                ("n_emitters", "drive", "cavity", "vib_bath", "gamma_down", "mode")}
        data.update(changes)
        return EnsembleSpec(**data)

    def to_dict(self) -> dict:
        return {
            "n_emitters": int(self.n_emitters),
            "drive": float(self.drive),
            "mode": self.mode,
            "gamma_down": float(self.gamma_down),
            "cavity": {"g_cav": self.cavity.g_cav, "kappa": self.cavity.kappa,
                       "omega_cav": self.cavity.omega_cav},
            "vib_bath": self.vib_bath.to_dict(),
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, data: dict) -> "EnsembleSpec":
        return cls(
            n_emitters=int(data["n_emitters"]),
            drive=float(data["drive"]),
            cavity=CavityBathModel(**data["cavity"]),
            vib_bath=ExponentialBathModel.from_dict(data.get("vib_bath", {"terms": []})),
            gamma_down=float(data.get("gamma_down", 1e-3)),
            mode=data.get("mode", COHERENT),
        )

    @classmethod
    def from_json(cls, text: str) -> "EnsembleSpec":
        return cls.from_dict(json.loads(text))


def _comm(a):
    return (-1j * (spre(a) - spost(a))).tocsr()


class ClusterModel:
    """Operators of the one-body hierarchy and of the truncated pair space.

    ``pair_depth`` is the hierarchy depth kept in the pair block.
    ``closure`` is ``"gaussian"`` (pair block evolved) or ``"meanfield"``
    (pair block held at zero).
    """

    def __init__(self, spec: EnsembleSpec, depth: int = 3, pair_depth: int = 1,
                 closure: str = "gaussian", budget: Optional[int] = None):
        if not 1 <= pair_depth <= min(depth, 2):
            raise ValidationError("pair depth must lie in 1..min(depth, 2)")
        if closure not in ("gaussian", "meanfield"):
            raise ValidationError(f"unknown closure {closure!r}")
        self.spec = spec
        self.closure = closure
        self.system = spec.emitter_spec()
        kwargs = {} if budget is None else {"budget": budget}
        self.hier = Hierarchy(self.system, depth, **kwargs)
        self.depth = depth
        self.pair_depth = pair_depth
        hier = self.hier
        cav_bath = len(self.system.bath_couplings) - 1
        self.cav_dirs = [j for j, d in enumerate(hier.directions) if d.bath == cav_bath]
        # cavity directions: (+) raises with sigma_+, (-) with sigma_-
        self.d = hier.size
        n2 = int(np.sum(hier.orders() <= pair_depth))
        self.d2 = n2 * hier.d2
        eye_ados = sp.identity(hier.n_ados, dtype=complex, format="csr")
        self.L = hier.generator
        self.ell = hier.trace_functional()
        self.C, self.S, self.f = [], [], []
        for j in self.cav_dirs:
            d = hier.directions[j]
            C = sp.kron(eye_ados, _comm(d.raise_op), format="csr")
            S = sp.kron(hier.raise_map(j), sp.identity(hier.d2, dtype=complex), format="csr")
            self.C.append(C)
            self.S.append(S)
            self.f.append(np.asarray(S.T @ self.ell).ravel())
        d2 = self.d2
        self.L2 = self.L[:d2, :d2].tocsr()
        self.C2 = [C[:d2, :d2].tocsr() for C in self.C]
        self.S2 = [S[:d2, :d2].tocsr() for S in self.S]
        self.PS = [S[:d2, :].tocsr() for S in self.S]
        self.PC = [C[:d2, :].tocsr() for C in self.C]
        self.f2 = [f[:d2].copy() for f in self.f]
        self.ell2 = self.ell[:d2].copy()
        self.scale = hier.directions[self.cav_dirs[0]].scale
        self.amplitude = hier.directions[self.cav_dirs[0]].amplitude
        self.one_body_photon_ado = None
        if depth >= 2:
            n = np.zeros(len(hier.directions), dtype=int)
            n[self.cav_dirs] = 1
            self.one_body_photon_ado = hier.index_of(n)

    # -- state layout ------------------------------------------------------

    @property
    def has_pair(self) -> bool:
        return self.spec.n_emitters > 1 and self.closure == "gaussian"

    @property
    def state_size(self) -> int:
        """Number of complex amplitudes of the closed state (independent of N >= 2)."""
        return self.d + (self.d2 * self.d2 if self.has_pair else 0)

    def pack(self, r, c=None) -> np.ndarray:
        if not self.has_pair:
            return np.asarray(r, dtype=complex).copy()
        return np.concatenate([r, np.asarray(c).reshape(-1)])

    def unpack(self, y):
        r = y[: self.d]
        c = y[self.d:].reshape(self.d2, self.d2) if self.has_pair else None
        return r, c

    def initial(self, rho0=None) -> np.ndarray:
        if rho0 is None:
            rho0 = np.diag([1.0, 0.0]).astype(complex)
        r = self.hier.initial_vector(rho0)
        c = np.zeros((self.d2, self.d2), dtype=complex) if self.has_pair else None
        return self.pack(r, c)

    # -- equations of motion -----------------------------------------------

    def rhs(self, y: np.ndarray) -> np.ndarray:
        N = self.spec.n_emitters
        r, c = self.unpack(y)
        dr = self.L @ r
        if N == 1:
            return dr
        d2 = self.d2
        rp = r[:d2]
        dc = None
        X = None
        if c is not None:
            X = self.L2 @ c
        for C, S, f, C2, S2, PS, PC, f2 in zip(self.C, self.S, self.f, self.C2, self.S2,
                                               self.PS, self.PC, self.f2):
            phi = f @ r
            src = phi * r
            if c is not None:
                u = c @ f2
                src[:d2] += u
            dr += (N - 1) * (C @ src)
            if c is None:
                continue
            a = C2 @ rp
            Cc = C2 @ c
            X += (S2 @ (C2 @ c).T).T  # C2 c S2^T
            X += np.outer(PC @ r, PS @ r)
            X += (N - 2) * (phi * Cc + np.outer(a, u))
            X -= phi * np.outer(a, rp) + np.outer(C2 @ u, rp)
        if c is not None:
            dc = X + X.T
            return np.concatenate([dr, dc.reshape(-1)])
        return dr

    # -- observables -------------------------------------------------------

    def _fun(self, op, size):
        out = np.zeros(size, dtype=complex)
        out[:4] = np.asarray(op, dtype=complex).T.reshape(-1)
        return out

    def pair_coherence(self, y) -> complex:
        """<sigma_+^i sigma_-^j>, i != j."""
        r, c = self.unpack(y)
        fp = self._fun(SIGMA_PLUS, self.d)
        fm = self._fun(SIGMA_MINUS, self.d)
        val = (fp @ r) * (fm @ r)
        if c is not None:
            val += self._fun(SIGMA_PLUS, self.d2) @ c @ self._fun(SIGMA_MINUS, self.d2)
        return complex(val)

    def excited_population(self, y) -> float:
        r, _ = self.unpack(y)
        return float(np.real(self._fun(PROJ_E, self.d) @ r))

    def rho(self, y) -> np.ndarray:
        return y[:4].reshape(2, 2).copy()

    def pair_rho(self, y) -> np.ndarray:
        """Two-emitter reduced density matrix r0 (x) r0 + c0 (row-major, 4x4)."""
        r, c = self.unpack(y)
        r0 = r[:4]
        vec = np.kron(r0, r0)
        if c is not None:
            vec = vec + c[:4, :4].reshape(-1)
        # vec is indexed (a1 b1 a2 b2); reorder to (a1 a2, b1 b2)
        return vec.reshape(2, 2, 2, 2).transpose(0, 2, 1, 3).reshape(4, 4)

    def cavity_occupation(self, y, estimator: str = DEFAULT_ESTIMATOR) -> float:
        spec = self.spec
        N = spec.n_emitters
        cav = spec.cavity
        if cav.g_cav == 0:
            return 0.0
        if estimator == "input-output":
            pe = self.excited_population(y)
            pair = self.pair_coherence(y).real if N > 1 else 0.0
            pref = cav.g_cav**2 / (cav.omega_cav**2 + cav.kappa**2)
            return float(pref * (N * pe + N * (N - 1) * pair))
        if estimator != "ado":
            raise ValidationError(f"unknown estimator {estimator!r}")
        if self.one_body_photon_ado is None:
            raise ValidationError("the ADO estimator needs hierarchy depth >= 2")
        r, c = self.unpack(y)
        k = self.one_body_photon_ado * 4
        self_part = r[k] + r[k + 3]
        cross = 0j
        if N > 1:
            fp, fm = self.f[0] / np.sqrt(self.scale), self.f[1] / np.sqrt(self.scale)
            cross = (fp @ r) * (fm @ r)
            if c is not None:
                cross += (fp[: self.d2] @ c) @ fm[: self.d2]
        return float(np.real(self.scale / self.amplitude * (N * self_part + N * (N - 1) * cross)))

    def observables(self, y, estimator: str = DEFAULT_ESTIMATOR) -> Observables:
        pair = self.pair_coherence(y) if self.spec.n_emitters > 1 else 0j
        return Observables(self.excited_population(y), self.cavity_occupation(y, estimator), pair)

    # -- Newton steady state -----------------------------------------------

    def _layout(self):
        d, d2 = self.d, self.d2
        m = d2 * d2 if self.has_pair else 0
        sizes = [("r", d), ("c", m), ("phi", 2), ("u", 2 * d2 if self.has_pair else 0)]
        offs, o = {}, 0
        for name, n in sizes:
            offs[name] = (o, o + n)
            o += n
        return offs, o

    def _extended(self, y):
        r, c = self.unpack(y)
        phi = np.array([f @ r for f in self.f])
        u = np.concatenate([c @ f2 for f2 in self.f2]) if c is not None else np.empty(0, complex)
        return np.concatenate([r, c.reshape(-1) if c is not None else np.empty(0, complex), phi, u])

    def _residual_and_jacobian(self, z, want_jac: bool = True):
        N = self.spec.n_emitters
        d, d2 = self.d, self.d2
        offs, n = self._layout()
        r = z[offs["r"][0]:offs["r"][1]]
        phi = z[offs["phi"][0]:offs["phi"][1]]
        pair = self.has_pair
        F = np.zeros(n, dtype=complex)
        blocks = {}

        def add(rk, ck, mat):
            blocks.setdefault((rk, ck), []).append(sp.csr_matrix(mat))

        Fr = self.L @ r
        add("r", "r", self.L)
        if pair:
            c = z[offs["c"][0]:offs["c"][1]].reshape(d2, d2)
            u_all = z[offs["u"][0]:offs["u"][1]].reshape(2, d2)
            rp = r[:d2]
            X = self.L2 @ c
            I2 = sp.identity(d2, dtype=complex, format="csr")
            P2 = sp.hstack([I2, sp.csr_matrix((d2, d - d2), dtype=complex)], format="csr")
            Jcc = [sp.kron(self.L2, I2), sp.kron(I2, self.L2)]
            Jcr, Jcphi, Jcu = [], [[], []], [[], []]
        for k in range(2):
            C, f = self.C[k], self.f[k]
            Fr += (N - 1) * phi[k] * (C @ r)
            add("r", "r", (N - 1) * phi[k] * C)
            col = ((N - 1) * (C @ r))[:, None]
            blocks.setdefault(("r", f"phi{k}"), []).append(sp.csr_matrix(col))
            F[offs["phi"][0] + k] = phi[k] - f @ r
            if not pair:
                continue
            C2, S2, PS, PC, f2 = self.C2[k], self.S2[k], self.PS[k], self.PC[k], self.f2[k]
            u = u_all[k]
            Fr += (N - 1) * (C[:, :d2] @ u)
            blocks.setdefault(("r", f"u{k}"), []).append((N - 1) * C[:, :d2])
            a = C2 @ rp
            x, yv = PC @ r, PS @ r
            b = C2 @ u
            Cc = C2 @ c
            X += (S2 @ Cc.T).T
            X += np.outer(x, yv)
            X += (N - 2) * (phi[k] * Cc + np.outer(a, u))
            X -= phi[k] * np.outer(a, rp) + np.outer(b, rp)
            if want_jac:
                # J_cc: C2 c S2^T + S2 c C2^T and the (N - 2) phi terms
                Jcc += [sp.kron(C2, S2), sp.kron(S2, C2),
                        (N - 2) * phi[k] * (sp.kron(C2, I2) + sp.kron(I2, C2))]
                colx = sp.csr_matrix(x[:, None])
                coly = sp.csr_matrix(yv[:, None])
                cola = sp.csr_matrix(a[:, None])
                colrp = sp.csr_matrix(rp[:, None])
                colb = sp.csr_matrix(b[:, None])
                colu = sp.csr_matrix(u[:, None])
                Jcr += [sp.kron(PC, coly), sp.kron(colx, PS), sp.kron(PS, colx), sp.kron(coly, PC),
                        (N - 2) * (sp.kron(PC, colu) + sp.kron(colu, PC)),
                        -phi[k] * (sp.kron(PC, colrp) + sp.kron(cola, P2) + sp.kron(P2, cola)
                                   + sp.kron(colrp, PC)),
                        -(sp.kron(colb, P2) + sp.kron(P2, colb))]
                sym = Cc + Cc.T
                Jcphi[k] += [(N - 2) * sym.reshape(-1), -(np.outer(a, rp) + np.outer(rp, a)).reshape(-1)]
                Jcu[k] += [(N - 2) * (sp.kron(cola, I2) + sp.kron(I2, cola)),
                           -(sp.kron(C2, colrp) + sp.kron(colrp, C2))]
            # u definition
            K = sp.kron(I2, sp.csr_matrix(f2[None, :]), format="csr")
            F[offs["u"][0] + k * d2:offs["u"][0] + (k + 1) * d2] = u - c @ f2
            blocks.setdefault((f"u{k}", "c"), []).append(-K)
            blocks.setdefault((f"u{k}", f"u{k}"), []).append(sp.identity(d2, dtype=complex, format="csr"))
            blocks.setdefault((f"phi{k}", "r"), []).append(sp.csr_matrix(-f[None, :]))
            blocks.setdefault((f"phi{k}", f"phi{k}"), []).append(sp.csr_matrix(np.ones((1, 1))))
        if not pair:
            for k in range(2):
                blocks.setdefault((f"phi{k}", "r"), []).append(sp.csr_matrix(-self.f[k][None, :]))
                blocks.setdefault((f"phi{k}", f"phi{k}"), []).append(sp.csr_matrix(np.ones((1, 1))))
        F[: d] = Fr
        if pair:
            Fc = X + X.T
            F[offs["c"][0]:offs["c"][1]] = Fc.reshape(-1)
            if want_jac:
                blocks[("c", "c")] = Jcc
                blocks[("c", "r")] = Jcr
                for k in range(2):
                    blocks[("c", f"phi{k}")] = [sp.csr_matrix(sum(Jcphi[k])[:, None])]
                    blocks[("c", f"u{k}")] = Jcu[k]
        if not want_jac:
            return F, None
        J = self._assemble(blocks, offs, n)
        return F, J

    def _assemble(self, blocks, offs, n):
        d2 = self.d2
        ranges = {"r": offs["r"], "c": offs["c"]}
        for k in range(2):
            ranges[f"phi{k}"] = (offs["phi"][0] + k, offs["phi"][0] + k + 1)
            if self.has_pair:
                ranges[f"u{k}"] = (offs["u"][0] + k * d2, offs["u"][0] + (k + 1) * d2)
        rows, cols, vals = [], [], []
        for (rk, ck), mats in blocks.items():
            r0, c0 = ranges[rk][0], ranges[ck][0]
            for mat in mats:
                coo = sp.coo_matrix(mat)
                rows.append(coo.row + r0)
                cols.append(coo.col + c0)
                vals.append(coo.data)
        J = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
        return J

    def _constrain(self, F, J, z):
        """Replace redundant rows by normalisation and symmetry constraints."""
        offs, n = self._layout()
        d, d2 = self.d, self.d2
        J = J.tolil()
        F = F.copy()
        r = z[: d]
        J[0, :] = 0
        J[0, :d] = self.ell[None, :]
        F[0] = self.ell @ r - 1.0
        if self.has_pair:
            c0 = offs["c"][0]
            c = z[c0:offs["c"][1]].reshape(d2, d2)
            lrow = np.kron(self.ell2, self.ell2)
            J[c0, :] = 0
            J[c0, c0:c0 + d2 * d2] = lrow[None, :]
            F[c0] = lrow @ c.reshape(-1)
            iu, ju = np.triu_indices(d2, 1)
            lower = c0 + ju * d2 + iu
            upper = c0 + iu * d2 + ju
            J = J.tocsr()
            keep = np.ones(n, dtype=bool)
            keep[lower] = False
            Jk = J[np.flatnonzero(keep)]
            sym = sp.csr_matrix(
                (np.concatenate([np.ones(iu.size), -np.ones(iu.size)]),
                 (np.concatenate([np.arange(iu.size)] * 2), np.concatenate([upper, lower]))),
                shape=(iu.size, n), dtype=complex)
            J = sp.vstack([Jk, sym], format="csc")
            F = np.concatenate([F[keep], c.reshape(-1)[iu * d2 + ju] - c.reshape(-1)[ju * d2 + iu]])
            return F, J
        return F, J.tocsc()

    def newton(self, y0, tol: float = 1e-11, max_iter: int = 30):
        """Stationary closed state by Newton's method from ``y0``.

        Returns ``(y, residual_norm, iterations)``.
        """
        z = self._extended(y0)
        offs, _ = self._layout()
        last = np.inf
        for it in range(1, max_iter + 1):
            F, J = self._residual_and_jacobian(z)
            Fc, Jc = self._constrain(F, J, z)
            res = float(np.linalg.norm(Fc))
            if not np.isfinite(res):
                break
            if res < tol:
                return self._from_extended(z), res, it - 1
            step = spla.spsolve(Jc, -Fc)
            if not np.all(np.isfinite(step)):
                raise NumericError("singular Jacobian in the closed steady-state equations")
            # damp steps that increase the residual
            lam = 1.0
            while lam > 1e-3:
                trial = z + lam * step
                Ft, _ = self._residual_and_jacobian(trial, want_jac=False)
                Ftc, _ = self._constrain_residual(Ft, trial)
                if np.linalg.norm(Ftc) < max(res, 1e-300) * (1 - 1e-4 * lam) or res < 1e-8:
                    break
                lam *= 0.5
            z = z + lam * step
            last = res
        raise ConvergenceError("Newton iteration did not converge", residual=last)

    def _constrain_residual(self, F, z):
        offs, n = self._layout()
        d, d2 = self.d, self.d2
        F = F.copy()
        F[0] = self.ell @ z[:d] - 1.0
        if not self.has_pair:
            return F, None
        c0 = offs["c"][0]
        c = z[c0:offs["c"][1]].reshape(d2, d2)
        F[c0] = np.kron(self.ell2, self.ell2) @ c.reshape(-1)
        iu, ju = np.triu_indices(d2, 1)
        keep = np.ones(n, dtype=bool)
        keep[c0 + ju * d2 + iu] = False
        return np.concatenate([F[keep], c[iu, ju] - c[ju, iu]]), None

    def _from_extended(self, z):
        offs, _ = self._layout()
        r = z[offs["r"][0]:offs["r"][1]]
        if not self.has_pair:
            return r.copy()
        c = z[offs["c"][0]:offs["c"][1]].reshape(self.d2, self.d2)
        return self.pack(r, 0.5 * (c + c.T))

    def linear_steady_state(self) -> np.ndarray:
        """Stationary one-body state of the uncoupled (N = 1) hierarchy."""
        gen = self.L.tolil()
        gen[0, :] = self.ell[None, :]
        rhs = np.zeros(self.d, dtype=complex)
        rhs[0] = 1.0
        r = spla.spsolve(gen.tocsc(), rhs)
        c = np.zeros((self.d2, self.d2), dtype=complex) if self.has_pair else None
        return self.pack(r, c)


@dataclass
class ClusterState:
    model: ClusterModel
    vector: np.ndarray
    time: float = 0.0
    converged: bool = False
    convergence_time: float = np.nan
    deltas: dict = field(default_factory=dict)
    residual: float = np.nan

    @property
    def one_body(self) -> HeomState:
        r, _ = self.model.unpack(self.vector)
        return HeomState(self.model.hier, r.copy(), self.time)

    @property
    def pair_block(self) -> Optional[np.ndarray]:
        return self.model.unpack(self.vector)[1]

    @property
    def size(self) -> int:
        return self.vector.size

    def observables(self, estimator: str = DEFAULT_ESTIMATOR) -> Observables:
        return self.model.observables(self.vector, estimator)


@dataclass
class EvolutionResult:
    state: ClusterState
    times: np.ndarray
    observables: list

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("time,p_e,n_cav,re_pair_coherence,im_pair_coherence\n")
            for t, o in zip(self.times, self.observables):
                pc = complex(o.pair_coherence)
                vals = (t, o.p_e, o.cavity_occupation, pc.real, pc.imag)
                fh.write(",".join(repr(float(v)) for v in vals) + "\n")


def _check(model: ClusterModel, y, config: HeomConfig, where: str):
    if not np.all(np.isfinite(y)):
        raise ConvergenceError(f"closure diverged{where}", drive=model.spec.drive)
    _, c = model.unpack(y)
    if c is not None and np.max(np.abs(c)) > DIVERGENCE_BOUND:
        raise ConvergenceError(f"pair correlations diverge{where}", drive=model.spec.drive)
    return check_density(model.rho(y), config.trace_tol, config.positivity_tol, where)


def propagate_cluster(model: ClusterModel, y0, t0: float, t1: float, config: HeomConfig,
                      n_samples: int = 2):
    """Integrate the closed equations; returns (times, states[n_samples, size])."""
    t_eval = np.linspace(t0, t1, max(n_samples, 2))
    sol = integrate(lambda t, y: model.rhs(y), y0, t0, t1, config, t_eval)
    ys = sol.y.T
    for t, y in zip(sol.t, ys):
        _check(model, y, config, f" at t={t:.4g}, E_d={model.spec.drive:.4g}")
    return sol.t, ys


def _window_deltas(model, ys, names, estimator):
    obs = [model.observables(y, estimator) for y in ys]
    vals = {"p_e": np.array([o.p_e for o in obs]),
            "n_cav": np.array([o.cavity_occupation for o in obs])}
    return {k: float(np.ptp(v)) for k, v in vals.items() if k in names}, obs


def evolve_ensemble(spec: EnsembleSpec, config: HeomConfig, criterion: Optional[SteadyStateCriterion] = None,
                    pair_depth: int = 1, closure: str = "gaussian", method: str = "newton",
                    estimator: str = DEFAULT_ESTIMATOR, model: Optional[ClusterModel] = None,
                    verify: bool = True) -> ClusterState:
    """Closed-state steady state of the ensemble.

    ``method="newton"`` solves the stationary closed equations directly from
    the uncoupled steady state and, with ``verify``, propagates one criterion
    window to confirm stationarity; ``"propagate"`` integrates from the ground
    state window by window until the criterion holds.
    """
    criterion = criterion or SteadyStateCriterion({"p_e": None, "n_cav": None}, window=20.0, tol=1e-6)
    names = list(criterion.observables)
    model = model or ClusterModel(spec, config.depth, pair_depth, closure, config.budget)
    if method == "newton":
        y0 = model.linear_steady_state()
        try:
            y, res, _ = model.newton(y0)
        except (ConvergenceError, NumericError):
            y = _propagate_until(model, model.initial(), config, criterion, names, estimator)[0]
            y, res, _ = model.newton(y)
        _check(model, y, config, f" at E_d={spec.drive:.4g}")
        deltas = {}
        if verify:
            _, ys = propagate_cluster(model, y, 0.0, criterion.window, config, criterion.samples_per_window)
            deltas, _ = _window_deltas(model, ys, names, estimator)
            if any(v >= criterion.tol for v in deltas.values()):
                raise ConvergenceError(
                    f"closed steady state at E_d={spec.drive:.4g} drifts under propagation", deltas=deltas)
        return ClusterState(model, y, np.inf, True, 0.0, deltas, res)
    if method != "propagate":
        raise ValidationError(f"unknown method {method!r}")
    y, t, deltas = _propagate_until(model, model.initial(), config, criterion, names, estimator)
    res = float(np.linalg.norm(model.rhs(y)))
    return ClusterState(model, y, t, True, t, deltas, res)


def _propagate_until(model, y, config, criterion, names, estimator):
    t = 0.0
    deltas = {}
    while t < config.max_time:
        _, ys = propagate_cluster(model, y, t, t + criterion.window, config, criterion.samples_per_window)
        t += criterion.window
        y = ys[-1]
        deltas, _ = _window_deltas(model, ys, names, estimator)
        if all(v < criterion.tol for v in deltas.values()):
            return y, t, deltas
    raise ConvergenceError(
        f"no closed steady state within max_time={config.max_time} at E_d={model.spec.drive:.4g}",
        deltas=deltas, drive=model.spec.drive)


def trajectory(spec: EnsembleSpec, config: HeomConfig, t_final: float, n_samples: int = 101,
               pair_depth: int = 1, closure: str = "gaussian", estimator: str = DEFAULT_ESTIMATOR) -> EvolutionResult:
    """Observables from the ground state up to ``t_final``."""
    model = ClusterModel(spec, config.depth, pair_depth, closure, config.budget)
    times, ys = propagate_cluster(model, model.initial(), 0.0, t_final, config, n_samples)
    obs = [model.observables(y, estimator) for y in ys]
    return EvolutionResult(ClusterState(model, ys[-1].copy(), float(times[-1])), times, obs)


def cavity_occupation(state: ClusterState, spec: Optional[EnsembleSpec] = None,
                      estimator: str = DEFAULT_ESTIMATOR) -> float:
    """<a^dag a> of a closed state; the default estimator assumes stationarity."""
    if spec is not None and spec is not state.model.spec:
        raise ValidationError("state belongs to a different ensemble")
    return state.model.cavity_occupation(state.vector, estimator)


def incoherent_reference(spec: EnsembleSpec, config: HeomConfig,
                         criterion: Optional[SteadyStateCriterion] = None, **kwargs) -> Observables:
    """Steady observables of the vibration-free, incoherently pumped ensemble."""
    if spec.mode != INCOHERENT:
        raise ValidationError("incoherent_reference needs an ensemble in incoherent mode")
    state = evolve_ensemble(spec, config, criterion, **kwargs)
    return state.observables(kwargs.get("estimator", DEFAULT_ESTIMATOR))
