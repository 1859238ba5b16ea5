"""Two-level operators and superoperator helpers.

Density matrices are vectorised row-major (``rho.reshape(-1)``), so that
``vec(A @ X @ B) == kron(A, B.T) @ vec(X)``.

The GKSL dissipator uses the convention

    D[L] rho = 2 L rho L^dag - {L^dag L, rho}

everywhere in this package (HEOM, many-body closure and brute-force oracle).
With this convention ``gamma * D[sigma_-]`` depopulates the excited state at
rate ``2 * gamma`` and damps the coherence at rate ``gamma``.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

# basis: index 0 = ground |g>, index 1 = excited |e>
SIGMA_PLUS = np.array([[0, 0], [1, 0]], dtype=complex)
SIGMA_MINUS = SIGMA_PLUS.T.copy()
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[-1, 0], [0, 1]], dtype=complex)
PROJ_E = SIGMA_PLUS @ SIGMA_MINUS
PROJ_G = SIGMA_MINUS @ SIGMA_PLUS
GROUND = np.array([[1, 0], [0, 0]], dtype=complex)


def dag(a):
    return a.conj().T


def _sparse(a):
    return sp.csr_matrix(a, dtype=complex)


def spre(a):
    """Superoperator of left multiplication, X -> A X."""
    a = _sparse(a)
    return sp.kron(a, sp.identity(a.shape[0], dtype=complex, format="csr"), format="csr")


def spost(a):
    """Superoperator of right multiplication, X -> X A."""
    a = _sparse(a)
    return sp.kron(sp.identity(a.shape[0], dtype=complex, format="csr"), a.T, format="csr")


def commutator(a):
    """Superoperator X -> -i [A, X]."""
    return (-1j * (spre(a) - spost(a))).tocsr()


def dissipator(op, rate: float = 1.0):
    """Superoperator of ``rate * D[op]`` with D[L]rho = 2 L rho L^dag - {L^dag L, rho}."""
    op = _sparse(op)
    opd = op.conj().T
    n = op.shape[0]
    eye = sp.identity(n, dtype=complex, format="csr")
    ldl = (opd @ op).tocsr()
    d = 2.0 * sp.kron(op, op.conj(), format="csr") - sp.kron(ldl, eye) - sp.kron(eye, ldl.T)
    return (rate * d).tocsr()


def apply_dissipator(op, rho, rate: float = 1.0):
    """Dense action of ``rate * D[op]`` on a density matrix."""
    opd = dag(op)
    ldl = opd @ op
    return rate * (2.0 * op @ rho @ opd - ldl @ rho - rho @ ldl)


def liouvillian(hamiltonian, lindblad_terms=()):
    """Sparse generator -i[H, .] + sum_k gamma_k D[L_k]."""
    gen = commutator(hamiltonian)
    for op, rate in lindblad_terms:
        if rate:
            gen = gen + dissipator(op, rate)
    return gen.tocsr()


def is_hermitian(a, atol: float = 1e-12) -> bool:
    a = np.asarray(a)
    return a.shape[0] == a.shape[1] and np.allclose(a, dag(a), atol=atol, rtol=0)


def destroy(n: int) -> np.ndarray:
    """Annihilation operator truncated to ``n`` levels."""
    return np.diag(np.sqrt(np.arange(1, n, dtype=float)), 1).astype(complex)
