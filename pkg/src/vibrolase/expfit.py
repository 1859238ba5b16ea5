"""Sum-of-exponentials models of bath correlation functions.

A correlation function is represented as alpha(t) ~ sum_i G_i exp(-W_i t)
with complex amplitudes G_i and complex rates W_i (Re W_i > 0).  Fits start
from a matrix-pencil estimate on uniformly spaced samples and are refined by
variable projection: the rates are optimised by nonlinear least squares while
the amplitudes are the linear least-squares solution for each rate iterate,
constrained so that sum_i G_i reproduces alpha(0) exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import least_squares

from .errors import ConvergenceError, ValidationError
from .spectral import BathCorrelationSamples

#: smallest admissible decay rate, relative to the sample window
RATE_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class ExponentialBathModel:
    amplitudes: np.ndarray
    rates: np.ndarray
    residual: float | None = field(default=None, compare=False)

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.amplitudes, dtype=complex))
        w = np.atleast_1d(np.asarray(self.rates, dtype=complex))
        if g.shape != w.shape or g.ndim != 1:
            raise ValidationError("amplitudes and rates must be 1-d and of equal length")
        if np.any(w.real <= 0):
            raise ValidationError("every exponential term must decay (Re W > 0)")
        object.__setattr__(self, "amplitudes", g)
        object.__setattr__(self, "rates", w)

    @classmethod
    def from_terms(cls, terms, residual=None) -> "ExponentialBathModel":
        terms = list(terms)
        if not terms:
            return cls(np.empty(0, complex), np.empty(0, complex), residual)
        g, w = zip(*terms)
        return cls(np.array(g, dtype=complex), np.array(w, dtype=complex), residual)

    @classmethod
    def empty(cls) -> "ExponentialBathModel":
        return cls.from_terms([])

    @property
    def K(self) -> int:
        return int(self.amplitudes.size)

    @property
    def terms(self) -> list[tuple[complex, complex]]:
        return list(zip(self.amplitudes.tolist(), self.rates.tolist()))

    def __call__(self, tau):
        return evaluate(self, tau)

    def scaled(self, factor: float) -> "ExponentialBathModel":
        return ExponentialBathModel(self.amplitudes * factor, self.rates, self.residual)

    def admissible(self, rtol: float = 1e-9) -> np.ndarray:
        """Terms that are a damped mode with real positive weight (pseudomode-representable)."""
        g = self.amplitudes
        return (g.real > 0) & (np.abs(g.imag) <= rtol * np.abs(g))

    def to_dict(self) -> dict:
        return {
            "terms": [
                {"g_re": float(g.real), "g_im": float(g.imag), "w_re": float(w.real), "w_im": float(w.imag)}
                for g, w in zip(self.amplitudes, self.rates)
            ]
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, data: dict) -> "ExponentialBathModel":
        return cls.from_terms(
            [(complex(t["g_re"], t["g_im"]), complex(t["w_re"], t["w_im"])) for t in data["terms"]]
        )

    @classmethod
    def from_json(cls, text: str) -> "ExponentialBathModel":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json(indent=2))

    @classmethod
    def load(cls, path) -> "ExponentialBathModel":
        with open(path) as fh:
            return cls.from_json(fh.read())


def evaluate(model: ExponentialBathModel, tau):
    """sum_i G_i exp(-W_i tau) for tau >= 0."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise ValidationError("exponential models are evaluated at tau >= 0")
    if model.K == 0:
        out = np.zeros(tau.shape, dtype=complex)
    else:
        out = np.exp(-np.multiply.outer(tau, model.rates)) @ model.amplitudes
    return out if out.ndim else complex(out)


def residual(model: ExponentialBathModel, samples: BathCorrelationSamples) -> float:
    """Relative L2 misfit ||model - alpha|| / ||alpha|| over the sample window."""
    if samples.tau_grid.size == 0:
        raise ValidationError("empty sample window")
    ref = samples.alpha
    norm = np.linalg.norm(ref)
    diff = np.linalg.norm(evaluate(model, samples.tau_grid) - ref)
    if norm == 0:
        return 0.0 if diff == 0 else np.inf
    return float(diff / norm)


# ---------------------------------------------------------------------------
# fitting


def _uniform(samples: BathCorrelationSamples, max_points: int):
    tau, alpha = samples.tau_grid, samples.alpha
    h = np.diff(tau)
    if not np.allclose(h, h[0], rtol=1e-9, atol=0):
        n = min(max(tau.size, 64), max_points)
        grid = np.linspace(tau[0], tau[-1], n)
        alpha = CubicSpline(tau, alpha.real)(grid) + 1j * CubicSpline(tau, alpha.imag)(grid)
        tau = grid
    step = max(1, int(np.ceil(tau.size / max_points)))
    return tau[::step], alpha[::step]


def matrix_pencil(tau, alpha, K: int):
    """Rates of a K-term exponential model from uniformly spaced samples."""
    n = tau.size
    dt = tau[1] - tau[0]
    L = max(K, n // 3)
    Y = np.lib.stride_tricks.sliding_window_view(alpha, L + 1)
    _, _, vh = np.linalg.svd(Y, full_matrices=False)
    # rows of vh span the signal vectors z**j themselves (no conjugate)
    V = vh[:K].T
    V1, V2 = V[:-1], V[1:]
    z = np.linalg.eigvals(np.linalg.pinv(V1) @ V2)
    z = np.where(np.abs(z) == 0, 1e-300, z)
    return -np.log(z) / dt


def _amplitudes(tau, alpha, rates):
    basis = np.exp(-np.multiply.outer(tau, rates))
    K = rates.size
    if tau[0] != 0 or K == 1:
        g, *_ = np.linalg.lstsq(basis, alpha, rcond=None)
        if tau[0] == 0:
            g = np.array([alpha[0]], dtype=complex)
        return g, basis
    # sum(G) = alpha(0) exactly: g = alpha(0)/K + N c with N spanning the complement of ones
    q, _ = np.linalg.qr(np.ones((K, 1)), mode="complete")
    null = q[:, 1:]
    g0 = np.full(K, alpha[0] / K, dtype=complex)
    c, *_ = np.linalg.lstsq(basis @ null, alpha - basis @ g0, rcond=None)
    return g0 + null @ c, basis


def _reflect(rates, floor):
    rates = np.asarray(rates, dtype=complex)
    return np.where(rates.real <= floor, floor + 1j * rates.imag, rates)


def _refine(tau, alpha, rates, floor, max_nfev):
    K = rates.size
    norm = np.linalg.norm(alpha)
    dt = tau[1] - tau[0]
    # log of the decay rate keeps Re W positive; bounds keep rates resolvable on the grid
    lb = np.concatenate([np.full(K, np.log(floor)), np.full(K, -np.pi / dt)])
    ub = np.concatenate([np.full(K, np.log(10.0 / dt)), np.full(K, np.pi / dt)])
    x0 = np.concatenate([np.log(np.maximum(rates.real, floor)), rates.imag])
    x0 = np.clip(x0, lb + 1e-9 * np.abs(lb), ub - 1e-9 * np.abs(ub))

    def unpack(x):
        return np.exp(x[:K]) + 1j * x[K:]

    def fun(x):
        g, basis = _amplitudes(tau, alpha, unpack(x))
        r = (basis @ g - alpha) / norm
        return np.concatenate([r.real, r.imag])

    sol = least_squares(fun, x0, bounds=(lb, ub), method="trf", max_nfev=max_nfev,
                        xtol=1e-14, ftol=1e-14, gtol=1e-14)
    return unpack(sol.x)


def _model(tau, alpha, rates):
    g, _ = _amplitudes(tau, alpha, rates)
    order = np.lexsort((rates.real, rates.imag))
    return ExponentialBathModel(g[order], rates[order])


def fit_exponentials(samples: BathCorrelationSamples, K: int, *, tol: float | None = None,
                     warm_start: ExponentialBathModel | None = None, restarts: int = 4,
                     seed: int = 0, max_points: int = 1500, max_nfev: int = 400) -> ExponentialBathModel:
    """Fit alpha(t) with K complex exponentials.

    The returned model carries its residual over the full sample window.  If
    ``tol`` is given and no candidate reaches it, :class:`ConvergenceError`
    is raised with the best model and residual in its diagnostics.
    ``warm_start`` (a fit with fewer terms) seeds the rates, the missing terms
    being estimated from the remaining misfit; this makes the residual
    non-increasing in K.
    """
    if K < 1:
        raise ValidationError("K must be at least 1")
    tau, alpha = _uniform(samples, max_points)
    if 2 * K + 1 > tau.size:
        raise ValidationError(f"K={K} needs at least {2 * K + 1} samples, got {tau.size}")
    floor = RATE_FLOOR / max(tau[-1] - tau[0], 1e-300)
    floor = max(floor, 1e-12)

    candidates = []
    if warm_start is not None and 0 < warm_start.K <= K:
        rest = alpha - evaluate(warm_start, tau)
        extra = matrix_pencil(tau, rest, K - warm_start.K) if K > warm_start.K else np.empty(0)
        candidates.append(np.concatenate([warm_start.rates, extra]))
    candidates.append(matrix_pencil(tau, alpha, K))

    rng = np.random.default_rng(seed)
    best = None
    best_res = np.inf
    attempt = 0
    while attempt < len(candidates) + restarts:
        if attempt < len(candidates):
            start = candidates[attempt]
        else:
            base = best.rates if best is not None else candidates[-1]
            jitter = rng.normal(size=K) * 0.2 + 1j * rng.normal(size=K) * 0.05
            start = base * (1 + jitter)
        attempt += 1
        rates = _refine(tau, alpha, _reflect(start, floor), floor, max_nfev)
        model = _model(tau, alpha, _reflect(rates, floor))
        res = residual(model, samples)
        if res < best_res:
            best, best_res = model, res
        if tol is not None and best_res <= tol and attempt >= len(candidates):
            break
    best = ExponentialBathModel(best.amplitudes, best.rates, best_res)
    if tol is not None and best_res > tol:
        raise ConvergenceError(
            f"K={K} fit reached residual {best_res:.3e} > tol={tol:.1e}", model=best, residual=best_res
        )
    return best
