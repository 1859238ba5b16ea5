"""Effective spectral density and bath correlation functions.

All vibrational modes of a molecule, each damped by an ohmic environment, are
folded into one bath with spectral density

    J_eff(w) = sum_l g_l^2 L_l(w),    g_l^2 = w_l^2 S_l / 2,

where L_l is a Lorentzian of half width pi J_E(w_l) centred on w_l and
normalised on the support of the frequency grid, so that the integrated weight
of every mode is exactly g_l^2.  The zero-temperature correlation function is
the half-line Fourier transform alpha(t) = int_0^inf J(w) exp(-i w t) dw.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.signal import czt, find_peaks

from .errors import NumericError, ValidationError
from .units import HARTREE_CM
from .vibdata import MoleculeSpec, OhmicEnvironment

#: linewidths of margin required above the highest mode
GRID_MARGIN_WIDTHS = 10.0
#: margin of the default grid; truncated Lorentzian tails are not exponential, so keep them small
DEFAULT_MARGIN_WIDTHS = 150.0


@dataclass(frozen=True, eq=False)
class SpectralDensity:
    """Tabulated J(w) with an optional closed form for refinement.

    ``unit_cm`` is the size of one frequency unit in cm^-1 (Hartree by
    default).  ``components`` holds the (centre, weight, half width) of the
    Lorentzians a density was built from, when known.
    """

    grid: np.ndarray
    values: np.ndarray
    func: Optional[Callable[[np.ndarray], np.ndarray]] = None
    unit_cm: float = HARTREE_CM
    components: Optional[np.ndarray] = None
    label: str = ""

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if grid.ndim != 1 or grid.shape != values.shape:
            raise ValidationError("grid and values must be 1-d arrays of equal length")
        if grid.size < 3:
            raise ValidationError("a spectral density needs at least 3 grid points")
        if np.any(np.diff(grid) <= 0):
            raise ValidationError("frequency grid must be strictly increasing")
        if grid[0] < 0:
            raise ValidationError("spectral densities live on the positive half line")
        if np.any(values < 0):
            raise ValidationError("spectral density must be non-negative")
        grid.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @property
    def omega_max(self) -> float:
        return float(self.grid[-1])

    @property
    def is_uniform(self) -> bool:
        h = np.diff(self.grid)
        return bool(np.allclose(h, h[0], rtol=1e-9, atol=0))

    def evaluate(self, omega) -> np.ndarray:
        omega = np.asarray(omega, dtype=float)
        if self.func is not None:
            return np.clip(self.func(omega), 0.0, None)
        return np.interp(omega, self.grid, self.values, left=0.0, right=0.0)

    def resample(self, grid) -> "SpectralDensity":
        grid = np.asarray(grid, dtype=float)
        return SpectralDensity(grid, self.evaluate(grid), self.func, self.unit_cm,
                               self.components, self.label)

    def refined(self, factor: int = 2) -> "SpectralDensity":
        """Same support, ``factor`` times denser uniform grid."""
        n = (self.grid.size - 1) * factor + 1
        return self.resample(np.linspace(self.grid[0], self.grid[-1], n))

    def integral(self) -> float:
        """int J dw: :func:`bath_correlation` at t = 0, refined when J has a closed form."""
        return float(bath_correlation(self, np.zeros(1)).alpha[0].real)

    def peaks(self, rel_prominence: float = 0.1) -> np.ndarray:
        """Frequencies of local maxima with prominence >= rel_prominence * max(J)."""
        vmax = self.values.max()
        if vmax <= 0:
            return np.empty(0)
        idx, _ = find_peaks(self.values, prominence=rel_prominence * vmax)
        return self.grid[idx]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["omega", "J"])
            for x, y in zip(self.grid, self.values):
                w.writerow([repr(float(x)), repr(float(y))])


@dataclass(frozen=True, eq=False)
class BathCorrelationSamples:
    tau_grid: np.ndarray
    alpha: np.ndarray
    error_estimate: float = 0.0

    def __post_init__(self):
        tau = np.asarray(self.tau_grid, dtype=float)
        alpha = np.asarray(self.alpha, dtype=complex)
        if tau.ndim != 1 or tau.shape != alpha.shape:
            raise ValidationError("tau grid and samples must have equal length")
        if np.any(np.diff(tau) <= 0):
            raise ValidationError("tau grid must be strictly increasing")
        if tau.size and tau[0] < 0:
            raise ValidationError("only tau >= 0 is stored")
        object.__setattr__(self, "tau_grid", tau)
        object.__setattr__(self, "alpha", alpha)

    def at(self, tau) -> np.ndarray:
        """Samples at arbitrary tau, using alpha(-t) = conj(alpha(t))."""
        tau = np.asarray(tau, dtype=float)
        t = np.abs(tau)
        re = np.interp(t, self.tau_grid, self.alpha.real)
        im = np.interp(t, self.tau_grid, self.alpha.imag)
        return np.where(tau < 0, re - 1j * im, re + 1j * im)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "re_alpha", "im_alpha"])
            for t, a in zip(self.tau_grid, self.alpha):
                w.writerow([repr(float(t)), repr(float(a.real)), repr(float(a.imag))])


@dataclass(frozen=True)
class CavityBathModel:
    """Lossy cavity mode seen by the emitters as a bath.

    ``omega_cav`` is the cavity frequency in the frame rotating at the drive,
    i.e. the detuning omega_cav - omega_0.
    """

    g_cav: float
    kappa: float
    omega_cav: float = 0.0

    def __post_init__(self):
        if self.g_cav < 0:
            raise ValidationError("g_cav must be non-negative")
        if not self.kappa > 0:
            raise ValidationError("cavity loss rate must be positive")

    def as_exponential(self):
        """Single-term exponential model, g^2 exp(-(kappa + i omega) t)."""
        from .expfit import ExponentialBathModel

        return ExponentialBathModel.from_terms([(self.g_cav**2, self.kappa + 1j * self.omega_cav)])


def cavity_bcf(model: CavityBathModel, tau):
    """g_cav^2 exp(-i omega_cav tau - kappa tau) for tau >= 0."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise ValidationError("cavity_bcf is defined for tau >= 0")
    out = model.g_cav**2 * np.exp(-(1j * model.omega_cav + model.kappa) * tau)
    return out if out.ndim else complex(out)


def mode_lorentzians(centres, weights, widths, lo: float, hi: float):
    """Closed form sum of Lorentzians, each normalised to its weight on [lo, hi]."""
    centres = np.asarray(centres, dtype=float)
    weights = np.asarray(weights, dtype=float)
    widths = np.asarray(widths, dtype=float)
    norm = (np.arctan((hi - centres) / widths) - np.arctan((lo - centres) / widths)) / np.pi
    amp = weights * widths / (np.pi * norm)

    def func(omega):
        omega = np.asarray(omega, dtype=float)
        flat = omega.reshape(-1)
        out = np.zeros(flat.shape)
        # chunk over frequencies to bound memory for long mode lists
        step = max(1, 2_000_000 // max(1, centres.size))
        for i in range(0, flat.size, step):
            w = flat[i:i + step, None]
            out[i:i + step] = np.sum(amp / ((w - centres) ** 2 + widths**2), axis=1)
        out[(flat < lo) | (flat > hi)] = 0.0
        return out.reshape(omega.shape)

    return func


def mode_parameters(spec: MoleculeSpec, env: OhmicEnvironment, unit_cm: float = HARTREE_CM):
    """(centre, weight, half width) of every mode in units of ``unit_cm``."""
    w = spec.frequencies_cm / unit_cm
    weight = w**2 * spec.huang_rhys / 2.0
    width = env.linewidth(w, unit_cm)
    return np.column_stack([w, weight, width])


def effective_density(spec: MoleculeSpec, env: OhmicEnvironment, grid,
                      unit_cm: float = HARTREE_CM) -> SpectralDensity:
    """Broadened effective spectral density of all modes of ``spec``.

    ``grid`` is in units of ``unit_cm`` (Hartree by default).  It must start
    at or below the lowest mode and extend ten linewidths past the highest.
    """
    grid = np.asarray(grid, dtype=float)
    comps = mode_parameters(spec, env, unit_cm)
    centres, weights, widths = comps.T
    if grid[0] < 0 or grid[0] > centres.min():
        raise ValidationError("frequency grid must start in [0, lowest mode frequency]")
    need = float(np.max(centres + GRID_MARGIN_WIDTHS * widths))
    if grid[-1] < need:
        raise ValidationError(
            f"frequency grid ends at {grid[-1]:.6g}, needs to reach {need:.6g} "
            f"({GRID_MARGIN_WIDTHS:g} linewidths past the highest mode)"
        )
    func = mode_lorentzians(centres, weights, widths, grid[0], grid[-1])
    return SpectralDensity(grid, func(grid), func, unit_cm, comps, label=spec.name)


def default_grid(spec: MoleculeSpec, env: OhmicEnvironment, unit_cm: float = HARTREE_CM,
                 points_per_width: float = 8.0, max_points: int = 400_001,
                 margin_widths: float = DEFAULT_MARGIN_WIDTHS) -> np.ndarray:
    """Uniform grid on [0, w_max + margin] resolving the narrowest mode."""
    if margin_widths < GRID_MARGIN_WIDTHS:
        raise ValidationError(f"grid margin must be at least {GRID_MARGIN_WIDTHS:g} linewidths")
    centres, _, widths = mode_parameters(spec, env, unit_cm).T
    hi = float(np.max(centres + margin_widths * widths))
    n = int(np.ceil(hi / (widths.min() / points_per_width))) + 1
    n = min(max(n, 1001), max_points)
    return np.linspace(0.0, hi, n)


# ---------------------------------------------------------------------------
# quadrature


def _hat_weights(u):
    """(e^u - 1 - u)/u^2 and (e^-u - 1 + u)/u^2 with a series near u = 0."""
    u = np.asarray(u, dtype=complex)
    small = np.abs(u) < 1e-3
    us = np.where(small, 1.0, u)
    right = np.where(small, 0.5 + u / 6 + u**2 / 24 + u**3 / 120, (np.exp(us) - 1 - us) / us**2)
    left = np.where(small, 0.5 - u / 6 + u**2 / 24 - u**3 / 120, (np.exp(-us) - 1 + us) / us**2)
    return right, left


def _filon_uniform(omega, values, tau):
    """int of the piecewise-linear interpolant of J times exp(-i w t), uniform grid."""
    h = omega[1] - omega[0]
    tau = np.asarray(tau, dtype=float)
    u = -1j * tau * h
    right, left = _hat_weights(u)
    full = right + left
    if tau.size > 1 and np.allclose(np.diff(tau), tau[1] - tau[0], rtol=1e-10, atol=0):
        dt = tau[1] - tau[0]
        # sum_i J_i exp(-i tau_k w_i) as a chirp-z transform
        s = czt(values.astype(complex), m=tau.size, w=np.exp(-1j * h * dt), a=np.exp(1j * h * tau[0]))
        s = s * np.exp(-1j * tau * omega[0])
    else:
        s = np.array([np.sum(values * np.exp(-1j * t * omega)) for t in tau])
    out = h * full * s
    out -= h * left * values[0] * np.exp(-1j * tau * omega[0])
    out -= h * right * values[-1] * np.exp(-1j * tau * omega[-1])
    return out


def _filon_general(omega, values, tau, chunk: int = 64):
    h = np.diff(omega)
    out = np.empty(tau.size, dtype=complex)
    for k in range(0, tau.size, chunk):
        t = tau[k:k + chunk, None]
        u = -1j * t * h[None, :]
        right, left = _hat_weights(u)
        e = np.exp(-1j * t * omega[None, :])
        out[k:k + chunk] = np.sum(h * (values[:-1] * e[:, :-1] * right + values[1:] * e[:, 1:] * left), axis=1)
    return out


def _filon(omega, values, tau):
    tau = np.asarray(tau, dtype=float)
    h = np.diff(omega)
    if np.allclose(h, h[0], rtol=1e-9, atol=0):
        return _filon_uniform(omega, values, tau)
    return _filon_general(omega, values, tau)


def _richardson(J: SpectralDensity, tau):
    """Richardson-extrapolated Filon quadrature and its error estimate."""
    omega, values = J.grid, J.values
    fine = _filon(omega, values, tau)
    if omega.size % 2 == 0:
        # drop the last point so that every other point is a valid coarse grid
        omega, values = omega[:-1], values[:-1]
        fine = _filon(omega, values, tau)
    coarse = _filon(omega[::2], values[::2], tau)
    extrap = (4 * fine - coarse) / 3
    err = np.abs(fine - coarse) / 3
    return extrap, err


def bath_correlation(J: SpectralDensity, tau_grid, rtol: float = 1e-6,
                     max_refinements: int = 4) -> BathCorrelationSamples:
    """Zero-temperature correlation function alpha(t) = int J(w) exp(-i w t) dw.

    The integrand is integrated exactly for the piecewise-linear interpolant of
    J and Richardson-extrapolated.  When J has a closed form the grid is
    doubled until two successive estimates agree to ``rtol * alpha(0)``;
    otherwise the Richardson error estimate on the stored grid must meet the
    same bound.
    """
    tau = np.asarray(tau_grid, dtype=float)
    if tau.size == 0 or tau[0] != 0:
        raise ValidationError("tau grid must start at 0")
    alpha, err = _richardson(J, tau)
    scale = abs(alpha[0].real)
    if scale == 0:
        return BathCorrelationSamples(tau, np.zeros(tau.size, dtype=complex))
    if J.func is None:
        worst = float(err.max() / scale)
        if worst > rtol:
            raise NumericError(
                f"quadrature error estimate {worst:.2e} exceeds rtol={rtol:.1e}; "
                "refine the frequency grid"
            )
        return BathCorrelationSamples(tau, alpha, worst)
    current = J
    for _ in range(max_refinements):
        current = current.refined(2)
        new, _ = _richardson(current, tau)
        worst = float(np.max(np.abs(new - alpha)) / scale)
        alpha = new
        if worst <= rtol:
            return BathCorrelationSamples(tau, alpha, worst)
    raise NumericError(
        f"bath correlation did not converge: last change {worst:.2e} > rtol={rtol:.1e} "
        f"after {max_refinements} grid doublings (final grid {current.grid.size} points)"
    )


def default_tau_grid(J: SpectralDensity, points_per_period: int = 20, floor: float = 1e-4,
                     t_max: Optional[float] = None) -> np.ndarray:
    """Uniform tau grid resolving the highest peak and covering the decay of alpha.

    The window is extended until |alpha(t)| < floor * alpha(0) over its last
    tenth (or up to ``t_max``).
    """
    peaks = J.peaks(0.01)
    w_top = float(peaks.max()) if peaks.size else float(J.grid[np.argmax(J.values)])
    w_top = max(w_top, 1e-12)
    dt = 2 * np.pi / (points_per_period * w_top)
    span = 20 * dt
    total = J.integral()
    while True:
        tau = np.arange(0.0, span + dt / 2, dt)
        alpha, _ = _richardson(J, tau)
        tail = np.abs(alpha[int(0.9 * tau.size):])
        if tail.max() < floor * abs(total) or (t_max is not None and span >= t_max):
            return tau
        span *= 2
        if span > 1e6 * dt:
            raise NumericError("correlation function does not decay within the search window")


def correlation_samples(J: SpectralDensity, rtol: float = 1e-6, **grid_kwargs) -> BathCorrelationSamples:
    """:func:`bath_correlation` on :func:`default_tau_grid`."""
    return bath_correlation(J, default_tau_grid(J, **grid_kwargs), rtol=rtol)
