"""Drive-strength sweeps, spectral edits and resonance analysis.

A scan runs the full pipeline once per configuration: mode table -> broadened
effective density (in units of E_max) -> correlation function -> K-term
exponential fit, and then one independent steady-state solve per (mode, N,
E_d) row.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.signal import find_peaks, peak_prominences

from .errors import ValidationError
from .expfit import ExponentialBathModel, fit_exponentials
from .heom import HeomConfig, SteadyStateCriterion
from .manybody import COHERENT, DEFAULT_ESTIMATOR, INCOHERENT, EnsembleSpec, evolve_ensemble
from .spectral import (
    BathCorrelationSamples,
    CavityBathModel,
    SpectralDensity,
    correlation_samples,
    default_grid,
    effective_density,
)
from .units import EMAX_FRACTION
from .vibdata import MoleculeSpec, OhmicEnvironment, load_molecule, load_shipped_molecule

log = logging.getLogger(__name__)

MAX_DRIVE = 1.2
SCAN_COLUMNS = ("mode", "n_emitters", "drive", "p_e", "n_cav", "re_pair_coherence",
                "im_pair_coherence", "converged", "convergence_time", "residual", "error")


class ScanError(RuntimeError):
    """Every row of a scan failed."""

    def __init__(self, message, errors=()):
        self.errors = list(errors)
        super().__init__(message)


def default_drive_grid(n: int = 60, lo: float = 0.02, hi: float = MAX_DRIVE) -> np.ndarray:
    """Geometric grid on [lo, hi]: dense at small drive, in units of E_max."""
    return np.geomspace(lo, hi, n)


# ---------------------------------------------------------------------------
# spectral edits


@dataclass(frozen=True)
class SpectralEdit:
    """Remove (``shift=None``) or translate by ``shift`` the peak mass on [lo, hi]."""

    lo: float
    hi: float
    shift: Optional[float] = None

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ValidationError(f"empty edit interval [{self.lo}, {self.hi}]")

    @classmethod
    def from_dict(cls, data: dict) -> "SpectralEdit":
        if "remove_peak" in data:
            lo, hi = data["remove_peak"]
            return cls(float(lo), float(hi))
        if "shift_peak" in data:
            (lo, hi), delta = data["shift_peak"]
            return cls(float(lo), float(hi), float(delta))
        raise ValidationError("spectral_edit needs 'remove_peak' or 'shift_peak'")

    def to_dict(self) -> dict:
        if self.shift is None:
            return {"remove_peak": [self.lo, self.hi]}
        return {"shift_peak": [[self.lo, self.hi], self.shift]}


def edit_spectrum(J: SpectralDensity, edit: SpectralEdit) -> SpectralDensity:
    """Apply a peak removal or shift to ``J`` (frequencies in J's units).

    On [lo, hi] the density is split into the straight baseline joining
    J(lo) and J(hi) plus the (non-negative) peak mass above it.  Removal keeps
    only the baseline; a shift moves the peak mass to [lo + d, hi + d].
    Outside the interval and its image, J is untouched.
    """
    lo, hi = edit.lo, edit.hi
    grid = J.grid
    inside = (grid >= lo) & (grid <= hi)
    if not inside.any() or lo < grid[0] or hi > grid[-1]:
        raise ValidationError(f"edit interval [{lo}, {hi}] does not lie within the frequency grid")
    if edit.shift is not None and (lo + edit.shift < grid[0] or hi + edit.shift > grid[-1]):
        raise ValidationError("shifted interval leaves the frequency grid")
    base_fn = J.func if J.func is not None else J.evaluate
    j_lo, j_hi = float(base_fn(np.array([lo]))[0]), float(base_fn(np.array([hi]))[0])

    def baseline(w):
        return j_lo + (j_hi - j_lo) * (w - lo) / (hi - lo)

    def mass(w):
        w = np.asarray(w, dtype=float)
        m = np.clip(base_fn(w) - baseline(w), 0.0, None)
        return np.where((w >= lo) & (w <= hi), m, 0.0)

    def func(w):
        w = np.asarray(w, dtype=float)
        out = base_fn(w) - mass(w)
        if edit.shift is not None:
            out = out + mass(w - edit.shift)
        return out

    label = f"{J.label} [{'shift' if edit.shift is not None else 'remove'} {lo:g}-{hi:g}]"
    values = np.clip(func(grid), 0.0, None)
    return SpectralDensity(grid, values, func if J.func is not None else None, J.unit_cm, None, label)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ScanConfig:
    """Everything one scan needs.

    Energies and rates (``g_cav``, ``kappa``, ``cavity_detuning``,
    ``gamma_down``, the drive grid) are in units of ``E_max``, which defaults
    to 0.1 times the vertical gap of the molecule.
    """

    molecule_path: Optional[str] = None
    adiabatic_gap_cm: Optional[float] = None
    ohmic: OhmicEnvironment = field(default_factory=OhmicEnvironment)
    e_max_cm: Optional[float] = None
    g_cav: float = 0.2
    kappa: float = 3.3
    cavity_detuning: float = 0.0
    gamma_down: float = 1e-3
    drive_grid: Sequence[float] = field(default_factory=lambda: tuple(default_drive_grid()))
    n_values: Sequence[int] = (10,)
    modes: Sequence[str] = (COHERENT,)
    spectral_edit: Optional[SpectralEdit] = None
    n_terms: int = 5
    fit_tol: Optional[float] = None
    depth: int = 3
    pair_depth: int = 1
    closure: str = "gaussian"
    estimator: str = DEFAULT_ESTIMATOR
    method: str = "newton"
    verify: bool = False
    window: float = 20.0
    tol: float = 1e-6
    workers: int = 1
    seed: int = 0
    output: Optional[str] = None

    def __post_init__(self):
        grid = np.asarray(self.drive_grid, dtype=float)
        if grid.ndim != 1 or grid.size == 0:
            raise ValidationError("drive_grid must be a non-empty list")
        # zero drive is admitted as the trivial reference point
        if np.any(grid < 0) or np.any(grid > MAX_DRIVE + 1e-12):
            raise ValidationError(f"drive_grid must lie in [0, {MAX_DRIVE}] (units of E_max)")
        self.drive_grid = tuple(float(x) for x in grid)
        self.n_values = tuple(int(n) for n in self.n_values)
        if any(n < 1 for n in self.n_values):
            raise ValidationError("n_values must be positive")
        self.modes = tuple(self.modes)
        for m in self.modes:
            if m not in (COHERENT, INCOHERENT):
                raise ValidationError(f"unknown mode {m!r}")
        if self.g_cav < 0 or self.kappa <= 0 or self.gamma_down < 0:
            raise ValidationError("need g_cav >= 0, kappa > 0, gamma_down >= 0")
        if self.n_terms < 1:
            raise ValidationError("n_terms must be at least 1")

    def heom_config(self) -> HeomConfig:
        return HeomConfig(depth=self.depth)

    def criterion(self) -> SteadyStateCriterion:
        return SteadyStateCriterion({"p_e": None, "n_cav": None}, window=self.window, tol=self.tol)

    def cavity(self) -> CavityBathModel:
        return CavityBathModel(self.g_cav, self.kappa, self.cavity_detuning)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ohmic"] = {"coupling": self.ohmic.coupling, "cutoff_cm": self.ohmic.cutoff_cm}
        d["spectral_edit"] = self.spectral_edit.to_dict() if self.spectral_edit else None
        d["drive_grid"] = list(self.drive_grid)
        d["n_values"] = list(self.n_values)
        d["modes"] = list(self.modes)
        return d

    @classmethod
    def from_dict(cls, data: dict, base_dir: Optional[Path] = None) -> "ScanConfig":
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        if "ohmic" in data and data["ohmic"] is not None:
            data["ohmic"] = OhmicEnvironment(**data["ohmic"])
        if data.get("spectral_edit") is not None:
            data["spectral_edit"] = SpectralEdit.from_dict(data["spectral_edit"])
        if isinstance(data.get("drive_grid"), dict):
            data["drive_grid"] = tuple(default_drive_grid(**data["drive_grid"]))
        path = data.get("molecule_path")
        if path is not None and base_dir is not None and not Path(path).is_absolute():
            data["molecule_path"] = str(base_dir / path)
        try:
            return cls(**data)
        except TypeError as exc:
            raise ValidationError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ScanConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ValidationError("config must be a JSON object")
        return cls.from_dict(data, base_dir=path.parent)


# ---------------------------------------------------------------------------
# bath pipeline


@dataclass
class BathSetup:
    molecule: MoleculeSpec
    e_max_cm: float
    density: SpectralDensity
    samples: BathCorrelationSamples
    model: ExponentialBathModel


def load_config_molecule(config: ScanConfig) -> MoleculeSpec:
    if config.molecule_path is None:
        mol = load_shipped_molecule()
        if config.adiabatic_gap_cm is not None:
            mol = MoleculeSpec(config.adiabatic_gap_cm, mol.modes, name=mol.name)
        return mol
    return load_molecule(config.molecule_path, config.adiabatic_gap_cm)


def prepare_bath(config: ScanConfig, molecule: Optional[MoleculeSpec] = None) -> BathSetup:
    """Effective density, correlation samples and the exponential fit for a scan."""
    mol = molecule or load_config_molecule(config)
    e_max = config.e_max_cm or EMAX_FRACTION * mol.vertical_gap_cm
    grid = default_grid(mol, config.ohmic, unit_cm=e_max)
    edit = config.spectral_edit
    if edit is not None and edit.shift is not None and edit.hi + edit.shift > grid[-1]:
        step = grid[1] - grid[0]
        grid = np.arange(0.0, edit.hi + edit.shift + 10 * (edit.hi - edit.lo) + step, step)
    J = effective_density(mol, config.ohmic, grid, unit_cm=e_max)
    if edit is not None:
        J = edit_spectrum(J, edit)
    samples = correlation_samples(J)
    model = fit_exponentials(samples, config.n_terms, tol=config.fit_tol, seed=config.seed)
    return BathSetup(mol, e_max, J, samples, model)


# ---------------------------------------------------------------------------
# results


@dataclass
class ScanRow:
    mode: str
    n_emitters: int
    drive: float
    p_e: float = np.nan
    n_cav: float = np.nan
    re_pair_coherence: float = np.nan
    im_pair_coherence: float = np.nan
    converged: bool = False
    convergence_time: float = np.nan
    residual: float = np.nan
    error: str = ""


@dataclass
class ScanResult:
    rows: list
    config: Optional[ScanConfig] = None
    bath: Optional[BathSetup] = None

    @property
    def failures(self) -> list:
        return [r for r in self.rows if not r.converged]

    def curve(self, n_emitters: int, mode: str = COHERENT):
        """(drive, p_e, n_cav) arrays of one (N, mode) sweep, in grid order."""
        rows = [r for r in self.rows if r.n_emitters == n_emitters and r.mode == mode]
        if not rows:
            raise ValidationError(f"no rows for N={n_emitters}, mode={mode}")
        e = np.array([r.drive for r in rows])
        return e, np.array([r.p_e for r in rows]), np.array([r.n_cav for r in rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SCAN_COLUMNS)
            for r in self.rows:
                w.writerow([r.mode, r.n_emitters, repr(float(r.drive)), repr(float(r.p_e)), repr(float(r.n_cav)),
                            repr(float(r.re_pair_coherence)), repr(float(r.im_pair_coherence)),
                            int(r.converged), repr(float(r.convergence_time)), repr(float(r.residual)),
                            r.error])

    @classmethod
    def read_csv(cls, path) -> "ScanResult":
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append(ScanRow(
                    rec["mode"], int(rec["n_emitters"]), float(rec["drive"]), float(rec["p_e"]),
                    float(rec["n_cav"]), float(rec["re_pair_coherence"]), float(rec["im_pair_coherence"]),
                    bool(int(rec["converged"])), float(rec["convergence_time"]), float(rec["residual"]),
                    rec["error"]))
        return cls(rows)


def _solve_row(job) -> ScanRow:
    mode, n, drive, bath_model, config = job
    row = ScanRow(mode, n, drive)
    try:
        spec = EnsembleSpec(n, drive, config.cavity(),
                            bath_model if mode == COHERENT else ExponentialBathModel.empty(),
                            config.gamma_down, mode)
        state = evolve_ensemble(spec, config.heom_config(), config.criterion(), config.pair_depth,
                                config.closure, config.method, config.estimator, verify=config.verify)
        obs = state.observables(config.estimator)
        obs.check()
        row.p_e, row.n_cav = obs.p_e, obs.cavity_occupation
        row.re_pair_coherence, row.im_pair_coherence = obs.pair_coherence.real, obs.pair_coherence.imag
        row.converged = bool(state.converged)
        row.convergence_time = float(state.convergence_time)
        row.residual = float(state.residual)
    except Exception as exc:  # per-row error boundary
        row.error = f"{type(exc).__name__}: {exc}".replace("\n", " ")
        log.warning("row mode=%s N=%d E_d=%.4g failed: %s", mode, n, drive, row.error)
    return row


def run_scan(config: ScanConfig, bath: Optional[BathSetup] = None) -> ScanResult:
    """One steady state per (mode, N, E_d); rows ordered mode, N, then grid order.

    Row failures are recorded in the row's ``error`` field; :class:`ScanError`
    is raised only if every row failed.
    """
    if bath is None and COHERENT in config.modes:
        bath = prepare_bath(config)
    model = bath.model if bath is not None else ExponentialBathModel.empty()
    jobs = [(mode, n, e, model, config) for mode in config.modes for n in config.n_values
            for e in config.drive_grid]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            rows = list(pool.map(_solve_row, jobs))
    else:
        rows = [_solve_row(j) for j in jobs]
    result = ScanResult(rows, config, bath)
    if rows and all(not r.converged for r in rows):
        raise ScanError(f"all {len(rows)} scan rows failed; first error: {rows[0].error}",
                        [r.error for r in rows])
    return result


# ---------------------------------------------------------------------------
# resonance analysis


def find_maxima(x, y, rel_prominence: float = 0.1) -> np.ndarray:
    """Interior local maxima of y(x) with prominence >= rel_prominence * max(y)."""
    y = np.asarray(y, dtype=float)
    ok = np.isfinite(y)
    if ok.sum() < 3:
        return np.empty(0, dtype=int)
    idx = np.flatnonzero(ok)
    top = np.nanmax(y)
    if top <= 0:
        return np.empty(0, dtype=int)
    peaks, _ = find_peaks(y[ok], prominence=rel_prominence * top)
    return idx[peaks]


def local_spacing(x, at: float) -> float:
    """Largest grid spacing adjacent to the grid point nearest ``at``."""
    x = np.asarray(x, dtype=float)
    i = int(np.argmin(np.abs(x - at)))
    gaps = [x[j + 1] - x[j] for j in (i - 1, i) if 0 <= j < x.size - 1]
    return float(max(gaps))


def peak_to_background(x, y, centre: float, halfwidth: float) -> tuple[float, float, float]:
    """(location, height, ratio) of the largest value within centre +/- halfwidth.

    The local background at the maximum is the straight line joining the
    lowest points of the window on either side of it; ``ratio`` is the
    maximum over that background.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    win = np.flatnonzero((x >= centre - halfwidth) & (x <= centre + halfwidth))
    if win.size < 3:
        raise ValidationError("window holds fewer than three grid points")
    k = win[np.argmax(y[win])]
    left, right = win[win <= k], win[win >= k]
    a = left[np.argmin(y[left])]
    b = right[np.argmin(y[right])]
    if a == b:
        base = y[a]
    else:
        base = y[a] + (y[b] - y[a]) * (x[k] - x[a]) / (x[b] - x[a])
    return float(x[k]), float(y[k]), float(y[k] / base) if base > 0 else np.inf


@dataclass
class ResonanceMatch:
    peak_omega: Optional[float]
    expected_drive: Optional[float]
    matched_drive: Optional[float]
    matched: bool


def resonance_report(drive, n_cav, J: Optional[SpectralDensity], rel_prominence: float = 0.1,
                     drive_range: Optional[tuple] = None) -> list:
    """Pair the maxima of n_cav(E_d) with the peaks of J by the rule omega = 2 E_d.

    A peak counts as matched when a maximum lies within one local grid
    spacing of omega/2.  Peaks whose omega/2 falls outside the scanned range
    are skipped; maxima left over are reported with ``peak_omega=None``.
    """
    drive = np.asarray(drive, dtype=float)
    maxima = list(drive[find_maxima(drive, n_cav, rel_prominence)])
    lo, hi = drive_range or (drive.min(), drive.max())
    peaks = J.peaks(rel_prominence) if J is not None else np.empty(0)
    out = []
    used = set()
    for w in peaks:
        target = w / 2
        if not lo < target < hi:
            continue
        tol = local_spacing(drive, target)
        best = None
        for j, m in enumerate(maxima):
            if j not in used and abs(m - target) <= tol * (1 + 1e-9):
                if best is None or abs(m - target) < abs(maxima[best] - target):
                    best = j
        if best is None:
            out.append(ResonanceMatch(float(w), float(target), None, False))
        else:
            used.add(best)
            out.append(ResonanceMatch(float(w), float(target), float(maxima[best]), True))
    for j, m in enumerate(maxima):
        if j not in used:
            out.append(ResonanceMatch(None, None, float(m), False))
    return out


def report_json(matches: list, **extra) -> str:
    return json.dumps({"resonances": [asdict(m) for m in matches], **extra}, indent=2)


def strongest_resonance(drive, n_cav, rel_prominence: float = 0.1) -> Optional[float]:
    """Drive of the maximum with the largest prominence."""
    drive = np.asarray(drive, dtype=float)
    y = np.asarray(n_cav, dtype=float)
    idx = find_maxima(drive, y, rel_prominence)
    if idx.size == 0:
        return None
    prom = peak_prominences(y, idx)[0]
    return float(drive[idx[np.argmax(prom)]])
