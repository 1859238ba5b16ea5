"""Molecular normal-mode data and displaced-oscillator parameters.

Each normal mode lambda is a harmonic oscillator with frequency w and
Huang-Rhys factor S.  In the excited electronic state its equilibrium is
displaced by sqrt(2 S / w), which shifts the vertical transition above the
adiabatic one by the reorganization energy sum_l S_l w_l.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .units import HARTREE_CM

SHIPPED_DATASET = "mb_synthetic.csv"
_HEADER = ("frequency_cm", "huang_rhys")
_GAP_RE = re.compile(r"#\s*adiabatic_gap_cm\s*[:=]\s*([-+0-9.eE]+)")


@dataclass(frozen=True)
class VibrationalMode:
    frequency_cm: float
    huang_rhys: float

    def __post_init__(self):
        if not self.frequency_cm > 0:
            raise ValidationError(f"mode frequency must be positive, got {self.frequency_cm}")
        if not self.huang_rhys >= 0:
            raise ValidationError(f"Huang-Rhys factor must be non-negative, got {self.huang_rhys}")

    @property
    def frequency_hartree(self) -> float:
        return self.frequency_cm / HARTREE_CM

    def coupling(self, unit_cm: float = HARTREE_CM) -> float:
        """Linear vibronic coupling w sqrt(S/2) in units of ``unit_cm``."""
        w = self.frequency_cm / unit_cm
        return w * math.sqrt(self.huang_rhys / 2.0)


@dataclass(frozen=True)
class MoleculeSpec:
    adiabatic_gap_cm: float
    modes: tuple[VibrationalMode, ...]
    vertical_gap_cm: float = field(init=False)
    name: str = ""

    def __post_init__(self):
        if len(self.modes) == 0:
            raise ValidationError("a molecule needs at least one vibrational mode")
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(
            self, "vertical_gap_cm", self.adiabatic_gap_cm + reorganization_energy(self.modes)
        )

    @property
    def frequencies_cm(self) -> np.ndarray:
        return np.array([m.frequency_cm for m in self.modes])

    @property
    def huang_rhys(self) -> np.ndarray:
        return np.array([m.huang_rhys for m in self.modes])

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "adiabatic_gap_cm": self.adiabatic_gap_cm,
            "vertical_gap_cm": self.vertical_gap_cm,
            "reorganization_energy_cm": self.vertical_gap_cm - self.adiabatic_gap_cm,
            "modes": [asdict(m) for m in self.modes],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, data: dict) -> "MoleculeSpec":
        modes = tuple(VibrationalMode(**m) for m in data["modes"])
        return cls(data["adiabatic_gap_cm"], modes, name=data.get("name", ""))


@dataclass(frozen=True)
class OhmicEnvironment:
    """Ohmic continuum J_E(w) = coupling * w * exp(-w / cutoff) damping every mode.

    The defaults are this package's choice (the environment parameters are not
    fixed by the molecular data) and are meant to be overridden from config.
    """

    coupling: float = 0.015
    cutoff_cm: float = 4000.0

    def __post_init__(self):
        if not self.coupling > 0:
            raise ValidationError("ohmic coupling must be positive")
        if not self.cutoff_cm > 0:
            raise ValidationError("ohmic cutoff must be positive")

    def density(self, omega, unit_cm: float = HARTREE_CM):
        """J_E at ``omega`` (given in units of ``unit_cm``), same units."""
        omega = np.asarray(omega, dtype=float)
        return self.coupling * omega * np.exp(-omega * unit_cm / self.cutoff_cm)

    def linewidth(self, omega, unit_cm: float = HARTREE_CM):
        """Half width pi * J_E(omega) of a mode damped by this environment."""
        return np.pi * self.density(omega, unit_cm)


def displacement(mode: VibrationalMode, unit_cm: float = HARTREE_CM) -> float:
    """Excited-state displacement sqrt(2 S / w) with w in units of ``unit_cm``."""
    return math.sqrt(2.0 * mode.huang_rhys / (mode.frequency_cm / unit_cm))


def reorganization_energy(spec_or_modes) -> float:
    """sum_l S_l w_l in cm^-1 (equivalently sum_l w_l^2 Delta_l^2 / 2)."""
    modes = spec_or_modes.modes if isinstance(spec_or_modes, MoleculeSpec) else spec_or_modes
    return float(sum(m.huang_rhys * m.frequency_cm for m in modes))


def read_modes(path) -> tuple[list[VibrationalMode], float | None]:
    """Parse a ``frequency_cm,huang_rhys`` table.

    Returns the modes in file order and the adiabatic gap if the file declares
    one in a ``# adiabatic_gap_cm = ...`` comment.
    """
    modes: list[VibrationalMode] = []
    gap = None
    header_seen = False
    with open(path, newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                m = _GAP_RE.match(line)
                if m:
                    gap = float(m.group(1))
                continue
            row = next(csv.reader([line]))
            if not header_seen:
                header_seen = True
                if tuple(c.strip() for c in row) == _HEADER:
                    continue
            if len(row) != 2:
                raise ParseError(f"expected 2 columns, got {len(row)}", lineno)
            try:
                freq, s = float(row[0]), float(row[1])
            except ValueError as exc:
                raise ParseError(f"cannot parse {line!r}: {exc}", lineno) from None
            try:
                modes.append(VibrationalMode(freq, s))
            except ValidationError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from None
    return modes, gap


def load_molecule(path, adiabatic_gap_cm: float | None = None, name: str = "") -> MoleculeSpec:
    """Load a molecule from CSV.

    If ``adiabatic_gap_cm`` is omitted the value declared in the file header is
    used; it is an error if neither is available.
    """
    path = Path(path)
    modes, declared = read_modes(path)
    gap = adiabatic_gap_cm if adiabatic_gap_cm is not None else declared
    if gap is None:
        raise ValidationError(f"{path}: no adiabatic gap given or declared in the file")
    return MoleculeSpec(gap, tuple(modes), name=name or path.stem)


def shipped_dataset_path() -> Path:
    return Path(str(resources.files("vibrolase.data").joinpath(SHIPPED_DATASET)))


def load_shipped_molecule() -> MoleculeSpec:
    """The bundled 107-mode stand-in for methylene blue (see data/README)."""
    return load_molecule(shipped_dataset_path(), name="methylene-blue (synthetic)")
