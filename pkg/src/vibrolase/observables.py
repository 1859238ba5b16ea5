from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class Observables:
    """Per-emitter excited population, cavity photon number and inter-emitter coherence.

    ``pair_coherence`` is <sigma_+^i sigma_-^j> for i != j (zero for N = 1).
    """

    p_e: float
    cavity_occupation: float
    pair_coherence: complex = 0j

    def check(self, tol: float = 1e-6) -> "Observables":
        from .errors import IntegrityError

        if not -tol <= self.p_e <= 1 + tol:
            raise IntegrityError(f"p_e = {self.p_e} outside [0, 1]")
        if self.cavity_occupation < -tol:
            raise IntegrityError(f"negative cavity occupation {self.cavity_occupation}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        c = complex(d.pop("pair_coherence"))
        d["pair_coherence_re"], d["pair_coherence_im"] = c.real, c.imag
        return d
