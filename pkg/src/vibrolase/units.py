"""Energy unit conversions.

All dynamics are run in units of the maximum drive strength E_max, but the
molecular input data is tabulated in wavenumbers and the canonical internal
unit is the Hartree.
"""

HARTREE_CM = 219474.6313632  # 1 Hartree in cm^-1

#: vertical Franck-Condon excitation energy of methylene blue (cm^-1)
MB_VERTICAL_GAP_CM = 20857.0

#: E_max = 0.1 * omega_0
EMAX_FRACTION = 0.1


def cm_to_hartree(value):
    return value / HARTREE_CM


def hartree_to_cm(value):
    return value * HARTREE_CM


def emax_cm(vertical_gap_cm: float = MB_VERTICAL_GAP_CM) -> float:
    """Maximum drive strength in cm^-1 for a given vertical gap."""
    return EMAX_FRACTION * vertical_gap_cm
