"""Physical constants (CODATA 2018 exact values where defined)."""

ELEMENTARY_CHARGE = 1.602176634e-19  # C
BOLTZMANN = 1.380649e-23  # J/K
VACUUM_PERMITTIVITY = 8.8541878128e-12  # F/m


def thermal_voltage(T):
    """k_B T / q in volts."""
    return BOLTZMANN * T / ELEMENTARY_CHARGE
