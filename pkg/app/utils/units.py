"""Conversions between physical units and internal units.

Internally hbar = 1, frequencies are in units of omega_max and times in units of
1/omega_max. Physical frequencies are quoted as f = omega / 2 pi in MHz, so
omega_max = 2 pi * rabi_frequency_mhz rad/us.
"""

import math


def omega_rad_per_us(rabi_frequency_mhz: float) -> float:
    """omega_max in rad/us."""
    if rabi_frequency_mhz <= 0:
        raise ValueError("Rabi frequency must be positive")
    return 2.0 * math.pi * rabi_frequency_mhz


def time_to_us(t: float, rabi_frequency_mhz: float) -> float:
    return t / omega_rad_per_us(rabi_frequency_mhz)


def time_from_us(t_us: float, rabi_frequency_mhz: float) -> float:
    return t_us * omega_rad_per_us(rabi_frequency_mhz)


def detuning_to_mhz(delta: float, rabi_frequency_mhz: float) -> float:
    """Internal detuning to delta / 2 pi in MHz."""
    return delta * rabi_frequency_mhz


def detuning_from_mhz(delta_mhz: float, rabi_frequency_mhz: float) -> float:
    return delta_mhz / rabi_frequency_mhz


def gamma_from_lifetime(lifetime_us: float, rabi_frequency_mhz: float) -> float:
    """Decay rate 1 / (tau * omega_max) in internal units; 0 for an infinite lifetime."""
    if math.isinf(lifetime_us):
        return 0.0
    if lifetime_us <= 0:
        raise ValueError("Lifetime must be positive")
    return 1.0 / (lifetime_us * omega_rad_per_us(rabi_frequency_mhz))
