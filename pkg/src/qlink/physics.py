"""Physical constants, photon-flux/power equivalence and small numeric helpers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Exact SI values (CODATA 2018).
PLANCK = 6.62607015e-34  # J s
SPEED_OF_LIGHT = 299792458.0  # m/s


@dataclass(frozen=True)
class PhotonFluxSpec:
    """Mean photon number per pulse at a given repetition rate and wavelength."""

    mu: float
    clock_rate: float  # Hz
    wavelength: float  # m

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError(f"mu must be non-negative, got {self.mu}")
        _check_positive(clock_rate=self.clock_rate, wavelength=self.wavelength)

    @property
    def power(self) -> float:
        return power_for_flux(self)


def _check_positive(**kwargs):
    for name, value in kwargs.items():
        if not value > 0:
            raise ValueError(f"{name} must be positive, got {value}")


def photon_energy(wavelength: float) -> float:
    """Energy of a single photon in joules."""
    _check_positive(wavelength=wavelength)
    return PLANCK * SPEED_OF_LIGHT / wavelength


def power_for_flux(spec: PhotonFluxSpec) -> float:
    """Optical power (W) carried by ``spec.mu`` photons per pulse.

    >>> round(power_for_flux(PhotonFluxSpec(1.0, 1e9, 1550e-9)) * 1e12, 1)
    128.2
    """
    _check_positive(clock_rate=spec.clock_rate, wavelength=spec.wavelength)
    return spec.mu * spec.clock_rate * photon_energy(spec.wavelength)


def flux_for_power(power: float, clock_rate: float, wavelength: float) -> float:
    """Mean photon number per pulse equivalent to a CW ``power`` in watts."""
    if power < 0:
        raise ValueError(f"power must be non-negative, got {power}")
    _check_positive(clock_rate=clock_rate, wavelength=wavelength)
    return power / (clock_rate * photon_energy(wavelength))


def binary_entropy(p):
    """Shannon binary entropy in bits, with H2(0) = H2(1) = 0.

    Accepts scalars or arrays; raises ``ValueError`` for values outside [0, 1].
    """
    p_arr = np.asarray(p, dtype=float)
    if np.any(np.isnan(p_arr)) or np.any((p_arr < 0) | (p_arr > 1)):
        raise ValueError("probability must lie in [0, 1]")
    inner = (p_arr > 0) & (p_arr < 1)
    safe = np.where(inner, p_arr, 0.5)
    h = -safe * np.log2(safe) - (1 - safe) * np.log2(1 - safe)
    h = np.where(inner, h, 0.0)
    if h.ndim == 0:
        return float(h)
    return h


@dataclass(frozen=True)
class Decibel:
    """A ratio expressed in dB (positive values are losses when used as attenuation)."""

    value: float

    @classmethod
    def from_linear(cls, ratio: float) -> "Decibel":
        return cls(db_from_linear(ratio))

    def to_linear(self) -> float:
        return linear_from_db(self.value)

    def __add__(self, other: "Decibel") -> "Decibel":
        return Decibel(self.value + other.value)


def db_from_linear(ratio):
    ratio = np.asarray(ratio, dtype=float)
    if np.any(ratio <= 0):
        raise ValueError("linear ratio must be positive")
    out = 10.0 * np.log10(ratio)
    return float(out) if out.ndim == 0 else out


def linear_from_db(db):
    out = 10.0 ** (np.asarray(db, dtype=float) / 10.0)
    return float(out) if out.ndim == 0 else out


def transmission_from_loss_db(loss_db):
    """Linear transmittance of a component with ``loss_db`` of attenuation."""
    out = 10.0 ** (-np.asarray(loss_db, dtype=float) / 10.0)
    return float(out) if out.ndim == 0 else out
