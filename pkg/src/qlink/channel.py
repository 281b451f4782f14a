"""Fibre channel model: loss budget, stray-photon background spectrum, dispersion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.special import erf

from qlink.physics import transmission_from_loss_db

_FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))


@dataclass(frozen=True)
class StrayPeak:
    center: float  # nm
    width_fwhm: float  # nm
    amplitude: float  # counts/s per nm at the centre

    @property
    def sigma(self) -> float:
        return self.width_fwhm * _FWHM_TO_SIGMA

    @property
    def area(self) -> float:
        return self.amplitude * self.sigma * np.sqrt(2 * np.pi)


@dataclass(frozen=True)
class StraySpectrum:
    """Phenomenological stray-light spectrum: flat floor plus Gaussian peaks.

    The model is only defined on ``support`` (nm); integrals are clipped to it.
    """

    floor_rate: float = 0.0  # counts/s per nm
    peaks: tuple[StrayPeak, ...] = ()
    support: tuple[float, float] = (1500.0, 1630.0)

    def __post_init__(self):
        if self.floor_rate < 0:
            raise ValueError("floor_rate must be non-negative")
        for p in self.peaks:
            if p.amplitude < 0 or p.width_fwhm <= 0:
                raise ValueError(f"invalid peak {p}")
        if not self.support[0] < self.support[1]:
            raise ValueError("support must be an increasing interval")

    def density(self, wavelength):
        """Spectral density in counts/s per nm (zero outside the support)."""
        wl = np.asarray(wavelength, dtype=float)
        out = np.full_like(wl, self.floor_rate)
        for p in self.peaks:
            out = out + p.amplitude * np.exp(-0.5 * ((wl - p.center) / p.sigma) ** 2)
        lo, hi = self.support
        return np.where((wl >= lo) & (wl <= hi), out, 0.0)

    def integrate(self, lo: float, hi: float) -> float:
        """Counts/s between ``lo`` and ``hi`` nm, in closed form."""
        lo = max(lo, self.support[0])
        hi = min(hi, self.support[1])
        if hi <= lo:
            return 0.0
        total = self.floor_rate * (hi - lo)
        for p in self.peaks:
            z = np.sqrt(2.0) * p.sigma
            total += 0.5 * p.area * (erf((hi - p.center) / z) - erf((lo - p.center) / z))
        return float(total)

    @property
    def total_rate(self) -> float:
        return self.integrate(*self.support)


@dataclass(frozen=True)
class DetectorParams:
    efficiency: float = 0.93
    dark_rate: float = 70.0  # counts/s
    jitter_sigma: float = 50.0  # ps
    name: str = "snspd"

    def __post_init__(self):
        if not 0 <= self.efficiency <= 1:
            raise ValueError("detector efficiency must be in [0, 1]")
        if self.dark_rate < 0:
            raise ValueError("dark_rate must be non-negative")


@dataclass(frozen=True)
class ChannelParams:
    length: float = 224.0  # km
    attenuation: float = 0.17  # dB/km
    extra_insertion_loss: float = 0.0  # dB
    dispersion_coeff: float = 17.0  # ps/(nm km)
    stray_model: StraySpectrum = field(default_factory=StraySpectrum)

    def __post_init__(self):
        if self.length < 0 or self.attenuation < 0 or self.extra_insertion_loss < 0:
            raise ValueError("length, attenuation and insertion loss must be non-negative")

    def total_loss_db(self, length: float | None = None) -> float:
        length = self.length if length is None else length
        if length < 0:
            raise ValueError("length must be non-negative")
        return self.attenuation * length + self.extra_insertion_loss

    def concatenate(self, other: "ChannelParams") -> "ChannelParams":
        """Series connection of two spans (length-weighted attenuation and dispersion)."""
        length = self.length + other.length
        if length > 0:
            attenuation = (self.attenuation * self.length + other.attenuation * other.length) / length
            dispersion = (self.dispersion_coeff * self.length
                          + other.dispersion_coeff * other.length) / length
        else:
            attenuation, dispersion = self.attenuation, self.dispersion_coeff
        return ChannelParams(
            length=length,
            attenuation=attenuation,
            extra_insertion_loss=self.extra_insertion_loss + other.extra_insertion_loss,
            dispersion_coeff=dispersion,
            stray_model=self.stray_model,
        )


def transmittance(params: ChannelParams, length: float | None = None,
                  receiver_eff: float = 1.0, detector_eff: float = 1.0):
    """Overall detection probability of a photon launched into the channel.

    ``length`` may be an array of distances in km; defaults to ``params.length``.
    """
    for name, value in (("receiver_eff", receiver_eff), ("detector_eff", detector_eff)):
        if not 0 <= value <= 1:
            raise ValueError(f"{name} must be in [0, 1]")
    length = params.length if length is None else length
    length_arr = np.asarray(length, dtype=float)
    if np.any(length_arr < 0):
        raise ValueError("length must be non-negative")
    loss_db = params.attenuation * length_arr + params.extra_insertion_loss
    return receiver_eff * detector_eff * transmission_from_loss_db(loss_db)


def stray_rate_in_band(spectrum: StraySpectrum, center: float, bandwidth: float) -> float:
    """Stray counts/s passed by an ideal flat-top filter."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    return spectrum.integrate(center - bandwidth / 2, center + bandwidth / 2)


def dispersion_broadening(dispersion: float, length: float, filter_bandwidth: float) -> float:
    """Arrival-time spread (ps) for a ``filter_bandwidth`` nm wide photon after ``length`` km."""
    if dispersion < 0 or length < 0 or filter_bandwidth < 0:
        raise ValueError("dispersion, length and bandwidth must be non-negative")
    return dispersion * length * filter_bandwidth


def default_stray_spectrum() -> StraySpectrum:
    """Stray-light spectrum shaped after the field measurement.

    About 230 kHz unfiltered, roughly 2 kHz in a 1.39 nm band at 1550.1 nm, and a
    minimum near 1569 nm (~110 Hz in the same band).
    """
    return StraySpectrum(
        floor_rate=60.0,
        peaks=(
            StrayPeak(1535.0, 5.0, 6000.0),
            StrayPeak(1551.0, 4.0, 1500.0),
            StrayPeak(1556.0, 12.0, 250.0),
            StrayPeak(1588.0, 12.0, 9000.0),
            StrayPeak(1612.0, 8.0, 8000.0),
        ),
    )


def fit_stray_spectrum(wavelength, density, initial_peaks, support=None) -> StraySpectrum:
    """Least-squares fit of floor + Gaussian peaks to a sampled spectrum.

    ``initial_peaks`` is a sequence of ``(center, fwhm, amplitude)`` starting guesses.
    """
    wl = np.asarray(wavelength, dtype=float)
    y = np.asarray(density, dtype=float)
    if wl.shape != y.shape or wl.size == 0:
        raise ValueError("wavelength and density must be non-empty and equally sized")
    support = support or (float(wl.min()), float(wl.max()))
    init = [max(float(np.min(y)), 0.0)]
    for c, w, a in initial_peaks:
        init += [c, w, a]
    init = np.asarray(init)
    lower = np.r_[0.0, np.tile([support[0], 1e-3, 0.0], len(initial_peaks))]
    upper = np.r_[np.inf, np.tile([support[1], support[1] - support[0], np.inf], len(initial_peaks))]

    def model(theta):
        peaks = tuple(StrayPeak(*theta[1 + 3 * i: 4 + 3 * i]) for i in range(len(initial_peaks)))
        return StraySpectrum(theta[0], peaks, support)

    def residual(theta):
        return model(theta).density(wl) - y

    sol = least_squares(residual, np.clip(init, lower, upper), bounds=(lower, upper))
    return model(sol.x)
