"""Interferometric phase traces: extraction, spectral estimation and tone detection."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy.ndimage import median_filter
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

TRACE_CSV_HEADER = "time_s,det_a,det_b"
PSD_CSV_HEADER = "freq_hz,psd_rad2_per_hz"


@dataclass
class IntensityTrace:
    sample_rate: float
    samples_a: np.ndarray
    samples_b: np.ndarray

    def __post_init__(self):
        self.samples_a = np.asarray(self.samples_a)
        self.samples_b = np.asarray(self.samples_b)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples_a.shape != self.samples_b.shape or self.samples_a.ndim != 1:
            raise ValueError("detector traces must be 1-D and of equal length")

    def __len__(self):
        return self.samples_a.size


@dataclass
class PhaseSeries:
    """Phase samples in radians.

    ``valid`` marks samples that carry a phase value; extracted series also report
    the fraction of samples whose arccos argument had to be clamped.
    """

    sample_rate: float
    phase: np.ndarray
    valid: np.ndarray | None = None
    clamped_fraction: float = 0.0

    def __post_init__(self):
        self.phase = np.asarray(self.phase)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self):
        return self.phase.size


@dataclass
class PsdEstimate:
    frequencies: np.ndarray
    density: np.ndarray
    segment_length: int
    overlap: int
    window: str = "hann"
    n_segments: int = 0
    input_variance: float = float("nan")

    @property
    def resolution(self) -> float:
        return float(self.frequencies[1] - self.frequencies[0])

    def integral(self, f_lo: float = 0.0, f_hi: float = math.inf) -> float:
        sel = (self.frequencies >= f_lo) & (self.frequencies <= f_hi)
        return float(self.density[sel].sum() * self.resolution)


def extract_phase(trace: IntensityTrace, visibility: float = 1.0) -> PhaseSeries:
    """Wrapped phase in [0, pi] from the two complementary interferometer outputs."""
    if not 0 < visibility <= 1:
        raise ValueError("visibility must be in (0, 1]")
    a = trace.samples_a.astype(float)
    b = trace.samples_b.astype(float)
    total = a + b
    valid = total > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        arg = (a - b) / (visibility * total)
    arg = np.where(valid, arg, 0.0)
    clamped = valid & (np.abs(arg) > 1)
    phase = np.arccos(np.clip(arg, -1.0, 1.0))
    phase[~valid] = np.nan
    n_valid = int(valid.sum())
    return PhaseSeries(trace.sample_rate, phase, valid,
                       float(clamped.sum() / n_valid) if n_valid else 0.0)


def _hann(n: int) -> np.ndarray:
    # periodic Hann, the usual choice for spectral averaging
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def _centered(series: PhaseSeries, chunk: int = 1 << 22) -> tuple[np.ndarray, float, float]:
    """Input with invalid samples filled by the mean; returns (x, mean, variance)."""
    x = series.phase
    valid = series.valid
    if valid is not None and not valid.all():
        x = np.where(valid, x, np.nanmean(x[valid]) if valid.any() else 0.0)
    # chunked float64 moments keep memory flat for float32 inputs
    total = 0.0
    for i in range(0, x.size, chunk):
        total += float(np.sum(x[i:i + chunk], dtype=np.float64))
    mean = total / x.size
    sq = 0.0
    for i in range(0, x.size, chunk):
        d = x[i:i + chunk].astype(np.float64) - mean
        sq += float(d @ d)
    return x, mean, sq / x.size


def estimate_psd(series: PhaseSeries, segment_length: int, overlap: int | None = None) -> PsdEstimate:
    """One-sided averaged-periodogram density (rad^2/Hz) with a Hann window.

    The series mean is removed once, globally; segments are not individually
    detrended, so the integral of the density matches the input variance.
    """
    n = len(series)
    segment_length = int(segment_length)
    overlap = segment_length // 2 if overlap is None else int(overlap)
    if segment_length < 2:
        raise ValueError("segment_length must be >= 2")
    if not 0 <= overlap < segment_length:
        raise ValueError("overlap must satisfy 0 <= overlap < segment_length")
    if n < segment_length:
        raise ValueError(f"series of {n} samples is shorter than one segment ({segment_length})")
    x, mean, variance = _centered(series)
    win = _hann(segment_length)
    hop = segment_length - overlap
    starts = range(0, n - segment_length + 1, hop)
    acc = np.zeros(segment_length // 2 + 1)
    for s in starts:
        seg = (x[s:s + segment_length].astype(np.float64) - mean) * win
        spec = sfft.rfft(seg)
        acc += spec.real ** 2 + spec.imag ** 2
    n_seg = len(starts)
    density = acc / (n_seg * series.sample_rate * float(win @ win))
    if segment_length % 2 == 0:
        density[1:-1] *= 2
    else:
        density[1:] *= 2
    freqs = np.arange(density.size) * series.sample_rate / segment_length
    return PsdEstimate(freqs, density, segment_length, overlap, "hann", n_seg, variance)


@dataclass(frozen=True)
class PhaseNoiseSpec:
    """Target spectrum for synthetic phase noise.

    Flat at ``low_level`` (rad^2/Hz) below ``corner_low``, falling as
    f**-``rolloff_exponent`` up to ``corner_high`` and flat again above it, plus a
    white ``floor_density`` and sinusoidal ``tones`` given as (Hz, amplitude rad).
    """

    low_level: float = 1e-3
    rolloff_exponent: float = 2.0
    corner_low: float = 10.0
    corner_high: float = 1000.0
    floor_density: float = 0.0
    tones: tuple[tuple[float, float], ...] = ((100.0, 1.4), (125.0, 0.35))
    offset: float = 0.0

    def colored_density(self, f):
        f = np.asarray(f, dtype=float)
        if self.low_level == 0:
            return np.zeros_like(f)
        clipped = np.clip(f, self.corner_low, self.corner_high)
        return self.low_level * (clipped / self.corner_low) ** (-self.rolloff_exponent)

    def density(self, f):
        return self.colored_density(f) + self.floor_density


def submarine_link_spec() -> PhaseNoiseSpec:
    """Roll-off between 10 Hz and 1 kHz, tones at 100 and 125 Hz, detector-limited above.

    The mean phase sits at quadrature so the fringe stays on one arccos branch.
    """
    return PhaseNoiseSpec(low_level=1e-4, rolloff_exponent=2.0, corner_low=10.0,
                          corner_high=1000.0, floor_density=5e-8,
                          tones=((100.0, 1.4), (125.0, 0.35)), offset=math.pi / 2)


def _shape_spectrum(spectrum: np.ndarray, spec: PhaseNoiseSpec, df: float, scale: float,
                    chunk: int = 1 << 22) -> None:
    """Multiply white spectral samples in place by sqrt(density * scale), chunk by chunk."""
    for i in range(0, spectrum.size, chunk):
        f = np.arange(i, min(i + chunk, spectrum.size)) * df
        spectrum[i:i + f.size] *= np.sqrt(spec.density(f) * scale).astype(spectrum.real.dtype)


def synthesize_phase_noise(spec: PhaseNoiseSpec, duration: float, sample_rate: float,
                           seed: int, dtype=np.float32) -> PhaseSeries:
    """Gaussian phase noise with the expected density of ``spec`` plus its tones.

    Noise is shaped in the frequency domain and inverted with one FFT. Tones that
    fall exactly on an FFT bin are inserted there too; others are added in the
    time domain. Tone phases come from the same seeded generator.
    """
    n = int(round(duration * sample_rate))
    if n < 2:
        raise ValueError("duration * sample_rate must be >= 2")
    rng = np.random.Generator(np.random.PCG64(seed))
    nf = n // 2 + 1
    df = sample_rate / n
    cdtype = np.complex64 if np.dtype(dtype) == np.float32 else np.complex128
    phases = rng.uniform(0, 2 * np.pi, len(spec.tones))
    on_bin, off_bin = [], []
    for (f, a), ph in zip(spec.tones, phases):
        k = f / df
        if a and abs(k - round(k)) < 1e-9 and 0 < round(k) < n / 2:
            on_bin.append((int(round(k)), a, ph))
        elif a:
            off_bin.append((f, a, ph))
    noisy = spec.low_level != 0 or spec.floor_density != 0
    if not noisy and not on_bin and not off_bin and not spec.offset:
        x = np.zeros(n, dtype=dtype)
    else:
        spectrum = np.zeros(nf, dtype=cdtype)
        if noisy:
            spectrum.real = rng.standard_normal(nf, dtype=dtype)
            spectrum.imag = rng.standard_normal(nf, dtype=dtype)
            # E|X_k|^2 = S(f_k) * fs * n / 2 for the one-sided density S
            _shape_spectrum(spectrum, spec, df, sample_rate * n / 4)
            spectrum[0] = 0.0
            if n % 2 == 0:
                spectrum[-1] = spectrum[-1].real * 2.0
        for k, a, ph in on_bin:
            spectrum[k] += a * n / 2 * np.exp(1j * (ph - np.pi / 2))
        spectrum[0] = spec.offset * n
        x = sfft.irfft(spectrum, n=n, overwrite_x=True)
        del spectrum
        x = x.astype(dtype, copy=False)
    if off_bin:
        chunk = 1 << 22
        for i in range(0, n, chunk):
            t = np.arange(i, min(i + chunk, n)) / sample_rate
            add = np.zeros(t.size)
            for f, a, ph in off_bin:
                add += a * np.sin(2 * np.pi * f * t + ph)
            x[i:i + t.size] += add.astype(dtype)
    return PhaseSeries(sample_rate, x)


def intensity_trace_from_phase(series: PhaseSeries, power: float = 1.0, visibility: float = 1.0,
                               detector_noise: float = 0.0, seed: int = 0) -> IntensityTrace:
    """Complementary detector outputs for a phase series, with optional white readout noise."""
    phi = series.phase.astype(float)
    a = 0.5 * power * (1 + visibility * np.cos(phi))
    b = 0.5 * power * (1 - visibility * np.cos(phi))
    if detector_noise:
        rng = np.random.Generator(np.random.PCG64(seed))
        a = np.clip(a + detector_noise * rng.standard_normal(a.size), 0, None)
        b = np.clip(b + detector_noise * rng.standard_normal(b.size), 0, None)
    return IntensityTrace(series.sample_rate, a, b)


@dataclass(frozen=True)
class Tone:
    frequency: float
    power: float  # rad^2, integrated over the peak above the local floor
    peak_density: float


def detect_tones(psd: PsdEstimate, threshold: float = 10.0, median_bins: int = 61,
                 f_min: float | None = None) -> list[Tone]:
    """Spectral lines standing ``threshold`` times above the running-median floor.

    Each peak's support extends outward while the density keeps falling and stays
    above the floor; weaker maxima inside an accepted support are not reported.
    """
    density = np.asarray(psd.density)
    if density.size == 0:
        raise ValueError("empty PSD")
    floor = median_filter(density, size=median_bins, mode="nearest")
    f_min = psd.frequencies[1] if f_min is None else f_min
    interior = np.zeros(density.size, dtype=bool)
    interior[1:-1] = (density[1:-1] > density[:-2]) & (density[1:-1] >= density[2:])
    cand = np.flatnonzero(interior & (density > threshold * floor) & (psd.frequencies >= f_min))
    claimed = np.zeros(density.size, dtype=bool)
    df = psd.resolution
    tones = []
    for k in cand[np.argsort(-density[cand], kind="stable")]:
        if claimed[k]:
            continue
        lo = k
        while lo > 0 and floor[lo - 1] < density[lo - 1] <= density[lo]:
            lo -= 1
        hi = k
        while hi < density.size - 1 and floor[hi + 1] < density[hi + 1] <= density[hi]:
            hi += 1
        claimed[lo:hi + 1] = True
        power = float(np.sum(density[lo:hi + 1] - floor[lo:hi + 1]) * df)
        tones.append(Tone(float(psd.frequencies[k]), power, float(density[k])))
    tones.sort(key=lambda t: t.frequency)
    return tones


def fit_rolloff(psd: PsdEstimate, f_lo: float, f_hi: float,
                exclude: list[float] = (), exclude_width: float = 5.0) -> float:
    """Power-law exponent (positive for a falling spectrum) fitted in log-log space."""
    f = psd.frequencies
    sel = (f >= f_lo) & (f <= f_hi) & (psd.density > 0)
    for f0 in exclude:
        sel &= np.abs(f - f0) > exclude_width
    if sel.sum() < 2:
        raise ValueError("not enough bins in the fit band")
    slope, _ = np.polyfit(np.log10(f[sel]), np.log10(psd.density[sel]), 1)
    return float(-slope)


# --- CSV interchange -------------------------------------------------------------

def write_trace_csv(trace: IntensityTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(TRACE_CSV_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        for i, (a, b) in enumerate(zip(trace.samples_a, trace.samples_b)):
            w.writerow([format(i / trace.sample_rate, ".12g"), format(float(a), ".12g"),
                        format(float(b), ".12g")])


def read_trace_csv(path) -> IntensityTrace:
    with open(path, newline="") as fh:
        header = fh.readline().strip()
        if header != TRACE_CSV_HEADER:
            raise ValueError(f"unexpected trace header {header!r}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape[0] < 2 or data.shape[1] != 3:
        raise ValueError("trace needs at least two rows of time_s,det_a,det_b")
    dt = np.diff(data[:, 0])
    if np.any(dt <= 0):
        raise ValueError("trace timestamps must be strictly increasing")
    return IntensityTrace(1.0 / float(np.median(dt)), data[:, 1], data[:, 2])


def write_psd_csv(psd: PsdEstimate, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(PSD_CSV_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        for f, d in zip(psd.frequencies, psd.density):
            w.writerow([format(float(f), ".12g"), format(float(d), ".12g")])


# --- estimator interface ---------------------------------------------------------

class PhaseExtractor(TransformerMixin, BaseEstimator):
    """Maps an (n, 2) array of detector readings to wrapped phase.

    With ``visibility="auto"`` the fringe visibility is estimated in ``fit`` as a
    high percentile of |a - b| / (a + b).
    """

    def __init__(self, visibility="auto", percentile=99.9):
        self.visibility = visibility
        self.percentile = percentile

    def fit(self, X, y=None):
        X = check_array(X)
        if X.shape[1] != 2:
            raise ValueError("expected two columns (det_a, det_b)")
        if self.visibility == "auto":
            total = X.sum(axis=1)
            ok = total > 0
            contrast = np.abs(X[ok, 0] - X[ok, 1]) / total[ok]
            self.visibility_ = float(np.clip(np.percentile(contrast, self.percentile), 1e-6, 1.0))
        else:
            self.visibility_ = float(self.visibility)
        self.n_features_in_ = 2
        return self

    def transform(self, X):
        check_is_fitted(self, "visibility_")
        X = check_array(X)
        trace = IntensityTrace(1.0, X[:, 0], X[:, 1])
        return extract_phase(trace, self.visibility_).phase


class PhaseSpectrum(BaseEstimator):
    """Averaged-periodogram estimator; ``fit`` on a 1-D phase array."""

    def __init__(self, sample_rate=2e6, segment_length=1 << 20, overlap=None, threshold=10.0):
        self.sample_rate = sample_rate
        self.segment_length = segment_length
        self.overlap = overlap
        self.threshold = threshold

    def fit(self, X, y=None):
        x = check_array(X, ensure_2d=False, dtype=[np.float64, np.float32],
                        ensure_all_finite="allow-nan").ravel()
        self.psd_ = estimate_psd(PhaseSeries(self.sample_rate, x, np.isfinite(x)),
                                 self.segment_length, self.overlap)
        self.frequencies_ = self.psd_.frequencies
        self.density_ = self.psd_.density
        return self

    def tones(self):
        check_is_fitted(self, "psd_")
        return detect_tones(self.psd_, self.threshold)
