"""Photon-pair stream simulation and coincidence analysis.

A pair source feeds two lossy arms. Each photon survives its arm independently,
so the detected streams split into three Poisson processes (both photons, signal
only, idler only) plus independent background on each detector. Arrival times
carry a fixed relative offset, a flat dispersion spread per arm and Gaussian
timing jitter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy import integrate, stats
from sklearn.base import BaseEstimator

from qlink.channel import ChannelParams, dispersion_broadening
from qlink.timetags import PS_PER_S, TimeTagStream

HISTOGRAM_CSV_HEADER = "delay_ps,counts"


@dataclass(frozen=True)
class PairSourceParams:
    """Pair source and the two arms behind it.

    Rates in counts/s, times in ps. ``offset`` is the idler delay relative to
    the signal photon of the same pair.
    """

    pair_rate: float
    eta_s: float
    eta_i: float
    background_s: float = 0.0
    background_i: float = 0.0
    offset: float = 113_000.0
    broadening_s: float = 0.0
    broadening_i: float = 0.0
    jitter: float = 0.0
    channel_s: int = 0
    channel_i: int = 1

    def __post_init__(self):
        if min(self.pair_rate, self.background_s, self.background_i) < 0:
            raise ValueError("rates must be non-negative")
        if not (0 <= self.eta_s <= 1 and 0 <= self.eta_i <= 1):
            raise ValueError("arm transmittances must lie in [0, 1]")
        if min(self.broadening_s, self.broadening_i, self.jitter) < 0:
            raise ValueError("broadening and jitter must be non-negative")
        if self.channel_s == self.channel_i:
            raise ValueError("signal and idler need distinct channels")

    @property
    def true_coincidence_rate(self) -> float:
        return self.pair_rate * self.eta_s * self.eta_i

    @property
    def singles_s(self) -> float:
        return self.background_s + self.pair_rate * self.eta_s

    @property
    def singles_i(self) -> float:
        return self.background_i + self.pair_rate * self.eta_i


def _arrival_spread(rng, n, broadening, jitter):
    out = np.zeros(n)
    if broadening > 0:
        out += rng.uniform(-broadening / 2, broadening / 2, n)
    if jitter > 0:
        out += rng.normal(0.0, jitter, n)
    return out


def _finalize(times_ps, lo, hi):
    t = np.unique(times_ps)  # unique sorts; coincident ps tags collapse as in a dead-time-limited detector
    return t[(t >= lo) & (t < hi)]


def simulate_pairs(params: PairSourceParams, duration: float, seed=None, start: float = 0.0) -> TimeTagStream:
    """One acquisition of ``duration`` seconds beginning at ``start``.

    Photons arriving outside ``[start, start + duration)`` are dropped, so
    consecutive calls with adjacent windows tile a longer acquisition.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(seed)
    lo = int(round(start * PS_PER_S))
    hi = lo + int(round(duration * PS_PER_S))
    p = params
    n_both = rng.poisson(p.pair_rate * p.eta_s * p.eta_i * duration)
    n_s = rng.poisson(p.pair_rate * p.eta_s * (1 - p.eta_i) * duration)
    n_i = rng.poisson(p.pair_rate * (1 - p.eta_s) * p.eta_i * duration)
    n_bs = rng.poisson(p.background_s * duration)
    n_bi = rng.poisson(p.background_i * duration)

    emit_both = rng.integers(lo, hi, n_both)
    emit_s = rng.integers(lo, hi, n_s)
    emit_i = rng.integers(lo, hi, n_i)
    sig = np.concatenate([emit_both, emit_s])
    idl = np.concatenate([emit_both, emit_i])
    sig = sig + np.rint(_arrival_spread(rng, sig.size, p.broadening_s, p.jitter)).astype(np.int64)
    idl = idl + np.rint(p.offset + _arrival_spread(rng, idl.size, p.broadening_i, p.jitter)).astype(np.int64)
    bs = rng.integers(lo, hi, n_bs)
    bi = rng.integers(lo, hi, n_bi)
    channels = {
        p.channel_s: _finalize(np.concatenate([sig, bs]), lo, hi),
        p.channel_i: _finalize(np.concatenate([idl, bi]), lo, hi),
    }
    return TimeTagStream(channels, duration, start)


def simulate_pairs_chunked(params: PairSourceParams, duration: float, seed=None, chunk: float = 3600.0):
    """Yield consecutive ``chunk``-second streams covering ``duration``.

    Each chunk draws from its own child of ``seed``, so the output does not
    depend on how the caller consumes it.
    """
    if duration <= 0 or chunk <= 0:
        raise ValueError("duration and chunk must be positive")
    n = math.ceil(duration / chunk - 1e-12)
    children = np.random.SeedSequence(seed).spawn(n)
    for k, child in enumerate(children):
        t0 = k * chunk
        yield simulate_pairs(params, min(chunk, duration - t0), child, start=t0)


def accidental_rate(singles_a: float, singles_b: float, window: float) -> float:
    """Expected accidental coincidences per second, ``S_a * S_b * tau``."""
    if min(singles_a, singles_b, window) < 0:
        raise ValueError("rates and window must be non-negative")
    return singles_a * singles_b * window


def window_recommendation(channel: ChannelParams, bandwidth_s: float, bandwidth_i: float,
                          jitter: float, k: float = 4.0, length: float | None = None) -> float:
    """Coincidence window (ps) covering both dispersion spreads plus ``k`` jitter sigmas.

    ``jitter`` is the per-detector sigma; the delay between two detectors
    carries ``sqrt(2)`` times that.
    """
    if bandwidth_s < 0 or bandwidth_i < 0 or jitter < 0 or k < 0:
        raise ValueError("bandwidths, jitter and k must be non-negative")
    L = channel.length if length is None else length
    spread = (dispersion_broadening(channel.dispersion_coeff, L, bandwidth_s)
              + dispersion_broadening(channel.dispersion_coeff, L, bandwidth_i))
    return spread + k * math.sqrt(2.0) * jitter


def capture_fraction(params: PairSourceParams, window: float) -> float:
    """Probability that a true pair's delay lies within ``window``/2 of the offset."""
    a, b, s = params.broadening_s, params.broadening_i, math.sqrt(2.0) * params.jitter
    half = window / 2

    def inside(x):
        # x: dispersion part of the delay; jitter is Gaussian around it
        if s == 0:
            return float(abs(x) <= half)
        return stats.norm.cdf((half - x) / s) - stats.norm.cdf((-half - x) / s)

    if a == 0 and b == 0:
        return inside(0.0)
    if a == 0 or b == 0:
        w = max(a, b)
        return integrate.quad(inside, -w / 2, w / 2, limit=200)[0] / w

    def pdf(x):
        # density of U(-a/2, a/2) - U(-b/2, b/2): a symmetric trapezoid
        lo, hi = abs(a - b) / 2, (a + b) / 2
        ax = abs(x)
        if ax <= lo:
            return 1.0 / max(a, b)
        if ax >= hi:
            return 0.0
        return (hi - ax) / (a * b)

    edge = (a + b) / 2
    brk = [abs(a - b) / 2, -abs(a - b) / 2, half, -half]
    return integrate.quad(lambda x: pdf(x) * inside(x), -edge, edge, points=brk, limit=200)[0]


def calibrate_pair_source(singles_s: float, singles_i: float, background_s: float, background_i: float,
                          car: float, window: float, capture: float = 1.0, **kwargs) -> PairSourceParams:
    """Pair rate and arm transmittances reproducing measured singles, backgrounds and CAR.

    ``window`` is in seconds. Solves ``P eta_s = S_s - b_s``, ``P eta_i = S_i - b_i`` and
    ``capture P eta_s eta_i = (CAR - 1) S_s S_i tau`` in closed form.
    """
    ps, pi = singles_s - background_s, singles_i - background_i
    if ps <= 0 or pi <= 0:
        raise ValueError("singles must exceed backgrounds")
    if car <= 1 or window <= 0 or not 0 < capture <= 1:
        raise ValueError("need CAR > 1, window > 0 and capture in (0, 1]")
    true_rate = (car - 1) * singles_s * singles_i * window / capture
    pair_rate = ps * pi / true_rate
    eta_s, eta_i = ps / pair_rate, pi / pair_rate
    if eta_s > 1 or eta_i > 1:
        raise ValueError("measured rates imply a transmittance above one")
    return PairSourceParams(pair_rate=pair_rate, eta_s=eta_s, eta_i=eta_i,
                            background_s=background_s, background_i=background_i, **kwargs)


@dataclass
class DelayHistogram:
    """Counts of ``t_b - t_a`` over ``[lo, lo + n_bins * bin_width)`` (ps)."""

    bin_width: int
    lo: int
    counts: np.ndarray
    singles: dict[int, int] = field(default_factory=dict)
    duration: float = 0.0
    pairs_evaluated: int = 0

    @property
    def hi(self) -> int:
        return self.lo + self.bin_width * self.counts.size

    @property
    def edges(self) -> np.ndarray:
        return self.lo + self.bin_width * np.arange(self.counts.size + 1, dtype=np.int64)

    @property
    def centers(self) -> np.ndarray:
        return self.edges[:-1] + self.bin_width / 2

    def window_counts(self, start: float, width: float) -> int:
        """Counts in bins whose centres fall in ``[start, start + width)``."""
        if start < self.lo or start + width > self.hi:
            raise ValueError("window outside the histogram range")
        c = self.centers
        return int(self.counts[(c >= start) & (c < start + width)].sum())

    def window_bins(self, start: float, width: float) -> int:
        c = self.centers
        return int(np.count_nonzero((c >= start) & (c < start + width)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(HISTOGRAM_CSV_HEADER + "\n")
            for d, n in zip(self.edges[:-1].tolist(), self.counts.tolist()):
                fh.write(f"{d},{n}\n")


def _check_range(bin_width, range_):
    lo, hi = (int(v) for v in range_)
    bw = int(bin_width)
    if bw <= 0 or bw != bin_width:
        raise ValueError("bin_width must be a positive integer number of ps")
    if hi <= lo:
        raise ValueError("range must be increasing")
    n_bins = -(-(hi - lo) // bw)
    return bw, lo, n_bins


def _pair_bins(a, b, lo, bw, n_bins):
    hi = lo + bw * n_bins
    first = np.searchsorted(b, a + lo, side="left")
    last = np.searchsorted(b, a + hi, side="left")
    n = last - first
    total = int(n.sum())
    if total == 0:
        return np.zeros(n_bins, dtype=np.int64), 0
    rep = np.repeat(np.arange(a.size), n)
    offs = np.arange(total) - np.repeat(np.cumsum(n) - n, n)
    delays = b[first[rep] + offs] - a[rep]
    return np.bincount((delays - lo) // bw, minlength=n_bins).astype(np.int64), total


def _histogram_counts(a, b, lo, bw, n_bins, n_jobs=1):
    if n_jobs == 1 or a.size < 2:
        return _pair_bins(a, b, lo, bw, n_bins)
    parts = np.array_split(a, max(1, min(a.size, abs(n_jobs) if n_jobs > 0 else 8)))
    res = Parallel(n_jobs=n_jobs)(delayed(_pair_bins)(p, b, lo, bw, n_bins) for p in parts)
    return sum(r[0] for r in res), sum(r[1] for r in res)


def delay_histogram(stream: TimeTagStream, ch_a: int, ch_b: int, bin_width: int = 100,
                    range: tuple[int, int] = (0, 250_000), n_jobs: int = 1) -> DelayHistogram:
    """All-pairs delays ``t_b - t_a`` inside ``range`` (ps), binned at ``bin_width``."""
    for ch in (ch_a, ch_b):
        if ch not in stream.channels:
            raise KeyError(f"channel {ch} not present in stream")
    bw, lo, n_bins = _check_range(bin_width, range)
    counts, total = _histogram_counts(stream.channels[ch_a], stream.channels[ch_b], lo, bw, n_bins, n_jobs)
    singles = {ch_a: int(stream.channels[ch_a].size), ch_b: int(stream.channels[ch_b].size)}
    return DelayHistogram(bw, lo, counts, singles, stream.duration, total)


def locate_peak(hist: DelayHistogram, width: float) -> float:
    """Delay (ps) of the strongest feature, matched-filtered with a triangle of base ``width``."""
    half = max(1, int(round(width / 2 / hist.bin_width)))
    kernel = 1.0 - np.abs(np.arange(-half, half + 1)) / (half + 1)
    smooth = np.convolve(hist.counts.astype(float), kernel, mode="same")
    k = int(np.argmax(smooth))
    return float(hist.centers[k])


@dataclass(frozen=True)
class CarResult:
    coincidences: int
    accidentals: float
    car: float
    uncertainty: float
    infinite: bool = False
    analytic_accidentals: float | None = None


def car(hist: DelayHistogram, signal_window: tuple[float, float],
        accidental_windows: list[tuple[float, float]]) -> CarResult:
    """Coincidence-to-accidental ratio from a signal window and side windows.

    Windows are ``(start, width)`` in ps and select bins by their centres.
    The analytic ``S_a S_b tau T`` estimate is reported alongside.
    """
    s0, sw = signal_window
    if not accidental_windows:
        raise ValueError("at least one accidental window is required")
    for a0, aw in accidental_windows:
        if a0 < s0 + sw and s0 < a0 + aw:
            raise ValueError(f"accidental window ({a0}, {aw}) overlaps the signal window")
    c = hist.window_counts(s0, sw)
    n_sig = hist.window_bins(s0, sw)
    side = [(hist.window_counts(a0, aw), hist.window_bins(a0, aw)) for a0, aw in accidental_windows]
    side_counts = sum(n for n, _ in side)
    side_bins = sum(b for _, b in side)
    if side_bins == 0 or n_sig == 0:
        raise ValueError("windows must contain at least one bin")
    scale = n_sig / side_bins
    acc = side_counts * scale
    sigma_acc = math.sqrt(side_counts) * scale

    analytic = None
    if hist.duration > 0 and len(hist.singles) == 2:
        sa, sb = (n / hist.duration for n in hist.singles.values())
        analytic = accidental_rate(sa, sb, n_sig * hist.bin_width / PS_PER_S) * hist.duration

    if acc == 0:
        return CarResult(c, 0.0, math.inf, math.inf, True, analytic)
    ratio = c / acc
    if c == 0:
        # one-count scale in place of a zero Poisson error
        return CarResult(c, acc, 0.0, 1.0 / acc, False, analytic)
    sigma = ratio * math.sqrt(1.0 / c + (sigma_acc / acc) ** 2)
    return CarResult(c, acc, ratio, sigma, False, analytic)


def side_windows(peak: float, width: float, lo: float, hi: float, guard: float | None = None):
    """Tile ``[lo, hi)`` with ``width``-wide windows kept ``guard`` away from the peak window."""
    guard = 2 * width if guard is None else guard
    s0 = peak - width / 2
    out = []
    start = s0 - guard - width
    while start >= lo:
        out.append((start, width))
        start -= width
    start = s0 + width + guard
    while start + width <= hi:
        out.append((start, width))
        start += width
    return sorted(out)


class CoincidenceCounter(BaseEstimator):
    """Incremental delay histogram over consecutive stream chunks.

    ``partial_fit`` keeps the tags near the previous chunk's end so that pairs
    straddling a chunk boundary are counted exactly once; the result equals a
    single pass over the concatenated stream.
    """

    def __init__(self, ch_a=0, ch_b=1, bin_width=100, range_lo=0, range_hi=250_000, n_jobs=1):
        self.ch_a = ch_a
        self.ch_b = ch_b
        self.bin_width = bin_width
        self.range_lo = range_lo
        self.range_hi = range_hi
        self.n_jobs = n_jobs

    def _reset(self):
        bw, lo, n_bins = _check_range(self.bin_width, (self.range_lo, self.range_hi))
        self.histogram_ = DelayHistogram(bw, lo, np.zeros(n_bins, dtype=np.int64),
                                         {self.ch_a: 0, self.ch_b: 0}, 0.0, 0)
        self._tail_a = np.zeros(0, dtype=np.int64)
        self._tail_b = np.zeros(0, dtype=np.int64)
        self._end = None

    def fit(self, stream: TimeTagStream, y=None):
        self._reset()
        return self.partial_fit(stream)

    def partial_fit(self, stream: TimeTagStream, y=None):
        if not hasattr(self, "histogram_"):
            self._reset()
        for ch in (self.ch_a, self.ch_b):
            if ch not in stream.channels:
                raise KeyError(f"channel {ch} not present in stream")
        h = self.histogram_
        a, b = stream.channels[self.ch_a], stream.channels[self.ch_b]
        if self._end is not None:
            first = min([t[0] for t in (a, b) if t.size], default=self._end)
            if first < self._end or stream.start_ps < self._end:
                raise ValueError("chunks must be supplied in time order without overlap")
        lo, bw, n_bins = h.lo, h.bin_width, h.counts.size
        hi = h.hi
        counts, total = _histogram_counts(a, b, lo, bw, n_bins, self.n_jobs)
        for aa, bb in ((self._tail_a, b), (a, self._tail_b)):
            if aa.size and bb.size:
                c, t = _pair_bins(aa, bb, lo, bw, n_bins)
                counts += c
                total += t
        h.counts += counts
        h.pairs_evaluated += total
        h.singles[self.ch_a] += int(a.size)
        h.singles[self.ch_b] += int(b.size)
        h.duration += stream.duration

        end = stream.end_ps
        self._tail_a = np.concatenate([self._tail_a, a])
        self._tail_a = self._tail_a[self._tail_a >= end - hi]
        self._tail_b = np.concatenate([self._tail_b, b])
        self._tail_b = self._tail_b[self._tail_b >= end + lo] if lo < 0 else self._tail_b[:0]
        self._end = end
        return self

    def car(self, signal_window, accidental_windows) -> CarResult:
        return car(self.histogram_, signal_window, accidental_windows)
