"""Asymptotic two-intensity decoy-state BB84.

Gain/QBER model for weak coherent pulses, lower bound on the single-photon
yield and upper bound on its error rate from one signal and one decoy
intensity, the resulting secret key rate, distance sweeps and a Monte Carlo
gate simulator used as an independent check of the analytic model.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from qlink.channel import ChannelParams, DetectorParams, transmittance
from qlink.physics import binary_entropy

SKR_CSV_HEADER = (
    "length_km,eta,Q_mu,E_mu,Q_nu,E_nu,Y1_lower,e1_upper,Q1,"
    "skr_bits_per_clock,skr_bits_per_s"
)


def background_yield(background_rate: float, clock_rate: float, n_detectors: int = 2) -> float:
    """Per-gate background click probability from a per-detector count rate."""
    if background_rate < 0 or clock_rate <= 0 or n_detectors < 1:
        raise ValueError("invalid background rate, clock rate or detector count")
    return n_detectors * background_rate / clock_rate


@dataclass(frozen=True)
class ProtocolParams:
    mu_signal: float = 0.6
    mu_decoy: float = 0.5
    clock_rate: float = 1e9  # Hz
    sifting: float = 0.5
    ec_efficiency: float = 1.16
    e_opt: float = 0.016
    e0: float = 0.5
    y0: float = 0.0

    def __post_init__(self):
        if not self.mu_signal > self.mu_decoy > 0:
            raise ValueError(
                f"need mu_signal > mu_decoy > 0, got {self.mu_signal}, {self.mu_decoy}")
        if self.clock_rate <= 0:
            raise ValueError("clock_rate must be positive")
        if not 0 < self.sifting <= 1:
            raise ValueError("sifting factor must be in (0, 1]")
        if self.ec_efficiency < 1:
            raise ValueError("error-correction efficiency must be >= 1")
        if not (0 <= self.e_opt <= 0.5 and 0 <= self.e0 <= 0.5):
            raise ValueError("e_opt and e0 must lie in [0, 0.5]")
        if not 0 <= self.y0 < 1:
            raise ValueError("background yield must lie in [0, 1)")


@dataclass(frozen=True)
class GainQber:
    gain: float
    qber: float


@dataclass(frozen=True)
class SkrResult:
    rate: float  # bits per clock, clamped at zero
    raw_rate: float  # unclamped analytic value, for diagnostics
    y1_lower: float
    e1_upper: float
    e1_unbounded: bool
    q1: float
    signal: GainQber
    decoy: GainQber
    eta: float


def gain_and_qber(mu, eta, params: ProtocolParams) -> GainQber:
    """Expected gain and QBER of pulses with mean photon number ``mu``."""
    if np.any(np.asarray(mu) < 0):
        raise ValueError("mu must be non-negative")
    if np.any((np.asarray(eta) < 0) | (np.asarray(eta) > 1)):
        raise ValueError("eta must lie in [0, 1]")
    detected = -np.expm1(-np.multiply(eta, mu))
    gain = params.y0 + detected
    with np.errstate(invalid="ignore", divide="ignore"):
        qber = (params.e0 * params.y0 + params.e_opt * detected) / gain
    # gain == 0 only for mu*eta == 0 and y0 == 0; report the vacuum error by convention
    qber = np.where(gain > 0, qber, params.e0)
    if np.ndim(gain) == 0:
        return GainQber(float(gain), float(qber))
    return GainQber(gain, qber)


def yield_bounds(signal: GainQber, decoy: GainQber, mu: float, nu: float, y0: float,
                 e0: float = 0.5) -> tuple[float, float, bool]:
    """Single-photon yield lower bound and error upper bound.

    Returns ``(y1_lower, e1_upper, unbounded)``; ``unbounded`` is set when the yield
    bound collapses to zero and no finite error bound exists (``e1_upper`` is then 0.5).
    """
    if not mu > nu > 0:
        raise ValueError(f"need mu > nu > 0, got mu={mu}, nu={nu}")
    y1 = (mu / (mu * nu - nu ** 2)) * (
        decoy.gain * math.exp(nu)
        - signal.gain * math.exp(mu) * nu ** 2 / mu ** 2
        - (mu ** 2 - nu ** 2) / mu ** 2 * y0
    )
    y1 = min(max(y1, 0.0), 1.0)
    if y1 == 0.0:
        return 0.0, 0.5, True
    e1 = (decoy.qber * decoy.gain * math.exp(nu) - e0 * y0) / (y1 * nu)
    return y1, min(max(e1, 0.0), 0.5), False


def secret_key_rate(params: ProtocolParams, eta: float) -> SkrResult:
    """Asymptotic secret key rate in bits per clock at overall transmittance ``eta``."""
    mu, nu = params.mu_signal, params.mu_decoy
    sig = gain_and_qber(mu, eta, params)
    dec = gain_and_qber(nu, eta, params)
    y1, e1, unbounded = yield_bounds(sig, dec, mu, nu, params.y0, params.e0)
    q1 = y1 * mu * math.exp(-mu)
    if unbounded:
        privacy = 0.0
    else:
        privacy = q1 * (1.0 - binary_entropy(e1))
    leak = sig.gain * params.ec_efficiency * binary_entropy(sig.qber)
    raw = params.sifting * (privacy - leak)
    return SkrResult(
        rate=max(raw, 0.0), raw_rate=raw, y1_lower=y1, e1_upper=e1, e1_unbounded=unbounded,
        q1=q1, signal=sig, decoy=dec, eta=float(eta),
    )


def link_eta(channel: ChannelParams, length: float, detector: DetectorParams,
             receiver_eff: float = 1.0) -> float:
    return float(transmittance(channel, length, receiver_eff, detector.efficiency))


def zero_crossing(params: ProtocolParams, channel: ChannelParams, detector: DetectorParams,
                  receiver_eff: float = 1.0, lo: float = 0.0, hi: float = 1000.0,
                  tol: float = 0.1) -> float | None:
    """Largest length (km) with a positive key rate, by bisection to ``tol``.

    Returns ``None`` if the rate is already zero at ``lo``; returns ``hi`` if it is
    still positive there.
    """

    def positive(length):
        return secret_key_rate(params, link_eta(channel, length, detector, receiver_eff)).rate > 0

    if not positive(lo):
        return None
    if positive(hi):
        return hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if positive(mid):
            lo = mid
        else:
            hi = mid
    return lo


@dataclass
class SkrCurve:
    lengths: np.ndarray
    results: list[SkrResult]
    clock_rate: float
    zero_crossing: float | None = None

    @property
    def rates(self) -> np.ndarray:
        return np.array([r.rate for r in self.results])

    def rows(self):
        for length, r in zip(self.lengths, self.results):
            yield [
                float(length), r.eta, r.signal.gain, r.signal.qber, r.decoy.gain, r.decoy.qber,
                r.y1_lower, r.e1_upper, r.q1, r.rate, r.rate * self.clock_rate,
            ]

    def to_csv(self, fh=None) -> str:
        """Write the curve with the fixed column header; returns the text if ``fh`` is None."""
        buf = fh if fh is not None else io.StringIO()
        buf.write(SKR_CSV_HEADER + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        for row in self.rows():
            writer.writerow([_fmt(v) for v in row])
        return buf.getvalue() if fh is None else ""


def _fmt(value: float) -> str:
    return format(float(value), ".12g")


def sweep_distance(params: ProtocolParams, channel: ChannelParams, detector: DetectorParams,
                   l_min: float, l_max: float, step: float, receiver_eff: float = 1.0,
                   n_jobs: int = 1) -> SkrCurve:
    """Key rate on a length grid plus the zero-crossing length (0.1 km resolution)."""
    if step <= 0:
        raise ValueError("step must be positive")
    if l_min > l_max:
        raise ValueError("l_min must not exceed l_max")
    n = int(math.floor((l_max - l_min) / step + 1e-9)) + 1
    lengths = l_min + step * np.arange(n)
    etas = [link_eta(channel, length, detector, receiver_eff) for length in lengths]
    if n_jobs == 1:
        results = [secret_key_rate(params, e) for e in etas]
    else:
        results = Parallel(n_jobs=n_jobs)(delayed(secret_key_rate)(params, e) for e in etas)
    crossing = None
    positive = [r.rate > 0 for r in results]
    if positive[0]:
        last = max(i for i, p in enumerate(positive) if p)
        if last == n - 1:
            crossing = float(lengths[-1])
        else:
            crossing = zero_crossing(params, channel, detector, receiver_eff,
                                     float(lengths[last]), float(lengths[last + 1]), tol=0.1)
    return SkrCurve(lengths, results, params.clock_rate, crossing)


@dataclass
class FluxRanking:
    best: tuple[float, float]
    table: list[tuple[float, float, float]] = field(default_factory=list)

    def rate(self, mu: float, nu: float) -> float:
        for m, n, r in self.table:
            if m == mu and n == nu:
                return r
        raise KeyError((mu, nu))


def optimize_flux(candidates, params: ProtocolParams, eta: float) -> FluxRanking:
    """Evaluate every (signal, decoy) pair with signal > decoy and rank by key rate."""
    values = sorted(set(float(c) for c in candidates))
    pairs = [(m, n) for m, n in itertools.permutations(values, 2) if m > n > 0]
    if len(values) < 2 or not pairs:
        raise ValueError("need at least two distinct positive candidate fluxes")
    table = []
    for m, n in pairs:
        r = secret_key_rate(replace(params, mu_signal=m, mu_decoy=n), eta)
        table.append((m, n, r.rate))
    # stable sort keeps enumeration order among equal rates
    table.sort(key=lambda row: -row[2])
    return FluxRanking(best=(table[0][0], table[0][1]), table=table)


# --- Monte Carlo gate simulation -------------------------------------------------

@dataclass
class GateTally:
    """Empirical outcome of a gate-by-gate simulation.

    ``photon_gates[n]``, ``photon_clicks[n]`` and ``photon_errors[n]`` are tallied
    per emitted photon number, so ``photon_yield(1)`` is the empirical
    single-photon yield.
    """

    n_gates: int
    clicks: int
    errors: int
    photon_gates: np.ndarray
    photon_clicks: np.ndarray
    photon_errors: np.ndarray

    @property
    def gain(self) -> float:
        return self.clicks / self.n_gates

    @property
    def gain_se(self) -> float:
        q = self.gain
        return math.sqrt(q * (1 - q) / self.n_gates)

    @property
    def qber(self) -> float:
        return self.errors / self.clicks if self.clicks else float("nan")

    @property
    def qber_se(self) -> float:
        if not self.clicks:
            return float("nan")
        e = self.qber
        return math.sqrt(max(e * (1 - e), 1.0 / self.clicks) / self.clicks)

    def as_gain_qber(self) -> GainQber:
        return GainQber(self.gain, self.qber)

    def photon_yield(self, n: int) -> tuple[float, float]:
        """Empirical yield of n-photon gates and its standard error."""
        gates = int(self.photon_gates[n]) if n < len(self.photon_gates) else 0
        if gates == 0:
            return float("nan"), float("nan")
        y = self.photon_clicks[n] / gates
        return float(y), math.sqrt(max(y * (1 - y), 1.0 / gates) / gates)

    def photon_error(self, n: int) -> tuple[float, float]:
        """Empirical error rate among clicks of n-photon gates and its standard error."""
        clicks = int(self.photon_clicks[n]) if n < len(self.photon_clicks) else 0
        if clicks == 0:
            return float("nan"), float("nan")
        e = self.photon_errors[n] / clicks
        return float(e), math.sqrt(max(e * (1 - e), 1.0 / clicks) / clicks)


def _simulate_chunk(mu, eta, y0, e_opt, e0, size, seed_seq):
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    photons = rng.poisson(mu, size)
    surviving = np.zeros(size, dtype=np.int64)
    lit = np.flatnonzero(photons)
    surviving[lit] = rng.binomial(photons[lit], eta)
    signal_click = surviving > 0
    background_click = rng.random(size) < y0
    click = signal_click | background_click
    idx = np.flatnonzero(click)
    p_err = np.where(signal_click[idx], e_opt, e0)
    err = np.zeros(size, dtype=bool)
    err[idx] = rng.random(idx.size) < p_err
    nmax = int(photons.max()) + 1 if size else 1
    return (
        np.bincount(photons, minlength=nmax),
        np.bincount(photons[click], minlength=nmax),
        np.bincount(photons[err], minlength=nmax),
    )


def simulate_gates(params: ProtocolParams, eta: float, n_gates: int, seed: int,
                   mu: float | None = None, chunk_size: int = 5_000_000,
                   n_jobs: int = 1) -> GateTally:
    """Gate-by-gate Monte Carlo of a weak-coherent-pulse link.

    Per gate: Poisson photon number, independent survival of each photon with
    probability ``eta``, a background click with probability ``params.y0``, and an
    error with probability ``e_opt`` (signal click) or ``e0`` (background only).

    Each fixed-size chunk draws from its own PCG64 substream spawned from
    ``seed``, so tallies depend only on ``seed`` and ``chunk_size``, never on
    ``n_jobs``.
    """
    if n_gates < 1:
        raise ValueError("n_gates must be >= 1")
    mu = params.mu_signal if mu is None else mu
    sizes = [chunk_size] * (n_gates // chunk_size)
    if n_gates % chunk_size:
        sizes.append(n_gates % chunk_size)
    streams = np.random.SeedSequence(seed).spawn(len(sizes))
    args = (mu, eta, params.y0, params.e_opt, params.e0)
    if n_jobs == 1:
        parts = [_simulate_chunk(*args, s, ss) for s, ss in zip(sizes, streams)]
    else:
        parts = Parallel(n_jobs=n_jobs)(
            delayed(_simulate_chunk)(*args, s, ss) for s, ss in zip(sizes, streams))
    width = max(len(p[0]) for p in parts)
    gates, clicks, errors = (np.zeros(width, dtype=np.int64) for _ in range(3))
    for g, c, e in parts:
        gates[: len(g)] += g
        clicks[: len(c)] += c
        errors[: len(e)] += e
    return GateTally(n_gates, int(clicks.sum()), int(errors.sum()), gates, clicks, errors)


# --- estimator interface ---------------------------------------------------------

class DecoyKeyRateModel(RegressorMixin, BaseEstimator):
    """Key rate versus fibre length as a scikit-learn style regressor.

    ``predict`` maps an array of lengths (km) to bits per clock; ``fit`` only
    validates the parameters, so the model works with ``clone`` and parameter
    searches.
    """

    def __init__(self, mu_signal=0.6, mu_decoy=0.5, clock_rate=1e9, sifting=0.5,
                 ec_efficiency=1.16, e_opt=0.016, e0=0.5, y0=0.0, attenuation=0.17,
                 extra_loss=0.0, detector_efficiency=0.93, receiver_efficiency=1.0):
        self.mu_signal = mu_signal
        self.mu_decoy = mu_decoy
        self.clock_rate = clock_rate
        self.sifting = sifting
        self.ec_efficiency = ec_efficiency
        self.e_opt = e_opt
        self.e0 = e0
        self.y0 = y0
        self.attenuation = attenuation
        self.extra_loss = extra_loss
        self.detector_efficiency = detector_efficiency
        self.receiver_efficiency = receiver_efficiency

    def fit(self, X=None, y=None):
        self.protocol_ = ProtocolParams(
            self.mu_signal, self.mu_decoy, self.clock_rate, self.sifting, self.ec_efficiency,
            self.e_opt, self.e0, self.y0)
        self.channel_ = ChannelParams(attenuation=self.attenuation,
                                      extra_insertion_loss=self.extra_loss)
        self.detector_ = DetectorParams(efficiency=self.detector_efficiency)
        return self

    def predict(self, X):
        check_is_fitted(self, "protocol_")
        lengths = check_array(X, ensure_2d=False).ravel()
        return np.array([
            secret_key_rate(self.protocol_, link_eta(self.channel_, length, self.detector_,
                                                     self.receiver_efficiency)).rate
            for length in lengths
        ])

    def zero_crossing(self, hi: float = 1000.0, tol: float = 1e-3):
        check_is_fitted(self, "protocol_")
        return zero_crossing(self.protocol_, self.channel_, self.detector_,
                             self.receiver_efficiency, 0.0, hi, tol)
