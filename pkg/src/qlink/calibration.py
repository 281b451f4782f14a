"""Bounded derivative-free fitting of model parameters to published figures of merit."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy.optimize import brentq, minimize

from qlink.channel import ChannelParams, DetectorParams
from qlink.decoy import ProtocolParams, background_yield, link_eta, secret_key_rate


class CalibrationError(ValueError):
    """Infeasible bounds or targets."""


@dataclass(frozen=True)
class CalibrationResult:
    values: dict[str, float]
    predictions: dict[str, float]
    residuals: dict[str, float]  # relative, (prediction - target) / target
    objective: float
    n_evaluations: int


def relative_residuals(predictions: dict, targets: dict) -> dict[str, float]:
    return {k: (predictions[k] - t) / t for k, t in targets.items()}


def calibrate(evaluate: Callable[[dict], dict], targets: dict[str, float],
              bounds: dict[str, tuple[float, float]], start: dict[str, float],
              prior: Callable[[dict], float] | None = None, restarts: int = 3) -> CalibrationResult:
    """Minimize summed squared relative residuals over the box ``bounds``.

    Parameters are mapped to the unit cube before a bounded Nelder-Mead search.
    Starting points are ``start`` (clipped into the box) followed by
    ``restarts`` fixed interior points, so the result is deterministic.
    ``prior`` adds a penalty on the parameter values.
    """
    if not targets:
        raise CalibrationError("no calibration targets given")
    if any(t == 0 for t in targets.values()):
        raise CalibrationError("targets must be non-zero for relative residuals")
    names = list(bounds)
    for n in names:
        lo, hi = bounds[n]
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
            raise CalibrationError(f"infeasible bounds for {n}: [{lo}, {hi}]")
        if n not in start:
            raise CalibrationError(f"no starting value for {n}")
    lo = np.array([bounds[n][0] for n in names], dtype=float)
    span = np.array([bounds[n][1] - bounds[n][0] for n in names], dtype=float)
    fixed = {k: v for k, v in start.items() if k not in bounds}
    count = 0

    def values_of(u):
        return dict(fixed, **{n: float(lo[i] + span[i] * min(max(u[i], 0.0), 1.0))
                              for i, n in enumerate(names)})

    def score(vals):
        nonlocal count
        count += 1
        pred = evaluate(vals)
        res = relative_residuals(pred, targets)
        total = sum(r * r for r in res.values())
        return total + (prior(vals) if prior else 0.0), pred, res

    if not names:
        obj, pred, res = score(dict(start))
        return CalibrationResult(dict(start), pred, res, obj, count)

    with np.errstate(divide="ignore", invalid="ignore"):
        u0 = np.where(span > 0, (np.array([start[n] for n in names]) - lo) / span, 0.0)
    starts = [np.clip(u0, 0, 1)] + [np.full(len(names), f) for f in (0.25, 0.5, 0.75)[:restarts]]
    best = None
    for u in starts:
        res = minimize(lambda x: score(values_of(x))[0], u, method="Nelder-Mead",
                       bounds=[(0.0, 1.0)] * len(names),
                       options={"xatol": 1e-8, "fatol": 1e-14, "maxiter": 4000})
        if best is None or res.fun < best.fun:
            best = res
    vals = values_of(best.x)
    obj, pred, res = score(vals)
    return CalibrationResult(vals, pred, res, obj, count)


# --- key-rate targets -------------------------------------------------------------

SKR_PARAMETERS = ("e_opt", "background_rate", "receiver_efficiency")


def skr_model(protocol: ProtocolParams, channel: ChannelParams, detector: DetectorParams,
              n_detectors: int = 2, target_length: float = 224.0, crossing_tol: float = 1e-6):
    """Evaluator mapping {e_opt, background_rate, receiver_efficiency} to key-rate figures."""

    def evaluate(vals: dict) -> dict:
        p = replace(protocol, e_opt=vals["e_opt"],
                    y0=background_yield(vals["background_rate"], protocol.clock_rate, n_detectors))
        rec = vals["receiver_efficiency"]
        skr = secret_key_rate(p, link_eta(channel, target_length, detector, rec)).rate

        def raw(length):
            return secret_key_rate(p, link_eta(channel, length, detector, rec)).raw_rate

        # the unclamped rate changes sign exactly where the key rate reaches zero
        if raw(0.0) <= 0:
            zc = 0.0
        elif raw(1000.0) > 0:
            zc = 1000.0
        else:
            zc = brentq(raw, 0.0, 1000.0, xtol=crossing_tol)
        return {"skr": skr, "zero_crossing": zc}

    return evaluate


def gaussian_prior(name: str, center: float, weight: float) -> Callable[[dict], float]:
    """Weak quadratic pull of ``name`` toward ``center`` in relative units."""

    def prior(vals):
        return weight * ((vals[name] - center) / center) ** 2

    return prior
