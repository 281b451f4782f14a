"""Polarization states on the Poincaré sphere, EPC retarder stacks, alignment and drift."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import beta as beta_dist

_NORM_TOL = 1e-9


@dataclass(frozen=True)
class PolarizationState:
    """Stokes description: total power ``s0`` and normalized vector ``s`` (|s| = dop)."""

    s: tuple[float, float, float]
    s0: float = 1.0

    def __post_init__(self):
        vec = np.asarray(self.s, dtype=float)
        if vec.shape != (3,):
            raise ValueError("Stokes vector must have three components")
        if self.s0 < 0:
            raise ValueError("S0 must be non-negative")
        if vec @ vec > 1 + _NORM_TOL:
            raise ValueError(f"|s| = {math.sqrt(vec @ vec)} exceeds 1")
        object.__setattr__(self, "s", tuple(float(v) for v in vec))

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.s)

    @property
    def dop(self) -> float:
        return float(np.linalg.norm(self.s))

    @classmethod
    def from_vector(cls, vec, s0: float = 1.0) -> "PolarizationState":
        vec = np.asarray(vec, dtype=float)
        norm = np.linalg.norm(vec)
        # absorb round-off so that repeated rotations never trip the |s| <= 1 check
        if 1 < norm <= 1 + _NORM_TOL:
            vec = vec / norm
        return cls(tuple(vec), s0)


H = PolarizationState((1.0, 0.0, 0.0))
V = PolarizationState((-1.0, 0.0, 0.0))
D = PolarizationState((0.0, 1.0, 0.0))
A = PolarizationState((0.0, -1.0, 0.0))
R = PolarizationState((0.0, 0.0, 1.0))
L = PolarizationState((0.0, 0.0, -1.0))


def rotation_matrix(axis, angle: float) -> np.ndarray:
    """Right-handed rotation of Stokes space about ``axis`` by ``angle`` (Rodrigues)."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * kx + (1 - math.cos(angle)) * (kx @ kx)


def retarder_matrix(orientation: float, retardance: float) -> np.ndarray:
    """Linear retarder with fast axis at ``orientation`` (rad from horizontal)."""
    axis = (math.cos(2 * orientation), math.sin(2 * orientation), 0.0)
    return rotation_matrix(axis, retardance)


@dataclass(frozen=True)
class RetarderStack:
    """Cascade of fixed-axis variable retarders driven in integer steps.

    Retardance of stage i is ``steps[i] * quantization``.
    """

    orientations: tuple[float, ...] = (0.0, math.pi / 4, 0.0, math.pi / 4)
    steps: tuple[int, ...] = (0, 0, 0, 0)
    quantization: float = 0.01

    def __post_init__(self):
        if len(self.orientations) != len(self.steps):
            raise ValueError("one step count per stage is required")
        if self.quantization <= 0:
            raise ValueError("quantization must be positive")
        object.__setattr__(self, "steps", tuple(int(k) for k in self.steps))

    @property
    def retardances(self) -> np.ndarray:
        return np.asarray(self.steps, dtype=float) * self.quantization

    def with_steps(self, steps) -> "RetarderStack":
        return RetarderStack(self.orientations, tuple(int(k) for k in steps), self.quantization)

    def matrix(self) -> np.ndarray:
        m = np.eye(3)
        for theta, delta in zip(self.orientations, self.retardances):
            m = retarder_matrix(theta, delta) @ m
        return m

    @classmethod
    def random(cls, rng: np.random.Generator, quantization: float = 0.01,
               orientations=(0.0, math.pi / 4, 0.0, math.pi / 4)) -> "RetarderStack":
        steps = rng.integers(0, int(round(2 * math.pi / quantization)), len(orientations))
        return cls(tuple(orientations), tuple(int(k) for k in steps), quantization)


def apply_stack(stack: RetarderStack, state: PolarizationState) -> PolarizationState:
    """Propagate ``state`` through every stage; power and DOP are unchanged."""
    return PolarizationState.from_vector(stack.matrix() @ state.vector, state.s0)


def poincare_angle(a: PolarizationState, b: PolarizationState) -> float:
    """Great-circle angle between two states on the Poincaré sphere."""
    if a.dop == 0 or b.dop == 0:
        raise ValueError("angle undefined for unpolarized light")
    c = float(a.vector @ b.vector) / (a.dop * b.dop)
    return math.acos(min(1.0, max(-1.0, c)))


def qber_for_state(state: PolarizationState, basis: PolarizationState, base_error: float = 0.0) -> float:
    """Error probability when ``state`` is measured against the ``basis`` pole."""
    if not 0 <= base_error <= 0.5:
        raise ValueError("base_error must lie in [0, 0.5]")
    if state.dop == 0 or basis.dop == 0:
        raise ValueError("QBER undefined for unpolarized light")
    # cos of the Poincare angle straight from the dot product avoids an acos/cos round trip
    cos = min(1.0, max(-1.0, float(state.vector @ basis.vector) / (state.dop * basis.dop)))
    return base_error + (1 - 2 * base_error) * (1 - cos) / 2


def base_qber_from_extinction(extinction_db: float) -> float:
    """Wrong-port fraction of a polarizing beamsplitter with the given extinction ratio."""
    return 1.0 / (1.0 + 10 ** (extinction_db / 10))


def extinction_from_angle(theta: float) -> float:
    """Extinction ratio (dB) of the PBS outputs for a state ``theta`` from its pole."""
    wrong = (1 - math.cos(theta)) / 2
    if wrong == 0:
        return math.inf
    return 10 * math.log10((1 - wrong) / wrong)


def angle_for_extinction(extinction_db: float) -> float:
    return math.acos(1 - 2 * base_qber_from_extinction(extinction_db))


class QberEstimate(NamedTuple):
    qber: float
    sigma: float
    lower: float
    upper: float


def qber_from_counts(n_correct: int, n_wrong: int) -> QberEstimate:
    """Point estimate and one-sigma interval for a counted error rate.

    Normal approximation for 100 counts or more; below that the central 68.27%
    Clopper-Pearson interval is used and ``sigma`` is its half width.
    """
    total = n_correct + n_wrong
    if n_correct < 0 or n_wrong < 0 or total <= 0:
        raise ValueError("need non-negative counts with a positive total")
    q = n_wrong / total
    if total >= 100:
        sigma = math.sqrt(q * (1 - q) / total)
        return QberEstimate(q, sigma, max(0.0, q - sigma), min(1.0, q + sigma))
    alpha = 1 - 0.6826894921370859
    lo = 0.0 if n_wrong == 0 else float(beta_dist.ppf(alpha / 2, n_wrong, n_correct + 1))
    hi = 1.0 if n_correct == 0 else float(beta_dist.ppf(1 - alpha / 2, n_wrong + 1, n_correct))
    return QberEstimate(q, (hi - lo) / 2, lo, hi)


# --- alignment -------------------------------------------------------------------

@dataclass
class AlignmentResult:
    stack: RetarderStack
    converged: bool
    evaluations: int
    distance: float
    trajectory: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def extinction_db(self) -> float:
        return extinction_from_angle(self.distance)

    @property
    def base_qber(self) -> float:
        return (1 - math.cos(self.distance)) / 2

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("iter,objective,distance_rad\n")
            w = csv.writer(fh, lineterminator="\n")
            for it, obj, dist in self.trajectory:
                w.writerow([it, format(obj, ".12g"), format(dist, ".12g")])


def projected_power(target: PolarizationState) -> Callable[[PolarizationState], float]:
    """Power transmitted by an ideal polarizer matched to ``target``."""
    t = target.vector / target.dop

    def power(state: PolarizationState) -> float:
        return state.s0 * (1 + float(state.vector @ t)) / 2

    return power


def align_gradient_descent(stack: RetarderStack, input_state: PolarizationState,
                           target: PolarizationState, tolerance: float = 0.05,
                           budget: int = 500, objective=None, initial_step: float = 0.5,
                           ) -> AlignmentResult:
    """Drive the stack until the output is within ``tolerance`` rad of ``target``.

    The objective (default: power through a polarizer matched to the target) is
    maximized by normalized gradient ascent. Gradients come from symmetric
    differences of one quantization step per stage; the step length adapts
    (grow on success, halve on failure) and is rounded to whole steps. When the
    rounded step vanishes, the single stage with the largest gradient moves by one
    step, ties going to the lowest stage index. Running out of ``budget``
    objective evaluations ends the search unconverged.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    objective = objective or projected_power(target)
    q = stack.quantization
    k = np.asarray(stack.steps, dtype=np.int64)
    evals = 0

    def f(steps):
        nonlocal evals
        evals += 1
        return objective(apply_stack(stack.with_steps(steps), input_state))

    def dist(steps):
        return poincare_angle(apply_stack(stack.with_steps(steps), input_state), target)

    current = f(k)
    d = dist(k)
    trajectory = [(0, current, d)]
    step = initial_step
    it = 0
    n = k.size
    while d >= tolerance and evals + 2 * n + 1 <= budget:
        it += 1
        grad = np.empty(n)
        for i in range(n):
            e = np.zeros(n, dtype=np.int64)
            e[i] = 1
            grad[i] = (f(k + e) - f(k - e)) / (2 * q)
        norm = np.linalg.norm(grad)
        if norm == 0:
            break
        moved = False
        while evals < budget:
            delta = np.rint(step * grad / norm / q).astype(np.int64)
            if not delta.any():
                delta = np.zeros(n, dtype=np.int64)
                i = int(np.argmax(np.abs(grad)))  # first index wins ties
                delta[i] = 1 if grad[i] > 0 else -1
            trial = f(k + delta)
            if trial > current:
                k = k + delta
                current = trial
                step *= 1.5
                moved = True
                break
            if np.abs(delta).max() <= 1:
                break
            step /= 2
        d = dist(k)
        trajectory.append((it, current, d))
        if not moved:
            break
    return AlignmentResult(stack.with_steps(k), d < tolerance, evals, d, trajectory)


# --- drift -----------------------------------------------------------------------

@dataclass(frozen=True)
class DriftProcess:
    """Angular Brownian motion on the sphere plus sudden random rotations.

    ``diffusion_rate`` is the mean-square angular displacement per second
    (rad^2/s); each step event is ``(time_s, rotation_angle_rad)`` about a
    uniformly random axis.
    """

    diffusion_rate: float = 0.0
    step_events: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.diffusion_rate < 0:
            raise ValueError("diffusion_rate must be non-negative")


@dataclass
class DriftTimeline:
    times: np.ndarray
    stokes: np.ndarray  # (n, 3)

    def qber(self, basis: PolarizationState = H, base_error: float = 0.0) -> np.ndarray:
        b = basis.vector / basis.dop
        norms = np.linalg.norm(self.stokes, axis=1)
        cos = np.clip(self.stokes @ b / norms, -1, 1)
        return base_error + (1 - 2 * base_error) * (1 - cos) / 2

    def to_csv(self, path, basis: PolarizationState = H, base_error: float = 0.0) -> None:
        q = self.qber(basis, base_error)
        with open(path, "w", newline="") as fh:
            fh.write("time_s,s1,s2,s3,qber\n")
            w = csv.writer(fh, lineterminator="\n")
            for t, s, e in zip(self.times, self.stokes, q):
                w.writerow([format(float(t), ".12g")] + [format(float(v), ".12g") for v in s]
                           + [format(float(e), ".12g")])


def _random_axis(rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def simulate_drift(process: DriftProcess, initial: PolarizationState, duration: float,
                   dt: float, seed: int) -> DriftTimeline:
    """Sampled trajectory of the normalized Stokes vector, reproducible per seed."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if duration < 0:
        raise ValueError("duration must be non-negative")
    n = int(math.floor(duration / dt + 1e-9)) + 1
    times = np.arange(n) * dt
    diff_ss, event_ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.Generator(np.random.PCG64(diff_ss))
    ev_rng = np.random.Generator(np.random.PCG64(event_ss))
    events = sorted(process.step_events)
    event_rot = [rotation_matrix(_random_axis(ev_rng), mag) for _, mag in events]
    sigma = math.sqrt(process.diffusion_rate * dt / 2)
    increments = rng.standard_normal((n, 2)) * sigma if sigma else None
    out = np.empty((n, 3))
    s = initial.vector.copy()
    dop = np.linalg.norm(s)
    out[0] = s
    ev = 0
    for i in range(1, n):
        if increments is not None:
            u = s / dop
            helper = np.array([1.0, 0, 0]) if abs(u[0]) < 0.9 else np.array([0, 1.0, 0])
            e1 = np.cross(u, helper)
            e1 /= np.linalg.norm(e1)
            e2 = np.cross(u, e1)
            u = u + increments[i, 0] * e1 + increments[i, 1] * e2
            s = dop * u / np.linalg.norm(u)
        while ev < len(events) and events[ev][0] <= times[i]:
            s = event_rot[ev] @ s
            ev += 1
        out[i] = s
    return DriftTimeline(times, out)


def state_at_angle(theta: float, pole: PolarizationState = H, azimuth: float = 0.0) -> PolarizationState:
    """Pure state ``theta`` rad from ``pole``, at ``azimuth`` around it."""
    p = pole.vector / pole.dop
    helper = np.array([0, 0, 1.0]) if abs(p[2]) < 0.9 else np.array([0, 1.0, 0])
    e1 = np.cross(p, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(p, e1)
    v = math.cos(theta) * p + math.sin(theta) * (math.cos(azimuth) * e1 + math.sin(azimuth) * e2)
    return PolarizationState.from_vector(v)


def random_pure_state(rng: np.random.Generator) -> PolarizationState:
    """Uniformly distributed point on the Poincare sphere."""
    return PolarizationState.from_vector(_random_axis(rng))


def _alignment_trial(seed_seq, quantization, tolerance, budget, initial_step):
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    stack = RetarderStack.random(rng, quantization)
    return align_gradient_descent(stack, random_pure_state(rng), random_pure_state(rng),
                                  tolerance, budget, initial_step=initial_step)


def alignment_trials(n_trials: int, seed: int, quantization: float = 0.01, tolerance: float = 0.05,
                     budget: int = 500, initial_step: float = 0.5, n_jobs: int = 1) -> list[AlignmentResult]:
    """Independent alignments from random stacks, inputs and targets.

    Trial ``i`` always draws from the ``i``-th child of ``seed``, whatever ``n_jobs``.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be positive")
    children = np.random.SeedSequence(seed).spawn(n_trials)
    args = (quantization, tolerance, budget, initial_step)
    if n_jobs == 1:
        return [_alignment_trial(c, *args) for c in children]
    return Parallel(n_jobs=n_jobs)(delayed(_alignment_trial)(c, *args) for c in children)
