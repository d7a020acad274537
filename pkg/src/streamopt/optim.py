"""Streaming gradient estimators (SSG / PSSG) and their running averages.

One call to :func:`ssg_step` consumes one mini-batch: it folds the
previous iterate into the batch-size-weighted average, takes a gradient
step with the scheduled learning rate and optionally projects onto a
closed convex set. :func:`run` drives the step over a batch stream and
keeps snapshots on a grid of observation counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

from .models import GradientError, LossModel
from .schedules import ScheduleParams, batch_size, batch_sizes, cumulative_count, learning_rate
from .streams import StreamBatch

DIVERGENCE_NORM = 1e12


@dataclass(frozen=True)
class OptimizerState:
    t: int
    theta: np.ndarray
    theta_bar: np.ndarray
    n_cum: int = 0
    diverged: bool = False

    @classmethod
    def initial(cls, theta0) -> "OptimizerState":
        theta0 = np.array(theta0, dtype=float).reshape(-1)
        return cls(0, theta0, np.zeros_like(theta0), 0, False)


@dataclass(frozen=True)
class ProjectionSpec:
    """Closed convex set: ``none``, a Euclidean ``ball`` or a ``box``."""

    kind: str = "none"
    center: Optional[tuple] = None
    radius: float = math.inf
    lower: Optional[tuple] = None
    upper: Optional[tuple] = None

    def __post_init__(self):
        if self.kind == "ball":
            if self.center is None or not self.radius > 0 or math.isinf(self.radius):
                raise ValueError("ball projection needs a center and a finite positive radius")
            object.__setattr__(self, "center", tuple(map(float, self.center)))
        elif self.kind == "box":
            if self.lower is None or self.upper is None:
                raise ValueError("box projection needs lower and upper bounds")
            lo, hi = tuple(map(float, self.lower)), tuple(map(float, self.upper))
            if len(lo) != len(hi) or any(a > b for a, b in zip(lo, hi)):
                raise ValueError("box bounds must satisfy lower <= upper componentwise")
            object.__setattr__(self, "lower", lo)
            object.__setattr__(self, "upper", hi)
        elif self.kind != "none":
            raise ValueError(f"unknown projection kind {self.kind!r}")

    @classmethod
    def ball(cls, center, radius):
        return cls("ball", center=tuple(center), radius=float(radius))

    @classmethod
    def box(cls, lower, upper):
        return cls("box", lower=tuple(lower), upper=tuple(upper))

    def contains(self, theta, atol: float = 0.0) -> bool:
        theta = np.asarray(theta, dtype=float)
        if self.kind == "ball":
            return bool(np.linalg.norm(theta - np.asarray(self.center)) <= self.radius + atol)
        if self.kind == "box":
            return bool(np.all(theta >= np.asarray(self.lower) - atol) and np.all(theta <= np.asarray(self.upper) + atol))
        return True

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "ProjectionSpec":
        if not d:
            return cls()
        return cls(**d)


NO_PROJECTION = ProjectionSpec()


def project(theta, spec: ProjectionSpec = NO_PROJECTION) -> np.ndarray:
    """Euclidean projection of ``theta`` onto the set described by ``spec``."""
    theta = np.asarray(theta, dtype=float)
    if spec.kind == "ball":
        c = np.asarray(spec.center)
        dev = theta - c
        dist = np.linalg.norm(dev)
        if dist <= spec.radius:
            return theta.copy()
        return c + dev * (spec.radius / dist)
    if spec.kind == "box":
        return np.clip(theta, spec.lower, spec.upper)
    return theta.copy()


def ssg_step(state: OptimizerState, batch: StreamBatch, model: LossModel, schedule: ScheduleParams,
             projection: ProjectionSpec = NO_PROJECTION) -> OptimizerState:
    """Consume batch ``t = state.t + 1`` and return the next state.

    A failed gradient evaluation, a non-finite batch or an iterate leaving
    the finite region marks the state diverged; diverged states are
    returned unchanged by later calls.
    """
    if state.diverged:
        return state
    t = state.t + 1
    if batch.index != t:
        raise ValueError(f"expected batch {t}, got batch {batch.index}")
    n = len(batch)
    expected = batch_size(schedule, t)
    if n != expected:
        raise ValueError(f"batch {t} has {n} observations, schedule expects {expected}")
    with np.errstate(over="raise", invalid="raise"):
        return _advance(state, batch, model, learning_rate(schedule, t, n), projection)


def _advance(state, batch, model, gamma, projection):
    # caller has validated the batch and set floating-point errors to raise
    n = len(batch)
    n_cum = state.n_cum + n
    theta_bar = (state.n_cum / n_cum) * state.theta_bar + (n / n_cum) * state.theta
    if batch.diverged:
        return replace(state, diverged=True)
    try:
        theta = state.theta - gamma * model.gradient(batch, state.theta)
        if projection.kind != "none":
            theta = project(theta, projection)
        sq = float(theta @ theta)
    except (GradientError, FloatingPointError):
        return replace(state, diverged=True)
    # also catches nan, for which the comparison is false
    if not sq <= DIVERGENCE_NORM * DIVERGENCE_NORM:
        return replace(state, diverged=True)
    return OptimizerState(state.t + 1, theta, theta_bar, n_cum, False)


@dataclass
class Trajectory:
    """Snapshots of ``(t, N_t, theta_t, theta_bar_t)`` on a grid of sample counts.

    Row ``k`` holds the latest state whose cumulative count does not exceed
    ``grid[k]``.
    """

    grid: np.ndarray
    t: np.ndarray
    n_cum: np.ndarray
    theta: np.ndarray
    theta_bar: np.ndarray
    final: OptimizerState
    diverged_at: Optional[int] = None
    history: list = field(default_factory=list)

    @property
    def diverged(self) -> bool:
        return self.final.diverged


def log_grid(n_min: int, n_max: int, points: int = 200) -> np.ndarray:
    """Up to ``points`` distinct integers log-spaced in ``[n_min, n_max]``."""
    if n_min < 1 or n_max < n_min:
        raise ValueError("need 1 <= n_min <= n_max")
    raw = np.geomspace(n_min, n_max, points)
    return np.unique(np.round(raw).astype(np.int64))


def run(model: LossModel, batches: Iterable[StreamBatch], schedule: ScheduleParams, theta0,
        horizon: int, projection: ProjectionSpec = NO_PROJECTION, grid=None,
        keep_history: bool = False) -> Trajectory:
    """Run up to ``horizon`` steps of the estimator over ``batches``.

    ``grid`` lists observation counts at which to snapshot; by default about
    200 log-spaced points between the first batch size and the last
    cumulative count. With ``keep_history`` every state is retained.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if grid is None:
        grid = log_grid(batch_size(schedule, 1), cumulative_count(schedule, horizon))
    grid = np.asarray(grid, dtype=np.int64)
    if np.any(np.diff(grid) < 0):
        raise ValueError("grid must be nondecreasing")

    state = OptimizerState.initial(theta0)
    history = [state] if keep_history else []
    chosen = []
    k, n_grid = 0, len(grid)
    diverged_at = None
    sizes = batch_sizes(schedule, horizon).tolist()
    rates = [learning_rate(schedule, t, n) for t, n in enumerate(sizes, start=1)]
    grid_list = grid.tolist()
    with np.errstate(over="raise", invalid="raise"):
        for batch in batches:
            t = batch.index
            if t > horizon:
                break
            if t != state.t + 1 or len(batch) != sizes[t - 1]:
                raise ValueError(f"batch {t} (size {len(batch)}) does not follow the schedule at step {state.t}")
            new = _advance(state, batch, model, rates[t - 1], projection)
            if new.diverged:
                diverged_at = t
                state = new
                break
            # grid points reached before this batch completed see the previous state
            while k < n_grid and grid_list[k] < new.n_cum:
                chosen.append(state)
                k += 1
            state = new
            if keep_history:
                history.append(state)
    chosen.extend([state] * (n_grid - k))

    return Trajectory(
        grid=grid,
        t=np.array([s.t for s in chosen], dtype=np.int64),
        n_cum=np.array([s.n_cum for s in chosen], dtype=np.int64),
        theta=np.array([s.theta for s in chosen]),
        theta_bar=np.array([s.theta_bar for s in chosen]),
        final=state,
        diverged_at=diverged_at,
        history=history,
    )
