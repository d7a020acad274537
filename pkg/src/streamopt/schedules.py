"""Mini-batch size, learning-rate and uncertainty-decay schedules.

Every function here is pure. Validity of a schedule for the convergence
theory (``alpha - rho * beta`` in ``(1/2, 1)``) is checked by
:mod:`streamopt.theory`, never enforced here, so that divergent
configurations can still be run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# relative guard so that exact integers such as 64 * 2.0 do not ceil upward
_CEIL_EPS = 1e-12


@dataclass(frozen=True)
class ScheduleParams:
    """Learning-rate and streaming-batch hyperparameters.

    ``gamma_t = c_gamma * n_t**beta * t**-alpha`` and
    ``n_t = ceil(c_rho * t**rho)``.
    """

    c_gamma: float = 1.0
    alpha: float = 2.0 / 3.0
    beta: float = 0.0
    c_rho: int = 1
    rho: float = 0.0

    def __post_init__(self):
        if not self.c_gamma > 0:
            raise ValueError(f"c_gamma must be positive, got {self.c_gamma}")
        if int(self.c_rho) != self.c_rho or self.c_rho < 1:
            raise ValueError(f"c_rho must be a positive integer, got {self.c_rho}")
        object.__setattr__(self, "c_rho", int(self.c_rho))
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")

    @property
    def theory_valid(self) -> bool:
        """Whether ``alpha - rho * beta`` lies in the open interval (1/2, 1)."""
        gap = self.alpha - self.rho * self.beta
        return 0.5 < gap < 1.0


@dataclass(frozen=True)
class UncertaintyParams:
    """Exponents of the dependence decay ``n**-nu`` and noise ``c_sigma * n**-sigma``."""

    nu: float = 1.0
    sigma: float = 0.5
    c_sigma: float = 1.0

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        if not 0.0 <= self.sigma <= 0.5:
            raise ValueError(f"sigma must lie in [0, 1/2], got {self.sigma}")
        if self.c_sigma < 0:
            raise ValueError(f"c_sigma must be nonnegative, got {self.c_sigma}")


def _check_index(t: int) -> None:
    if t < 1:
        raise ValueError(f"batch index must be >= 1, got {t}")


def batch_size(params: ScheduleParams, t: int) -> int:
    """Size ``ceil(c_rho * t**rho)`` of the ``t``-th streaming batch."""
    _check_index(t)
    if params.rho == 0.0:
        return params.c_rho
    raw = params.c_rho * math.pow(t, params.rho)
    return max(params.c_rho, math.ceil(raw * (1.0 - _CEIL_EPS)))


def batch_sizes(params: ScheduleParams, t_max: int) -> np.ndarray:
    """Vector of ``batch_size(params, t)`` for ``t = 1 .. t_max``."""
    if t_max < 0:
        raise ValueError("t_max must be nonnegative")
    return np.array([batch_size(params, t) for t in range(1, t_max + 1)], dtype=np.int64)


def cumulative_count(params: ScheduleParams, t: int) -> int:
    """Total observations ``N_t`` consumed by the first ``t`` batches."""
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    return int(sum(batch_size(params, i) for i in range(1, t + 1)))


def batches_within(params: ScheduleParams, n_max: int) -> int:
    """Largest ``t`` with ``cumulative_count(params, t) <= n_max``."""
    t, total = 0, 0
    while True:
        nxt = batch_size(params, t + 1)
        if total + nxt > n_max:
            return t
        total += nxt
        t += 1


def learning_rate(params: ScheduleParams, t: int, n_t: int) -> float:
    _check_index(t)
    if n_t < 1:
        raise ValueError(f"n_t must be >= 1, got {n_t}")
    return params.c_gamma * math.pow(n_t, params.beta) * math.pow(t, -params.alpha)


def dependence_decay(u: UncertaintyParams, n_t: float) -> float:
    """``nu_t = n_t**-nu``."""
    if n_t < 1:
        raise ValueError(f"n_t must be >= 1, got {n_t}")
    return math.pow(n_t, -u.nu)


def noise_decay(u: UncertaintyParams, n_t: float) -> float:
    """``sigma_t = c_sigma * n_t**-sigma``."""
    if n_t < 1:
        raise ValueError(f"n_t must be >= 1, got {n_t}")
    return u.c_sigma * math.pow(n_t, -u.sigma)
