"""Loss models: averaged mini-batch gradients, objectives and optima.

The free functions compute gradients and losses from a
:class:`~streamopt.streams.StreamBatch`; the :class:`LossModel`
subclasses bundle them with closed-form objectives and optimum oracles
for use by :mod:`streamopt.optim`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .streams import StreamBatch

VARIANCE_FLOOR = 1e-12


class GradientError(ArithmeticError):
    """Gradient undefined at the current parameter (e.g. variance below floor)."""


@dataclass(frozen=True)
class ArchParams:
    alpha0: float
    alpha1: float

    def __post_init__(self):
        if not self.alpha0 > 0:
            raise ValueError(f"alpha0 must be positive, got {self.alpha0}")
        if self.alpha1 < 0:
            raise ValueError(f"alpha1 must be nonnegative, got {self.alpha1}")


def _alpha_pair(params):
    if isinstance(params, ArchParams):
        return params.alpha0, params.alpha1
    a0, a1 = params
    return float(a0), float(a1)


# ---------------------------------------------------------------------------
# AR(1) least squares


def ar1_gradient(batch: StreamBatch, theta: float) -> float:
    """``-(2/n) * sum lag * (x - theta * lag)``."""
    x, lag = batch.values, batch.lagged
    return float(-2.0 * np.dot(lag, x - theta * lag) / len(x))


def ar1_loss_sum(batch: StreamBatch, theta: float) -> float:
    r = batch.values - theta * batch.lagged
    return float(np.dot(r, r))


def ar1_objective(theta, theta_star: float, sigma_eps2: float = 1.0):
    """Population squared-error risk of the well-specified AR(1) fit."""
    if not abs(theta_star) < 1:
        raise ValueError(f"|theta_star| must be < 1, got {theta_star}")
    theta = np.asarray(theta, dtype=float)
    return sigma_eps2 * (theta_star - theta) ** 2 / (1.0 - theta_star**2) + sigma_eps2


def ar1_objective_gradient(theta, theta_star: float, sigma_eps2: float = 1.0):
    return 2.0 * sigma_eps2 * (np.asarray(theta, dtype=float) - theta_star) / (1.0 - theta_star**2)


def ma1_objective(theta, phi_star: float, sigma_eps2: float = 1.0):
    """Risk of an AR(1) predictor on MA(1) data."""
    theta = np.asarray(theta, dtype=float)
    return sigma_eps2 * (1.0 + (phi_star - theta) ** 2 + theta**2 * phi_star**2)


def ma1_pseudo_optimum(phi_star: float) -> float:
    """Best AR(1) coefficient for MA(1) data: ``phi / (1 + phi**2)``."""
    return phi_star / (1.0 + phi_star * phi_star)


# ---------------------------------------------------------------------------
# ARCH(1) quasi maximum likelihood


def _conditional_variance(lag_eps, a0, a1):
    s2 = a0 + a1 * lag_eps * lag_eps
    if not np.all(s2 > VARIANCE_FLOOR):
        raise GradientError(f"conditional variance below floor {VARIANCE_FLOOR:g} (alpha0={a0:g}, alpha1={a1:g})")
    return s2


def arch_qml_gradient(batch: StreamBatch, params) -> np.ndarray:
    """Batch-averaged QML score for ``sigma_s^2 = alpha0 + alpha1 * eps_{s-1}^2``.

    The observations are the innovations themselves; ``batch.lagged`` holds
    ``eps_{s-1}``.
    """
    return _qml_gradient(batch.values, batch.lagged, *_alpha_pair(params))


def _qml_gradient(eps, lag_eps, a0, a1):
    lag2 = lag_eps * lag_eps
    s2 = a0 + a1 * lag2
    if not np.all(s2 > VARIANCE_FLOOR):
        raise GradientError(f"conditional variance below floor {VARIANCE_FLOOR:g} (alpha0={a0:g}, alpha1={a1:g})")
    w = (s2 - eps * eps) / (2.0 * s2 * s2)
    n = len(eps)
    return np.array([w.sum() / n, np.dot(w, lag2) / n])


def arch_qml_loss_sum(batch: StreamBatch, params) -> float:
    a0, a1 = _alpha_pair(params)
    eps = batch.values
    s2 = _conditional_variance(batch.lagged, a0, a1)
    return float(0.5 * np.sum(eps * eps / s2 + np.log(s2)))


# ---------------------------------------------------------------------------
# AR(1)-ARCH(1)


def _residuals(batch, theta):
    if batch.lagged2 is None:
        raise ValueError("AR-ARCH gradient needs two lags of context")
    return batch.values - theta * batch.lagged, batch.lagged - theta * batch.lagged2


def ar_arch_gradient(batch: StreamBatch, theta: float, params) -> np.ndarray:
    """``(d/dtheta squared loss, QML score on the AR residuals)``.

    Both current and lagged residuals are recomputed from ``theta``; the
    ARCH block treats them as data.
    """
    a0, a1 = _alpha_pair(params)
    eps, lag_eps = _residuals(batch, theta)
    g_ar = ar1_gradient(batch, theta)
    g_arch = _qml_gradient(eps, lag_eps, a0, a1)
    return np.array([g_ar, g_arch[0], g_arch[1]])


def ar_arch_qml_loss_sum(batch: StreamBatch, theta: float, params) -> float:
    """QML part of the composite loss with residuals computed at ``theta``."""
    a0, a1 = _alpha_pair(params)
    eps, lag_eps = _residuals(batch, theta)
    s2 = _conditional_variance(lag_eps, a0, a1)
    return float(0.5 * np.sum(eps * eps / s2 + np.log(s2)))


# ---------------------------------------------------------------------------
# geometric median


def geometric_median_gradient(points, theta) -> np.ndarray:
    """Average of unit vectors ``(theta - X_i) / |theta - X_i|``.

    A point coinciding with ``theta`` contributes zero. ``points`` may be a
    :class:`StreamBatch` or an ``(n, d)`` array.
    """
    x = points.values if isinstance(points, StreamBatch) else np.asarray(points, dtype=float)
    diff = np.asarray(theta, dtype=float) - x
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    inv = np.divide(1.0, dist, out=np.zeros_like(dist), where=dist > 0)
    return inv @ diff / len(x)


def geometric_median_loss_sum(points, theta) -> float:
    x = points.values if isinstance(points, StreamBatch) else np.asarray(points, dtype=float)
    return float(np.linalg.norm(x - np.asarray(theta, dtype=float), axis=1).sum())


@dataclass
class WeiszfeldResult:
    median: np.ndarray
    converged: bool
    iterations: int


def weiszfeld(points, tol: float = 1e-10, max_iter: int = 10_000, start=None) -> WeiszfeldResult:
    """Geometric median by Weiszfeld's fixed-point iteration.

    If an iterate lands on a data point, the point is accepted when the
    subgradient optimality condition holds there; otherwise the iterate is
    pushed a distance ``tol`` along the steepest-descent direction.
    """
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    theta = x.mean(axis=0) if start is None else np.asarray(start, dtype=float).copy()
    best, best_obj = theta.copy(), geometric_median_loss_sum(x, theta)

    for it in range(1, max_iter + 1):
        diff = x - theta
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        at_point = dist == 0
        if at_point.any():
            pull = (diff[~at_point] / dist[~at_point, None]).sum(axis=0)
            strength = np.linalg.norm(pull)
            if strength <= at_point.sum():
                return WeiszfeldResult(theta, True, it)
            theta = theta + tol * pull / strength
            continue
        w = 1.0 / dist
        new = w @ x / w.sum()
        step = np.linalg.norm(new - theta)
        theta = new
        obj = geometric_median_loss_sum(x, theta)
        if obj <= best_obj:
            best, best_obj = theta.copy(), obj
        if step < tol:
            return WeiszfeldResult(theta, True, it)
    return WeiszfeldResult(best, False, max_iter)


# ---------------------------------------------------------------------------
# model objects


class LossModel:
    """Gradient provider consumed by the optimizer.

    Subclasses implement :meth:`gradient`; :meth:`objective` and
    :meth:`optimum` return ``None`` when no closed form exists.
    """

    dimension: int = 1

    def gradient(self, batch: StreamBatch, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def objective(self, theta) -> Optional[float]:
        return None

    def optimum(self) -> Optional[np.ndarray]:
        return None


class ZeroModel(LossModel):
    """Constant loss; every gradient is zero."""

    def __init__(self, dimension: int = 1):
        self.dimension = dimension

    def gradient(self, batch, theta):
        return np.zeros(self.dimension)


class AR1Model(LossModel):
    """Well-specified AR(1) least squares."""

    def __init__(self, theta_star: Optional[float] = None, sigma_eps2: float = 1.0):
        self.theta_star = theta_star
        self.sigma_eps2 = sigma_eps2

    def gradient(self, batch, theta):
        x, lag = batch.values, batch.lagged
        return np.array([-2.0 * np.dot(lag, x - theta[0] * lag) / len(x)])

    def objective(self, theta):
        if self.theta_star is None:
            return None
        return float(ar1_objective(np.asarray(theta).reshape(-1)[0], self.theta_star, self.sigma_eps2))

    def optimum(self):
        return None if self.theta_star is None else np.array([self.theta_star])


class MisspecifiedAR1Model(AR1Model):
    """AR(1) least squares fitted to MA(1) data with coefficient ``phi_star``."""

    def __init__(self, phi_star: float, sigma_eps2: float = 1.0):
        super().__init__(None, sigma_eps2)
        self.phi_star = phi_star

    def objective(self, theta):
        return float(ma1_objective(np.asarray(theta).reshape(-1)[0], self.phi_star, self.sigma_eps2))

    def optimum(self):
        return np.array([ma1_pseudo_optimum(self.phi_star)])


class ArchModel(LossModel):
    """ARCH(1) QML on ``theta = (alpha0, alpha1)``.

    With ``freeze_alpha0`` the first coordinate never moves.
    """

    dimension = 2

    def __init__(self, truth: Optional[ArchParams] = None, freeze_alpha0: bool = False):
        self.truth = truth
        self.freeze_alpha0 = freeze_alpha0

    def gradient(self, batch, theta):
        g = _qml_gradient(batch.values, batch.lagged, theta[0], theta[1])
        if self.freeze_alpha0:
            g[0] = 0.0
        return g

    def optimum(self):
        return None if self.truth is None else np.array([self.truth.alpha0, self.truth.alpha1])


class ArArchModel(LossModel):
    """AR(1)-ARCH(1) on ``theta = (ar, alpha0, alpha1)``."""

    dimension = 3

    def __init__(self, theta_star: Optional[float] = None, truth: Optional[ArchParams] = None,
                 freeze_alpha0: bool = False):
        self.theta_star = theta_star
        self.truth = truth
        self.freeze_alpha0 = freeze_alpha0

    def gradient(self, batch, theta):
        g = ar_arch_gradient(batch, theta[0], (theta[1], theta[2]))
        if self.freeze_alpha0:
            g[1] = 0.0
        return g

    def optimum(self):
        if self.theta_star is None or self.truth is None:
            return None
        return np.array([self.theta_star, self.truth.alpha0, self.truth.alpha1])


class GeometricMedianModel(LossModel):
    """Geometric median of a d-dimensional stream."""

    def __init__(self, dimension: int, reference=None):
        self.dimension = dimension
        self.reference = None if reference is None else np.asarray(reference, dtype=float)

    def gradient(self, batch, theta):
        return geometric_median_gradient(batch.values, theta)

    def optimum(self):
        return self.reference
