"""Numerical evaluators for the non-asymptotic error bounds.

Bounds work with the real-valued batch size ``c_rho * t**rho``;
:func:`delta_recursion` iterates the one-step inequality with the integer
batch sizes the optimizer actually uses. :func:`fit_decay_exponent` turns
any error curve into an empirical log-log slope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .schedules import (
    ScheduleParams,
    UncertaintyParams,
    batch_size,
    batches_within,
    cumulative_count,
    dependence_decay,
    learning_rate,
    noise_decay,
)
from .streams import derive_seed

# beyond this many batches the sub-exponential term uses the integral bounds
EXACT_SUM_LIMIT = 10_000


class HypothesisError(ValueError):
    """A hypothesis of the convergence theorem does not hold."""


@dataclass(frozen=True)
class BoundParams:
    mu: float
    d_nu: float = 0.0
    b_nu: float = 0.0
    c_kappa: float = 1.0
    delta0: float = 1.0
    uncertainty: UncertaintyParams = field(default_factory=UncertaintyParams)
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    c_nabla: Optional[float] = None
    c_nabla_prime: Optional[float] = None

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        for name in ("d_nu", "b_nu", "delta0"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not self.c_kappa > 0:
            raise ValueError("c_kappa must be positive")

    def objective_gap(self, delta: float) -> float:
        """``E[F(theta) - F(theta*)] <= c_nabla * delta / 2`` (needs ``c_nabla``)."""
        if self.c_nabla is None:
            raise ValueError("c_nabla is not set")
        return self.c_nabla * delta / 2.0


@dataclass
class ErrorCurve:
    n: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.n = np.asarray(self.n)
        self.values = np.asarray(self.values, dtype=float)
        if self.n.shape != self.values.shape:
            raise ValueError("n and values must have the same shape")
        if np.any(np.diff(self.n) <= 0):
            raise ValueError("n must be strictly increasing")

    @property
    def points(self):
        return list(zip(self.n.tolist(), self.values.tolist()))

    def __len__(self):
        return len(self.n)


# ---------------------------------------------------------------------------
# rate functions and constants


def psi(x: float, t: float) -> float:
    """Integral-test bound on ``sum_{i<=t} i**-x``."""
    if not t > 0:
        raise ValueError("t must be positive")
    if x < 1:
        return t ** (1.0 - x) / (1.0 - x)
    if x == 1:
        return 1.0 + math.log(t)
    return x / (x - 1.0)


def psi_y(x: float, y: float, t: float) -> float:
    """``psi(x, t**(1/(1+y)))``."""
    if y < 0:
        raise ValueError("y must be nonnegative")
    return psi(x, t ** (1.0 / (1.0 + y)))


def mu_nu(p: BoundParams) -> float:
    """Dependence-penalized convexity ``mu - [rho == 0] * 2 * D_nu * C_rho**-nu``."""
    s = p.schedule
    if s.rho == 0:
        return p.mu - 2.0 * p.d_nu * s.c_rho ** (-p.uncertainty.nu)
    return p.mu


def theorem_violations(p: BoundParams) -> list:
    """Names of the theorem hypotheses violated by ``p`` (empty when valid)."""
    s = p.schedule
    out = []
    gap = s.alpha - s.rho * s.beta
    if not 0.5 < gap < 1.0:
        out.append(f"alpha - rho*beta = {gap:.6g} is not in (1/2, 1)")
    m = mu_nu(p)
    if not m > 0:
        out.append(f"mu_nu = {m:.6g} is not positive")
    return out


def _c_delta(p: BoundParams, m: float) -> float:
    varying = p.schedule.rho != 0
    return max(1.0, 2.0 * p.c_kappa**2, (m / 2.0) ** 2, 2.0 * p.d_nu if varying else 0.0)


# ---------------------------------------------------------------------------
# recursions


def delta_recursion(p: BoundParams, horizon: int) -> ErrorCurve:
    """Iterate the one-step mean-squared-error inequality as an equality.

    ``delta_t = [1 - (mu - 2 D nu_t) gamma_t + 2 C_kappa^2 gamma_t^2] delta_{t-1}
    + (B^2/mu) nu_t^2 gamma_t + 2 sigma_t^2 gamma_t^2`` with the integer
    batch sizes of the schedule; indexed by ``N_t``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    s, u = p.schedule, p.uncertainty
    delta, total = p.delta0, 0
    ns, vals = np.empty(horizon, dtype=np.int64), np.empty(horizon)
    b2_mu = p.b_nu**2 / p.mu
    ck2 = p.c_kappa**2
    for t in range(1, horizon + 1):
        n = batch_size(s, t)
        g = learning_rate(s, t, n)
        nu = dependence_decay(u, n)
        sg = noise_decay(u, n)
        delta = (1.0 - (p.mu - 2.0 * p.d_nu * nu) * g + 2.0 * ck2 * g * g) * delta + b2_mu * nu * nu * g + 2.0 * sg * sg * g * g
        total += n
        ns[t - 1], vals[t - 1] = total, delta
    return ErrorCurve(ns, vals)


def _nonincreasing(a):
    return bool(np.all(np.diff(a) <= 1e-15 * np.maximum(1.0, np.abs(a[:-1]))))


def omega_constant(lam: float, alpha_seq, eta_seq) -> int:
    """Smallest integer ``C >= 1`` with ``lam * alpha_t <= 1`` from the first ``t`` where ``C * eta_t <= lam``."""
    alpha_seq, eta_seq = np.asarray(alpha_seq, float), np.asarray(eta_seq, float)
    ok = np.nonzero(lam * alpha_seq <= 1.0)[0]
    if len(ok) == 0:
        # condition only vacuous if no t_omega exists inside the horizon
        if eta_seq[-1] <= 0:
            raise HypothesisError("no C_omega makes lam*alpha_t <= 1 after t_omega")
        return max(1, math.floor(lam / eta_seq[-1]) + 1)
    first = ok[0]
    if first == 0:
        return 1
    eta_before = eta_seq[first - 1]
    if eta_before <= 0:
        raise HypothesisError("no C_omega makes lam*alpha_t <= 1 after t_omega")
    return max(1, math.floor(lam / eta_before) + 1)


def proposition_envelope(lam: float, alpha_seq, eta_seq, beta_seq, omega0: float, horizon: int):
    """Exact solution of ``w_t = [1 - 2 lam a_t + eta_t a_t] w_{t-1} + b_t a_t`` and its envelope.

    The envelope is ``tau_t + max_{t/2 <= i <= t} b_i / lam`` with ``tau_t``
    the sub-exponential term. Sums over ``i >= t/2`` start at
    ``ceil(t/2)``; the early-noise sum covers the complementary indices.
    Returns ``(exact, bound)`` as curves indexed by ``t``.
    """
    a = np.asarray(alpha_seq, dtype=float)[:horizon]
    e = np.asarray(eta_seq, dtype=float)[:horizon]
    b = np.asarray(beta_seq, dtype=float)[:horizon]
    if horizon < 1 or min(len(a), len(e), len(b)) < horizon:
        raise ValueError("sequences must cover the horizon")
    if not lam > 0:
        raise ValueError("lam must be positive")
    if omega0 < 0 or (a < 0).any() or (e < 0).any() or (b < 0).any():
        raise ValueError("sequences and omega0 must be nonnegative")
    if not (_nonincreasing(a) and _nonincreasing(e)):
        raise ValueError("alpha and eta sequences must be nonincreasing")
    factor = 1.0 - 2.0 * lam * a + e * a
    if (factor < 0).any():
        raise ValueError("recursion factor negative; no nonnegative sequence satisfies the relation")

    exact = np.empty(horizon)
    w = omega0
    for i in range(horizon):
        w = factor[i] * w + b[i] * a[i]
        exact[i] = w

    c_omega = omega_constant(lam, a, e)
    cum_a = np.concatenate([[0.0], np.cumsum(a)])
    cum_ea = np.concatenate([[0.0], np.cumsum(e * a)])
    cum_ba = np.concatenate([[0.0], np.cumsum(b * a)])
    run_max_b = np.maximum.accumulate(b)
    t = np.arange(1, horizon + 1)
    half = (t + 1) // 2  # ceil(t/2), 1-based
    tail_a = cum_a[t] - cum_a[half - 1]
    early_ba = cum_ba[half - 1]
    tail_max_b = np.array([b[h - 1: k].max() for h, k in zip(half, t)])
    with np.errstate(over="ignore"):
        tau = np.exp(-lam * tail_a) * (np.exp(c_omega * cum_ea[t]) * (omega0 + run_max_b / lam) + early_ba)
    bound = tau + tail_max_b / lam
    return ErrorCurve(t, exact), ErrorCurve(t, bound)


# ---------------------------------------------------------------------------
# explicit bound


class BoundTerms(NamedTuple):
    total: float
    init_term: float
    bias_term: float
    noise_term: float
    n: int
    t: int


def _require(p: BoundParams):
    bad = theorem_violations(p)
    if bad:
        raise HypothesisError("; ".join(bad))


def bias_term(p: BoundParams, n_obs: float) -> float:
    s, nu = p.schedule, p.uncertainty.nu
    rho = s.rho
    m = mu_nu(p)
    const = 2.0 ** ((2.0 + 6.0 * rho * nu) / (1.0 + rho))
    return const * p.b_nu**2 / (m * p.mu * s.c_rho ** (2.0 * nu / (1.0 + rho)) * n_obs ** (2.0 * rho * nu / (1.0 + rho)))


def noise_exponent(schedule: ScheduleParams, sigma: float) -> float:
    """Decay exponent ``(rho (2 sigma - beta) + alpha) / (1 + rho)`` of the noise term."""
    s = schedule
    return (s.rho * (2.0 * sigma - s.beta) + s.alpha) / (1.0 + s.rho)


def noise_term(p: BoundParams, n_obs: float) -> float:
    s, u = p.schedule, p.uncertainty
    rho = s.rho
    const = 2.0 ** ((7.0 + 6.0 * rho * u.sigma) / (1.0 + rho))
    c_rho_pow = s.c_rho ** ((2.0 * u.sigma - s.beta - s.alpha) / (1.0 + rho))
    return const * u.c_sigma**2 * s.c_gamma / (mu_nu(p) * c_rho_pow * n_obs ** noise_exponent(s, u.sigma))


def _safe_exp(x: float) -> float:
    return math.exp(x) if x < 709.0 else math.inf


def _scaled(growth: float, amount: float) -> float:
    # python floats overflow to inf silently; a zero amount stays zero even against inf growth
    return growth * float(amount) if amount > 0 else 0.0


def _init_term_exact(p: BoundParams, t: int) -> float:
    """Sub-exponential term with exact partial sums (real-valued batch sizes)."""
    s, u = p.schedule, p.uncertainty
    m = mu_nu(p)
    cd = _c_delta(p, m)
    i = np.arange(1, t + 1, dtype=float)
    n = s.c_rho * i**s.rho
    gamma = s.c_gamma * n**s.beta * i ** (-s.alpha)
    nu = n ** (-u.nu)
    sig = u.c_sigma * n ** (-u.sigma)
    half = (t + 1) // 2
    varying = 1.0 if s.rho != 0 else 0.0
    log_growth = (varying * 2.0 * cd * p.d_nu * np.dot(nu, gamma)
                  + 2.0 * cd * p.c_kappa**2 * np.dot(gamma, gamma)
                  - 0.5 * m * gamma[half - 1:].sum())
    start = p.delta0 + 2.0 * p.b_nu**2 / (p.mu * m) * np.max(nu**2) + 4.0 / m * np.max(sig**2 * gamma)
    early = (p.b_nu**2 / p.mu * np.dot(nu[: half - 1] ** 2, gamma[: half - 1])
             + 2.0 * np.dot(sig[: half - 1] ** 2, gamma[: half - 1] ** 2))
    decay = math.exp(-0.5 * m * gamma[half - 1:].sum())
    return _scaled(_safe_exp(log_growth), start) + _scaled(decay, early)


def _init_term_integral(p: BoundParams, n_obs: float) -> float:
    """Sub-exponential term with the integral-test bounds, expressed in ``N``."""
    s, u = p.schedule, p.uncertainty
    rho, alpha, beta, cg, cr = s.rho, s.alpha, s.beta, s.c_gamma, s.c_rho
    nu, sigma, cs = u.nu, u.sigma, u.c_sigma
    m = mu_nu(p)
    cd = _c_delta(p, m)
    decay_exp = -(m * cg * n_obs ** ((1 + rho * beta - alpha) / (1 + rho))
                  / (2.0 ** ((3 + rho * (2 + beta) - alpha) / (1 + rho)) * cr ** ((1 - beta - alpha) / (1 + rho))))
    dep = 0.0
    if rho != 0:
        dep = 2 * cd * p.d_nu * cg * cr**beta * psi_y(alpha - rho * (beta - nu), rho, 2 * n_obs / cr) / cr**nu
    smooth = 4 * (alpha - rho * beta) * cd * p.c_kappa**2 * cg**2 * cr ** (2 * beta) / (2 * alpha - 2 * rho * beta - 1)
    start = (p.delta0 + 2 * p.b_nu**2 / (p.mu * m * cr ** (2 * nu))
             + 4 * cs**2 * cg * cr**beta / (m * cr ** (2 * sigma)))
    early_bias = p.b_nu**2 * cg * cr**beta * psi_y(alpha - rho * (beta - 2 * nu), rho, n_obs / cr) / (p.mu * cr ** (2 * nu))
    gap = alpha - rho * (beta - sigma)
    early_noise = 4 * gap * cs**2 * cg**2 * cr ** (2 * beta) / ((2 * gap - 1) * cr ** (2 * sigma))
    return _scaled(_safe_exp(decay_exp + dep + smooth), start) + _scaled(_safe_exp(decay_exp), early_bias + early_noise)


def theorem_bound(p: BoundParams, n_obs: int) -> BoundTerms:
    """Explicit mean-squared-error bound after ``n_obs`` observations.

    ``n_obs`` is snapped down to the last completed batch boundary ``N_t``
    and all three terms are evaluated there. The initial-condition term uses
    exact partial sums for ``t <= EXACT_SUM_LIMIT`` and integral bounds
    beyond.
    """
    _require(p)
    t = batches_within(p.schedule, int(n_obs))
    if t < 1:
        raise ValueError(f"n_obs={n_obs} is smaller than the first batch")
    n_t = cumulative_count(p.schedule, t)
    init = _init_term_exact(p, t) if t <= EXACT_SUM_LIMIT else _init_term_integral(p, n_t)
    bias = bias_term(p, n_t)
    noise = noise_term(p, n_t)
    return BoundTerms(init + bias + noise, init, bias, noise, n_t, t)


def bound_curve(p: BoundParams, horizon: int, which: str = "total") -> ErrorCurve:
    """Evaluate one component of :func:`theorem_bound` at every batch boundary up to ``horizon``."""
    _require(p)
    ns, vals = [], []
    total = 0
    for t in range(1, horizon + 1):
        total += batch_size(p.schedule, t)
        terms = theorem_bound(p, total)
        ns.append(total)
        vals.append(getattr(terms, which if which != "total" else "total"))
    return ErrorCurve(np.array(ns), np.array(vals))


# ---------------------------------------------------------------------------
# empirical rates


class SlopeFit(NamedTuple):
    slope: float
    intercept: float
    r2: float


def fit_decay_exponent(curve, tail_fraction: float = 0.5, min_points: int = 5) -> SlopeFit:
    """OLS fit of ``log(value)`` on ``log(N)`` over the tail of the curve.

    The tail is the last ``tail_fraction`` of the curve's span in ``log N``.
    Nonpositive or non-finite values are dropped.
    """
    if not 0 < tail_fraction <= 1:
        raise ValueError("tail_fraction must lie in (0, 1]")
    if isinstance(curve, ErrorCurve):
        n, v = curve.n.astype(float), curve.values
    else:
        n, v = (np.asarray(a, dtype=float) for a in curve)
    logn = np.log(n)
    cut = logn.max() - tail_fraction * (logn.max() - logn.min())
    keep = (logn >= cut - 1e-12) & (v > 0) & np.isfinite(v)
    if keep.sum() < min_points:
        raise ValueError(f"only {int(keep.sum())} usable points in the tail window; need {min_points}")
    x, y = logn[keep], np.log(v[keep])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 if ss_tot == 0 else 1.0 - np.sum(resid**2) / ss_tot
    return SlopeFit(float(slope), float(intercept), float(r2))


# ---------------------------------------------------------------------------
# AR(1) drift check


class DriftCheck(NamedTuple):
    mc_estimate: float
    closed_form: float
    std_error: float


def ar1_drift_closed_form(theta, theta_star, sigma_eps2, n):
    """Closed form of ``E|E[grad f_t | F_{t-1}] - grad F|^2`` as printed for AR(1)."""
    q = theta_star * theta_star
    num = 4.0 * (theta - theta_star) ** 2 * (1.0 - q**n) ** 2 * sigma_eps2
    return num / ((1.0 - q) ** 4 * n * n) * (sigma_eps2 + 1.0 / (1.0 - q))


def ar1_drift_gaussian(theta, theta_star, sigma_eps2, n):
    """Same expectation evaluated for a stationary Gaussian AR(1): ``Var(X^2) = 2 v^2``."""
    q = theta_star * theta_star
    return 8.0 * (theta - theta_star) ** 2 * (1.0 - q**n) ** 2 * sigma_eps2**2 / ((1.0 - q) ** 4 * n * n)


def ar1_conditional_gradient(x_prev, theta, theta_star, sigma_eps2, n):
    """``E[grad f_t(theta) | F_{t-1}]`` given the last observation ``X_{N_{t-1}}``."""
    q = theta_star * theta_star
    a = (1.0 - q**n) / (1.0 - q)
    v = sigma_eps2 / (1.0 - q)
    s2 = a * np.asarray(x_prev) ** 2 + v * (n - a)
    return 2.0 * (theta - theta_star) * s2 / n


def verify_ar1_drift(theta: float, theta_star: float, sigma_eps2: float, n: int, mc_reps: int = 100_000,
                     seed: int = 0, chunks: int = 8) -> DriftCheck:
    """Monte-Carlo estimate of the AR(1) gradient drift next to its printed closed form.

    ``X_{N_{t-1}}`` is drawn from the stationary Gaussian law; the
    conditional expectation of the batch gradient is then exact. Chunks use
    independent derived seeds and are combined in order.
    """
    if not abs(theta_star) < 1:
        raise ValueError("|theta_star| must be < 1")
    if mc_reps < 10_000:
        raise ValueError("mc_reps must be >= 1e4")
    v = sigma_eps2 / (1.0 - theta_star**2)
    grad_f = 2.0 * sigma_eps2 * (theta - theta_star) / (1.0 - theta_star**2)
    sizes = [mc_reps // chunks + (1 if k < mc_reps % chunks else 0) for k in range(chunks)]
    total, total_sq = 0.0, 0.0
    for k, size in enumerate(sizes):
        rng = np.random.default_rng(derive_seed(seed, k))
        x_prev = rng.standard_normal(size) * math.sqrt(v)
        d2 = (ar1_conditional_gradient(x_prev, theta, theta_star, sigma_eps2, n) - grad_f) ** 2
        total += d2.sum()
        total_sq += (d2 * d2).sum()
    mean = total / mc_reps
    var = max(total_sq / mc_reps - mean * mean, 0.0)
    se = math.sqrt(var / mc_reps)
    return DriftCheck(mean, float(ar1_drift_closed_form(theta, theta_star, sigma_eps2, n)), se)
