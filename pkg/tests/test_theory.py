import dataclasses
import math

import numpy as np
import pytest

from _oracles import random_bound_params, random_envelope_inputs
from streamopt.schedules import ScheduleParams, UncertaintyParams, batch_size, cumulative_count, learning_rate
from streamopt.theory import (
    EXACT_SUM_LIMIT,
    BoundParams,
    ErrorCurve,
    HypothesisError,
    _init_term_exact,
    _init_term_integral,
    ar1_conditional_gradient,
    ar1_drift_closed_form,
    ar1_drift_gaussian,
    bias_term,
    bound_curve,
    delta_recursion,
    fit_decay_exponent,
    mu_nu,
    noise_exponent,
    noise_term,
    omega_constant,
    proposition_envelope,
    psi,
    psi_y,
    theorem_bound,
    theorem_violations,
    verify_ar1_drift,
)


def params(**kw):
    sched = kw.pop("schedule", ScheduleParams(c_gamma=1.0, alpha=2 / 3, beta=0.0, c_rho=64, rho=0.5))
    unc = kw.pop("uncertainty", UncertaintyParams(nu=1.0, sigma=0.5, c_sigma=1.0))
    base = dict(mu=1.0, d_nu=1.0, b_nu=1.0, c_kappa=1.0, delta0=1.0)
    base.update(kw)
    return BoundParams(uncertainty=unc, schedule=sched, **base)


def test_psi_examples():
    assert psi(2, 123.0) == 2.0
    assert psi(1, math.e) == pytest.approx(2.0, rel=1e-15)
    assert psi(0, 10) == 10.0
    with pytest.raises(ValueError):
        psi(0.5, 0)


def test_psi_bounds_partial_sums():
    for x in (0.0, 0.3, 0.9, 1.0, 1.5, 3.0):
        for t in (1, 7, 100, 5000):
            assert np.sum(np.arange(1, t + 1, dtype=float) ** -x) <= psi(x, t) + 1e-12


def test_psi_y_consistency():
    rng = np.random.default_rng(0)
    for _ in range(200):
        x, y, t = rng.uniform(0, 3), rng.uniform(0, 2), rng.uniform(1, 1e6)
        assert psi_y(x, y, t) == psi(x, t ** (1 / (1 + y)))


def test_mu_nu_examples():
    const = ScheduleParams(c_rho=4, rho=0.0)
    assert mu_nu(params(schedule=const)) == 0.5
    assert mu_nu(params(mu=0.7, d_nu=5.0)) == 0.7
    bad = params(schedule=ScheduleParams(c_rho=1, rho=0.0))
    assert mu_nu(bad) == -1.0
    assert any("mu_nu" in v for v in theorem_violations(bad))
    with pytest.raises(HypothesisError):
        theorem_bound(bad, 1000)


def test_theorem_rejects_step_exponent_outside_window():
    p = params(schedule=ScheduleParams(alpha=2 / 3, beta=1 / 3, c_rho=64, rho=0.5))
    assert theorem_violations(p)
    with pytest.raises(HypothesisError):
        bound_curve(p, 10)


def test_delta_recursion_homogeneous():
    p = params(b_nu=0.0, d_nu=0.0, uncertainty=UncertaintyParams(nu=1.0, sigma=0.5, c_sigma=0.0), delta0=2.0)
    curve = delta_recursion(p, 50)
    s = p.schedule
    prod = 2.0
    for t in range(1, 51):
        g = learning_rate(s, t, batch_size(s, t))
        prod *= 1 - p.mu * g + 2 * p.c_kappa**2 * g * g
        assert curve.values[t - 1] == pytest.approx(prod, rel=1e-12)
        assert curve.n[t - 1] == cumulative_count(s, t)


def test_delta_recursion_zero_fixed_point():
    p = params(delta0=0.0, b_nu=0.0, uncertainty=UncertaintyParams(c_sigma=0.0))
    assert np.all(delta_recursion(p, 100).values == 0.0)


def test_delta_recursion_dominated_by_bound():
    rng = np.random.default_rng(1)
    for _ in range(100):
        p = random_bound_params(rng)
        horizon = 300
        rec = delta_recursion(p, horizon)
        bound = bound_curve(p, horizon)
        assert np.all(rec.values <= bound.values * (1 + 1e-12))


def test_integral_init_term_dominates_exact_sums():
    rng = np.random.default_rng(2)
    for _ in range(50):
        p = random_bound_params(rng)
        for t in (5, 50, 400):
            n = cumulative_count(p.schedule, t)
            # the integral form bounds sums over real-valued n_i, evaluated at the real N
            n_real = p.schedule.c_rho * np.sum(np.arange(1, t + 1, dtype=float) ** p.schedule.rho)
            assert _init_term_integral(p, min(n, n_real)) >= _init_term_exact(p, t) * (1 - 1e-12)


def test_theorem_bound_switches_to_integral_form():
    p = params()
    t = EXACT_SUM_LIMIT + 1
    terms = theorem_bound(p, cumulative_count(p.schedule, t))
    assert terms.t == t and math.isfinite(terms.total)


def test_theorem_bound_snaps_to_batch_boundary():
    p = params()
    n2 = cumulative_count(p.schedule, 2)
    assert theorem_bound(p, n2 + 5) == theorem_bound(p, n2)
    with pytest.raises(ValueError):
        theorem_bound(p, 10)


def test_bias_term_examples():
    assert theorem_bound(params(b_nu=0.0), 10_000).bias_term == 0.0


def test_bias_term_independent_of_learning_rate():
    p = params()
    q = dataclasses.replace(p, schedule=ScheduleParams(c_gamma=3.7, alpha=0.8, beta=0.2, c_rho=64, rho=0.5))
    for n in (1e3, 1e5, 1e7):
        assert bias_term(p, n) == bias_term(q, n)


def test_larger_batches_shrink_bias_and_noise():
    sched = ScheduleParams(c_gamma=1.0, alpha=0.6, beta=0.1, c_rho=16, rho=0.5)
    unc = UncertaintyParams(nu=1.0, sigma=0.5, c_sigma=1.0)
    assert sched.alpha + sched.beta < 2 * unc.sigma
    p = params(schedule=sched, uncertainty=unc)
    q = dataclasses.replace(p, schedule=dataclasses.replace(sched, c_rho=32))
    for n in (1e3, 1e6):
        assert bias_term(q, n) < bias_term(p, n)
        assert noise_term(q, n) < noise_term(p, n)


def test_noise_exponent_two_thirds():
    for rho in (0.0, 0.25, 0.5, 0.9):
        s = ScheduleParams(alpha=2 / 3, beta=1 / 3, rho=rho)
        assert noise_exponent(s, 0.5) == pytest.approx(2 / 3, rel=1e-15)


def test_noise_term_slope():
    p = params()
    n = np.geomspace(1e3, 1e6, 50)
    y = np.array([noise_term(p, x) for x in n])
    slope = np.polyfit(np.log(n), np.log(y), 1)[0]
    assert abs(slope + noise_exponent(p.schedule, 0.5)) < 1e-6
    fit = fit_decay_exponent(bound_curve(p, 2000, "noise_term"))
    assert abs(fit.slope + noise_exponent(p.schedule, 0.5)) < 1e-3


def test_fit_decay_exponent_examples():
    n = np.geomspace(10, 1e6, 100)
    fit = fit_decay_exponent((n, n**-0.5))
    assert fit.slope == pytest.approx(-0.5, abs=1e-12) and fit.r2 == pytest.approx(1.0, abs=1e-12)
    fit = fit_decay_exponent(ErrorCurve(n, np.full(100, 3.0)))
    assert fit.slope == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        fit_decay_exponent((n, n), tail_fraction=0.0)
    with pytest.raises(ValueError):
        fit_decay_exponent((n[:3], n[:3]))


def test_fit_ignores_nonpositive_values():
    n = np.geomspace(10, 1e6, 100)
    v = 2.0 * n**-1.0
    v[-3] = np.nan
    v[-5] = 0.0
    assert fit_decay_exponent((n, v)).slope == pytest.approx(-1.0, abs=1e-12)


def test_error_curve_validation():
    with pytest.raises(ValueError):
        ErrorCurve([1, 1], [0.0, 0.0])
    assert ErrorCurve([1, 2], [3.0, 4.0]).points == [(1, 3.0), (2, 4.0)]


def test_envelope_homogeneous():
    t = np.arange(1, 201, dtype=float)
    a = 0.3 * t**-0.7
    exact, bound = proposition_envelope(1.0, a, np.zeros(200), np.zeros(200), 2.0, 200)
    np.testing.assert_allclose(exact.values, 2.0 * np.cumprod(1 - 2 * a), rtol=1e-12)
    assert np.all(exact.values <= bound.values)


def test_envelope_zero():
    t = np.arange(1, 51, dtype=float)
    exact, bound = proposition_envelope(0.5, t**-0.6, t**-1.0, np.zeros(50), 0.0, 50)
    assert np.all(exact.values == 0.0) and np.all(bound.values == 0.0)


def test_envelope_dominance_random():
    rng = np.random.default_rng(3)
    for _ in range(200):
        lam, a, e, b, w0 = random_envelope_inputs(rng)
        exact, bound = proposition_envelope(lam, a, e, b, w0, len(a))
        assert np.all(exact.values <= bound.values * (1 + 1e-12))


def test_envelope_rejections():
    t = np.arange(1, 11, dtype=float)
    with pytest.raises(ValueError, match="negative"):
        proposition_envelope(1.0, np.full(10, 2.0), np.zeros(10), np.zeros(10), 1.0, 10)
    with pytest.raises(ValueError, match="nonincreasing"):
        proposition_envelope(1.0, 0.1 * t, np.zeros(10), np.zeros(10), 1.0, 10)
    with pytest.raises(ValueError):
        proposition_envelope(1.0, t**-1, np.zeros(10), np.zeros(10), 1.0, 11)


def test_omega_constant():
    t = np.arange(1, 21, dtype=float)
    assert omega_constant(0.5, t**-1, t**-1) == 1
    # lam * alpha_t <= 1 from t = 3 on; C * eta_t <= lam must first hold at t = 3, so C = floor(2 / eta_2) + 1 = 5
    assert omega_constant(2.0, 1.5 * t**-1, t**-1) == 5


def test_drift_examples():
    for f in (ar1_drift_closed_form, ar1_drift_gaussian):
        assert f(0.4, 0.4, 1.3, 16) == 0.0
    for th, s2, n in [(0.3, 2.0, 4), (-1.1, 0.5, 9)]:
        assert ar1_drift_closed_form(th, 0.0, s2, n) == pytest.approx(4 * th**2 * s2 * (s2 + 1) / n**2, rel=1e-14)
    r = verify_ar1_drift(0.5, 0.5, 1.0, 8, mc_reps=10_000)
    assert r.mc_estimate == 0.0 and r.closed_form == 0.0
    with pytest.raises(ValueError):
        verify_ar1_drift(0.2, 0.5, 1.0, 8, mc_reps=100)


def test_drift_mc_matches_gaussian_expectation():
    rng = np.random.default_rng(4)
    for k in range(5):
        ts = rng.uniform(-0.9, 0.9)
        th = ts + rng.uniform(-1, 1)
        n = int(rng.integers(1, 20))
        r = verify_ar1_drift(th, ts, 1.0, n, mc_reps=200_000, seed=k)
        exact = ar1_drift_gaussian(th, ts, 1.0, n)
        assert abs(r.mc_estimate - exact) <= 4 * r.std_error


def test_conditional_gradient_against_path_simulation():
    rng = np.random.default_rng(5)
    ts, th, s2, n = 0.6, -0.1, 1.5, 5
    for x_prev in (-2.0, 0.3, 1.7):
        reps = 400_000
        x = np.empty((reps, n + 1))
        x[:, 0] = x_prev
        eps = rng.standard_normal((reps, n)) * math.sqrt(s2)
        for i in range(n):
            x[:, i + 1] = ts * x[:, i] + eps[:, i]
        g = -2.0 * np.sum(x[:, :-1] * (x[:, 1:] - th * x[:, :-1]), axis=1) / n
        se = g.std() / math.sqrt(reps)
        assert abs(g.mean() - ar1_conditional_gradient(x_prev, th, ts, s2, n)) <= 4 * se


def test_bound_saturates_to_inf_without_nan():
    p = params(c_kappa=100.0)
    terms = theorem_bound(p, cumulative_count(p.schedule, 50))
    assert terms.init_term == math.inf and terms.total == math.inf
    q = params(c_kappa=100.0, delta0=0.0, b_nu=0.0, uncertainty=UncertaintyParams(c_sigma=0.0))
    assert theorem_bound(q, cumulative_count(q.schedule, 50)).total == 0.0
