import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from streamopt.models import AR1Model, ArchModel, ArchParams, LossModel, ZeroModel
from streamopt.optim import (
    DIVERGENCE_NORM,
    OptimizerState,
    ProjectionSpec,
    log_grid,
    project,
    run,
    ssg_step,
)
from streamopt.schedules import ScheduleParams, batch_size, batches_within, cumulative_count, learning_rate
from streamopt.streams import GeneratorSpec, StreamBatch, array_series, batcher, generate_series


class ConstantGradient(LossModel):
    def __init__(self, g):
        self.g = np.asarray(g, dtype=float)
        self.dimension = len(self.g)

    def gradient(self, batch, theta):
        return self.g


class Quadratic(LossModel):
    """Gradient of ``|theta - target|^2 / 2`` shifted by the batch mean."""

    def __init__(self, target):
        self.target = np.asarray(target, dtype=float)
        self.dimension = len(self.target)

    def gradient(self, batch, theta):
        return theta - self.target + batch.values.mean()


UNIT = ScheduleParams(c_gamma=1.0, alpha=2 / 3, c_rho=1, rho=0.0)


def test_single_step():
    b = StreamBatch(1, np.zeros(1), np.zeros(1))
    s = ssg_step(OptimizerState.initial([0.0, 0.0]), b, ConstantGradient([0.3, -2.0]), UNIT)
    np.testing.assert_array_equal(s.theta, [-0.3, 2.0])
    np.testing.assert_array_equal(s.theta_bar, [0.0, 0.0])
    assert (s.t, s.n_cum) == (1, 1)


def test_step_validates_batch():
    st0 = OptimizerState.initial([0.0])
    with pytest.raises(ValueError):
        ssg_step(st0, StreamBatch(2, np.zeros(1), np.zeros(1)), ZeroModel(), UNIT)
    with pytest.raises(ValueError):
        ssg_step(st0, StreamBatch(1, np.zeros(2), np.zeros(2)), ZeroModel(), UNIT)


def test_unit_batches_average_is_arithmetic_mean():
    series = array_series(np.random.default_rng(0).standard_normal(51))
    traj = run(Quadratic([1.0]), batcher(series, UNIT), UNIT, [5.0], 50, keep_history=True)
    thetas = np.array([s.theta[0] for s in traj.history])
    for t, s in enumerate(traj.history[1:], start=1):
        assert s.theta_bar[0] == pytest.approx(thetas[:t].mean(), rel=1e-12)


def test_unit_batches_reproduce_plain_sgd():
    x = np.random.default_rng(1).standard_normal(201)
    model = AR1Model()
    traj = run(model, batcher(array_series(x), UNIT), UNIT, [0.2], 200)
    theta = 0.2
    for t in range(1, 201):
        g = -2.0 * x[t - 1] * (x[t] - theta * x[t - 1])
        theta -= learning_rate(UNIT, t, 1) * g
    assert traj.final.theta[0] == pytest.approx(theta, rel=1e-12)


def test_zero_model_is_fixed_point():
    sched = ScheduleParams(c_rho=5, rho=0.5)
    series = array_series(np.ones(2000))
    traj = run(ZeroModel(2), batcher(series, sched), sched, [1.5, -2.0], 20, keep_history=True)
    for s in traj.history:
        np.testing.assert_array_equal(s.theta, [1.5, -2.0])
    for s in traj.history[1:]:
        np.testing.assert_allclose(s.theta_bar, [1.5, -2.0], rtol=1e-15)


def test_averaging_identity_and_counts():
    sched = ScheduleParams(c_gamma=0.5, c_rho=7, rho=0.4)
    s = generate_series(GeneratorSpec("ar1", theta_star=0.6), 50_000, seed=2)
    horizon = batches_within(sched, 50_000)
    traj = run(AR1Model(0.6), batcher(s, sched), sched, [-0.3], horizon, keep_history=True)
    hist = traj.history
    sizes = np.array([batch_size(sched, t) for t in range(1, horizon + 1)], dtype=float)
    thetas = np.array([h.theta[0] for h in hist])
    for t in (1, 2, 10, horizon // 2, horizon):
        offline = np.dot(sizes[:t], thetas[:t]) / sizes[:t].sum()
        assert hist[t].theta_bar[0] == pytest.approx(offline, rel=1e-12)
        assert hist[t].n_cum == cumulative_count(sched, t)


def test_divergence_freezes_state():
    sched = ScheduleParams(c_gamma=1.0, c_rho=1)
    series = array_series(np.ones(100))
    traj = run(ConstantGradient([-1e13]), batcher(series, sched), sched, [0.0], 50)
    assert traj.diverged and traj.diverged_at == 1
    frozen = traj.final
    b = StreamBatch(2, np.ones(1), np.ones(1))
    assert ssg_step(frozen, b, ZeroModel(), sched) is frozen
    assert np.all(traj.theta[:, 0] == 0.0)


def test_divergence_on_nan_and_threshold():
    st0 = OptimizerState.initial([0.0])
    b = StreamBatch(1, np.array([np.nan]), np.zeros(1))
    assert ssg_step(st0, b, ZeroModel(), UNIT).diverged
    ok = ssg_step(st0, StreamBatch(1, np.zeros(1), np.zeros(1)), ConstantGradient([-0.9 * DIVERGENCE_NORM]), UNIT)
    assert not ok.diverged
    bad = ssg_step(st0, StreamBatch(1, np.zeros(1), np.zeros(1)), ConstantGradient([-1.1 * DIVERGENCE_NORM]), UNIT)
    assert bad.diverged


def test_arch_gradient_error_marks_divergence():
    b = StreamBatch(1, np.array([1.0]), np.array([1.0]))
    s = ssg_step(OptimizerState.initial([-1.0, 0.1]), b, ArchModel(), UNIT)
    assert s.diverged


def test_horizon_one_equals_single_step():
    sched = ScheduleParams(c_rho=4)
    series = array_series(np.arange(20.0))
    traj = run(Quadratic([0.0]), batcher(series, sched), sched, [1.0], 1)
    b = next(batcher(series, sched))
    s = ssg_step(OptimizerState.initial([1.0]), b, Quadratic([0.0]), sched)
    np.testing.assert_array_equal(traj.final.theta, s.theta)
    np.testing.assert_array_equal(traj.theta[-1], s.theta)
    with pytest.raises(ValueError):
        run(ZeroModel(), batcher(series, sched), sched, [0.0], 0)


def test_run_rejects_off_schedule_batches():
    series = array_series(np.arange(20.0))
    with pytest.raises(ValueError):
        run(ZeroModel(), batcher(series, ScheduleParams(c_rho=2)), ScheduleParams(c_rho=3), [0.0], 3)


def test_snapshots_follow_grid():
    sched = ScheduleParams(c_rho=10)
    series = array_series(np.zeros(101))
    traj = run(Quadratic([1.0]), batcher(series, sched), sched, [0.0], 10, grid=[5, 10, 15, 100])
    np.testing.assert_array_equal(traj.n_cum, [0, 10, 10, 100])
    np.testing.assert_array_equal(traj.t, [0, 1, 1, 10])


def test_log_grid():
    g = log_grid(64, 10**6)
    assert g[0] == 64 and g[-1] == 10**6 and len(g) <= 200
    assert np.all(np.diff(g) > 0)
    np.testing.assert_array_equal(log_grid(1, 3, 200), [1, 2, 3])
    with pytest.raises(ValueError):
        log_grid(5, 4)


def test_projection_examples():
    np.testing.assert_array_equal(project([2.0, 0.0], ProjectionSpec.ball([0, 0], 1)), [1.0, 0.0])
    np.testing.assert_array_equal(project([0.3, 0.4], ProjectionSpec.ball([0, 0], 1)), [0.3, 0.4])
    np.testing.assert_array_equal(project([-1.0, 0.5], ProjectionSpec.box([0, 0], [1, 1])), [0.0, 0.5])
    np.testing.assert_array_equal(project([7.0, 8.0]), [7.0, 8.0])
    with pytest.raises(ValueError):
        ProjectionSpec("ball", center=(0,), radius=-1)
    with pytest.raises(ValueError):
        ProjectionSpec.box([1], [0])
    with pytest.raises(ValueError):
        ProjectionSpec("simplex")
    assert ProjectionSpec.from_dict({"kind": "ball", "center": [1], "radius": 2}).radius == 2


def _specs(d):
    return [ProjectionSpec.ball(np.linspace(-1, 1, d), 0.7), ProjectionSpec.box(-np.ones(d), 0.5 * np.ones(d))]


vec3 = st.lists(st.floats(-50, 50), min_size=3, max_size=3).map(np.array)


@settings(max_examples=100, deadline=None)
@given(x=vec3, y=vec3)
def test_projection_nonexpansive_and_idempotent(x, y):
    for spec in _specs(3):
        px, py = project(x, spec), project(y, spec)
        assert np.linalg.norm(px - py) <= np.linalg.norm(x - y) + 1e-12
        np.testing.assert_allclose(project(px, spec), px, atol=1e-12)
        assert spec.contains(px, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(x=vec3, u=st.lists(st.floats(-1, 1), min_size=3, max_size=3).map(np.array))
def test_projection_does_not_increase_distance_to_interior_point(x, u):
    for spec in _specs(3):
        if spec.kind == "ball":
            inner = np.asarray(spec.center) + 0.5 * spec.radius * u / max(1.0, np.linalg.norm(u))
        else:
            inner = np.clip(u, spec.lower, spec.upper)
        assert np.linalg.norm(project(x, spec) - inner) <= np.linalg.norm(x - inner) + 1e-12


def test_determinism():
    sched = ScheduleParams(c_rho=16, rho=0.5)
    s = generate_series(GeneratorSpec("ar1", theta_star=0.4), 20_000, seed=3)
    h = batches_within(sched, 20_000)
    a = run(AR1Model(0.4), batcher(s, sched), sched, [0.0], h)
    b = run(AR1Model(0.4), batcher(s, sched), sched, [0.0], h)
    assert a.theta.tobytes() == b.theta.tobytes() and a.theta_bar.tobytes() == b.theta_bar.tobytes()


def test_ar1_error_decreases_in_most_runs():
    sched = ScheduleParams(c_gamma=1.0, alpha=2 / 3, c_rho=64, rho=0.5)
    horizon = batches_within(sched, 100_000)
    rng = np.random.default_rng(4)
    better = 0
    for r in range(100):
        ts = rng.uniform(-0.9, 0.9)
        theta0 = ts + rng.uniform(-1, 1)
        s = generate_series(GeneratorSpec("ar1", theta_star=ts), 100_000, seed=r)
        traj = run(AR1Model(ts), batcher(s, sched), sched, [theta0], horizon, grid=[100_000])
        better += (not traj.diverged) and (traj.final.theta[0] - ts) ** 2 < (theta0 - ts) ** 2
    assert better >= 95


def test_arch_constant_unit_batches_can_fail():
    sched = ScheduleParams(c_gamma=1.0, alpha=2 / 3, c_rho=1, rho=0.0)
    rng = np.random.default_rng(5)
    bad = 0
    for r in range(20):
        a1 = rng.uniform(0.1, 0.7)
        theta0 = np.array([0.5, rng.uniform(0, 1)])
        s = generate_series(GeneratorSpec("arch1", alpha0=1.0, alpha1=a1), 5000, seed=r)
        traj = run(ArchModel(ArchParams(1.0, a1)), batcher(s, sched), sched, theta0, 5000, grid=[5000])
        target = np.array([1.0, a1])
        bad += traj.diverged or np.sum((traj.final.theta - target) ** 2) > np.sum((theta0 - target) ** 2)
    assert bad > 0
