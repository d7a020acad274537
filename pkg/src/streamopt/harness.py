"""Replication runner and experiment configurations.

A configuration names a data-generating model, a base schedule, a list of
schedule variants and an observation budget ``horizon``. Each replication
draws its own truth, starting point and data stream from a derived seed;
every variant of a replication sees the same stream. Per-replication error
curves are reduced in replication order, so outputs do not depend on the
number of workers.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .models import (
    AR1Model,
    ArArchModel,
    ArchModel,
    ArchParams,
    GeometricMedianModel,
    LossModel,
    MisspecifiedAR1Model,
    ZeroModel,
    ma1_pseudo_optimum,
    weiszfeld,
)
from .optim import ProjectionSpec, log_grid, run
from .schedules import ScheduleParams, batch_size, batches_within
from .streams import (
    GeneratorSpec,
    Innovation,
    array_series,
    batcher,
    derive_seed,
    deseasonalize,
    generate_series,
    ingest_csv,
)
from .theory import ErrorCurve, fit_decay_exponent

MODEL_KINDS = ("ar1", "ma1", "arch1", "ar1_arch1", "median", "zero")
CSV_COLUMNS = ("variant", "label", "N", "mean_err_last", "mean_err_avg", "reps_used", "diverged")
THREADS_ENV = "STREAMOPT_THREADS"


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


def _fail(field_name, msg):
    raise ConfigError(f"{field_name}: {msg}")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ModelConfig:
    """Data-generating model plus the loss fitted to it.

    ``None`` truth fields are drawn per replication. For ``median`` the
    ``source`` is ``synthetic`` (Gaussian around random centers) or ``csv``;
    ``sqrt_dim_step`` sets the base ``c_gamma`` to ``sqrt(dimension)`` unless
    the schedule gives one.
    """

    kind: str = "ar1"
    theta_star: Optional[float] = None
    phi_star: Optional[float] = None
    alpha0: float = 1.0
    alpha1: Optional[float] = None
    alpha0_init: float = 0.5
    innovation: Innovation = field(default_factory=Innovation)
    projection: ProjectionSpec = field(default_factory=ProjectionSpec)
    freeze_alpha0: bool = False
    dimension: int = 1
    source: str = "synthetic"
    path: Optional[str] = None
    timestamp_column: str = "datetime"
    value_columns: Optional[tuple] = None
    deseasonalize: bool = True
    sqrt_dim_step: bool = False
    init_radius: float = 1.0
    theta_star_range: float = 0.9

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        if isinstance(d, str):
            d = {"kind": d}
        if not isinstance(d, dict):
            _fail("model", "must be an object or a kind string")
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            _fail(f"model.{sorted(extra)[0]}", "unknown field")
        kw = dict(d)
        if "innovation" in kw:
            try:
                kw["innovation"] = Innovation.from_dict(kw["innovation"])
            except (ValueError, TypeError, AttributeError) as exc:
                _fail("model.innovation", str(exc))
        if "projection" in kw:
            proj = dict(kw["projection"] or {})
            if proj.get("center") == "optimum":
                proj["center"] = None
                kw["projection"] = _OptimumBall(proj.get("radius", math.inf))
            else:
                try:
                    kw["projection"] = ProjectionSpec.from_dict(proj)
                except (ValueError, TypeError) as exc:
                    _fail("model.projection", str(exc))
        if "value_columns" in kw and kw["value_columns"] is not None:
            kw["value_columns"] = tuple(kw["value_columns"])
        try:
            cfg = cls(**kw)
        except TypeError as exc:
            _fail("model", str(exc))
        cfg.validate()
        return cfg

    def validate(self):
        if self.kind not in MODEL_KINDS:
            _fail("model.kind", f"unknown kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.theta_star is not None and not abs(self.theta_star) < 1:
            _fail("model.theta_star", "must satisfy |theta_star| < 1")
        if self.alpha1 is not None and not 0 <= self.alpha1 < 1:
            _fail("model.alpha1", "must lie in [0, 1) for a stationary ARCH(1)")
        if not self.alpha0 > 0:
            _fail("model.alpha0", "must be positive")
        if self.dimension < 1:
            _fail("model.dimension", "must be >= 1")
        if self.source not in ("synthetic", "csv"):
            _fail("model.source", "must be 'synthetic' or 'csv'")
        if self.source == "csv" and not self.path:
            _fail("model.path", "required for csv source")
        if not self.init_radius >= 0:
            _fail("model.init_radius", "must be nonnegative")
        if not 0 <= self.theta_star_range < 1:
            _fail("model.theta_star_range", "must lie in [0, 1)")

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["innovation"] = self.innovation.to_dict()
        p = self.projection
        if isinstance(p, _OptimumBall):
            out["projection"] = {"kind": "ball", "center": "optimum", "radius": p.radius}
        else:
            out["projection"] = {k: v for k, v in asdict(p).items() if v is not None and v != math.inf}
        if self.value_columns is not None:
            out["value_columns"] = list(self.value_columns)
        return out


@dataclass(frozen=True)
class _OptimumBall:
    """Ball projection centered at the per-replication optimum."""

    radius: float
    kind: str = "ball"

    def resolve(self, center) -> ProjectionSpec:
        return ProjectionSpec.ball(center, self.radius)


@dataclass(frozen=True)
class Variant:
    label: str
    schedule: ScheduleParams


SCHEDULE_FIELDS = ("c_gamma", "alpha", "beta", "c_rho", "rho")


def _schedule(d, base: Optional[ScheduleParams], where: str) -> ScheduleParams:
    if not isinstance(d, dict):
        _fail(where, "must be an object")
    extra = set(d) - set(SCHEDULE_FIELDS)
    if extra:
        _fail(f"{where}.{sorted(extra)[0]}", "unknown schedule field")
    kw = asdict(base) if base is not None else {}
    kw.update(d)
    try:
        return ScheduleParams(**kw)
    except (ValueError, TypeError) as exc:
        _fail(where, str(exc))


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    schedule: ScheduleParams
    horizon: int
    replications: int = 100
    seed: int = 0
    variants: tuple = ()
    csv_path: Optional[str] = None
    json_path: Optional[str] = None
    grid_points: int = 200

    def __post_init__(self):
        if not self.variants:
            object.__setattr__(self, "variants", (Variant("default", self.schedule),))
        if self.replications < 1:
            _fail("replications", "must be >= 1")
        if not 0 <= self.seed < 2**64:
            _fail("seed", "must be a 64-bit unsigned integer")
        labels = [v.label for v in self.variants]
        if len(set(labels)) != len(labels):
            _fail("variants", "labels must be unique")
        first = max(batch_size(v.schedule, 1) for v in self.variants)
        if self.horizon < first:
            _fail("horizon", f"must be >= the largest first batch ({first})")
        if self.grid_points < 2:
            _fail("grid_points", "must be >= 2")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config: must be a JSON object")
        known = {"model", "schedule", "horizon", "replications", "seed", "variants", "output", "grid_points"}
        extra = set(d) - known
        if extra:
            _fail(sorted(extra)[0], "unknown top-level key")
        if "model" not in d:
            _fail("model", "missing")
        model = ModelConfig.from_dict(d["model"])
        base = _schedule(d.get("schedule", {}), None, "schedule")
        if model.sqrt_dim_step and model.kind == "median" and "c_gamma" not in d.get("schedule", {}):
            base = replace(base, c_gamma=math.sqrt(model.dimension))
        variants = []
        for i, v in enumerate(d.get("variants") or []):
            if not isinstance(v, dict) or "label" not in v:
                _fail(f"variants[{i}].label", "missing")
            overrides = {k: val for k, val in v.items() if k != "label"}
            if "schedule" in overrides:
                overrides = overrides["schedule"]
            variants.append(Variant(str(v["label"]), _schedule(overrides, base, f"variants[{i}]")))
        horizon = d.get("horizon", 100_000)
        reps = d.get("replications", 100)
        seed = d.get("seed", 0)
        for name, val in (("horizon", horizon), ("replications", reps), ("seed", seed)):
            if isinstance(val, bool) or not isinstance(val, int):
                _fail(name, f"must be an integer, got {val!r}")
        out = d.get("output") or {}
        if not isinstance(out, dict):
            _fail("output", "must be an object with csv/json paths")
        return cls(model, base, horizon, reps, seed, tuple(variants), out.get("csv"), out.get("json"),
                   int(d.get("grid_points", 200)))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON ({exc})") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "schedule": asdict(self.schedule),
            "horizon": self.horizon,
            "replications": self.replications,
            "seed": self.seed,
            "variants": [dict(label=v.label, **asdict(v.schedule)) for v in self.variants],
            "output": {"csv": self.csv_path, "json": self.json_path},
            "grid_points": self.grid_points,
        }

    def grid(self) -> np.ndarray:
        first = max(batch_size(v.schedule, 1) for v in self.variants)
        return log_grid(first, self.horizon, self.grid_points)


# ---------------------------------------------------------------------------
# presets


def _batch_variants(pairs, c_gamma=1.0, alpha=2 / 3, beta=0.0):
    return [{"label": f"C{c}_rho{r:g}" + (f"_beta{b:g}" if b else ""), "c_rho": c, "rho": r, "c_gamma": c_gamma,
             "alpha": alpha, "beta": b}
            for c, r, b in [(p[0], p[1], p[2] if len(p) > 2 else beta) for p in pairs]]


BATCH_PAIRS = [(1, 0.0), (64, 0.0), (64, 0.5)]

PRESETS = {
    "ar1": {"model": {"kind": "ar1"}, "variants": _batch_variants(BATCH_PAIRS)},
    "ma1": {"model": {"kind": "ma1"}, "variants": _batch_variants(BATCH_PAIRS)},
    "arch1": {"model": {"kind": "arch1"}, "variants": _batch_variants(BATCH_PAIRS)},
    "ar1_arch1": {"model": {"kind": "ar1_arch1"}, "variants": _batch_variants(BATCH_PAIRS[1:])},
    "median-synthetic": {
        "model": {"kind": "median", "dimension": 36, "sqrt_dim_step": True},
        "variants": _batch_variants([(64, 0.0, 0.0), (64, 0.5, 0.0), (64, 0.0, 1 / 3), (64, 0.5, 1 / 3)],
                                    c_gamma=6.0),
    },
    "median-weather": {
        "model": {"kind": "median", "source": "csv", "dimension": 36, "sqrt_dim_step": True},
        "variants": _batch_variants([(1, 0.0, 0.0), (64, 0.0, 0.0), (64, 0.5, 0.0), (64, 0.5, 1 / 3)],
                                    c_gamma=6.0),
    },
}
for _p in PRESETS.values():
    _p.setdefault("horizon", 100_000)
    _p.setdefault("replications", 100)
    _p.setdefault("seed", 0)


def preset(name: str, **overrides) -> dict:
    """A copy of the named preset as a config dictionary."""
    if name not in PRESETS:
        raise ConfigError(f"preset: unknown preset {name!r}; available: {sorted(PRESETS)}")
    d = json.loads(json.dumps(PRESETS[name]))
    d.update(overrides)
    return d


# ---------------------------------------------------------------------------
# one replication


@dataclass
class ReplicationResult:
    index: int
    err_last: list  # per variant: array over grid, or None if diverged
    err_avg: list
    diverged_at: list


def _uniform_ball(rng, center, radius):
    center = np.atleast_1d(np.asarray(center, dtype=float))
    return center + rng.uniform(-radius, radius, size=center.shape)


def _setup(cfg: ExperimentConfig, rng, shared=None):
    """Draw truth, starting point, stream and loss model for one replication."""
    m = cfg.model
    length = cfg.horizon
    inn = m.innovation
    stream_seed = int(rng.integers(0, 2**63))
    if m.kind in ("ar1", "zero"):
        ts = rng.uniform(-m.theta_star_range, m.theta_star_range) if m.theta_star is None else m.theta_star
        series = generate_series(GeneratorSpec("ar1", theta_star=ts, innovation=inn), length, stream_seed)
        model = AR1Model(ts) if m.kind == "ar1" else ZeroModel(1)
        target = np.array([ts])
        theta0 = _uniform_ball(rng, target, m.init_radius)
    elif m.kind == "ma1":
        phi = rng.standard_normal() if m.phi_star is None else m.phi_star
        series = generate_series(GeneratorSpec("ma1", phi_star=phi, innovation=inn), length, stream_seed)
        model = MisspecifiedAR1Model(phi)
        target = np.array([ma1_pseudo_optimum(phi)])
        theta0 = _uniform_ball(rng, target, m.init_radius)
    elif m.kind == "arch1":
        a1 = rng.uniform(0.1, 0.7) if m.alpha1 is None else m.alpha1
        truth = ArchParams(m.alpha0, a1)
        series = generate_series(GeneratorSpec("arch1", alpha0=m.alpha0, alpha1=a1, innovation=inn), length,
                                 stream_seed)
        model = ArchModel(truth, m.freeze_alpha0)
        target = model.optimum()
        # alpha1 starts inside [0, 1) so that the first variance is positive
        theta0 = np.array([m.alpha0_init, rng.uniform(0.0, 1.0)])
    elif m.kind == "ar1_arch1":
        ts = rng.uniform(-m.theta_star_range, m.theta_star_range) if m.theta_star is None else m.theta_star
        a1 = rng.uniform(0.1, 0.7) if m.alpha1 is None else m.alpha1
        truth = ArchParams(m.alpha0, a1)
        series = generate_series(GeneratorSpec("ar1_arch1", theta_star=ts, alpha0=m.alpha0, alpha1=a1,
                                               innovation=inn), length, stream_seed)
        model = ArArchModel(ts, truth, m.freeze_alpha0)
        target = model.optimum()
        theta0 = np.array([_uniform_ball(rng, [ts], m.init_radius)[0], m.alpha0_init, rng.uniform(0.0, 1.0)])
    else:  # median
        d = m.dimension
        if m.source == "csv":
            series, target = shared
        else:
            center = rng.uniform(-d, d, size=d)
            series = generate_series(GeneratorSpec("gaussian_iid", dimension=d, center=center), length, stream_seed)
            target = weiszfeld(series.values, tol=1e-10).median
        model = GeometricMedianModel(d, target)
        theta0 = _uniform_ball(rng, target, m.init_radius)
    return series, model, np.asarray(target, dtype=float), theta0


def _replicate(cfg: ExperimentConfig, r: int, shared=None) -> ReplicationResult:
    rng = np.random.default_rng(derive_seed(cfg.seed, r))
    series, model, target, theta0 = _setup(cfg, rng, shared)
    proj = cfg.model.projection
    if isinstance(proj, _OptimumBall):
        proj = proj.resolve(target)
    grid = cfg.grid()
    last, avg, div = [], [], []
    for v in cfg.variants:
        horizon = batches_within(v.schedule, min(cfg.horizon, len(series)))
        traj = run(model, batcher(series, v.schedule, horizon), v.schedule, theta0, horizon, proj, grid=grid)
        if traj.diverged:
            last.append(None)
            avg.append(None)
            div.append(traj.diverged_at)
            continue
        last.append(np.sum((traj.theta - target) ** 2, axis=1))
        avg.append(np.sum((traj.theta_bar - target) ** 2, axis=1))
        div.append(None)
    return ReplicationResult(r, last, avg, div)


# ---------------------------------------------------------------------------
# results


@dataclass
class VariantResult:
    label: str
    schedule: ScheduleParams
    n: np.ndarray
    mean_err_last: Optional[np.ndarray]
    mean_err_avg: Optional[np.ndarray]
    reps_used: int
    diverged: int
    slope_last: Optional[dict] = None
    slope_avg: Optional[dict] = None

    @property
    def last_curve(self) -> Optional[ErrorCurve]:
        return None if self.mean_err_last is None else _curve(self.n, self.mean_err_last)

    @property
    def avg_curve(self) -> Optional[ErrorCurve]:
        return None if self.mean_err_avg is None else _curve(self.n, self.mean_err_avg)


def _curve(n, values):
    # duplicate grid points are impossible after log_grid, so N is strictly increasing
    return ErrorCurve(n, values)


@dataclass
class ResultTable:
    variants: list
    config: ExperimentConfig
    wall_time: float = 0.0
    workers: int = 1
    per_replication: Optional[list] = None

    def __getitem__(self, label) -> VariantResult:
        for v in self.variants:
            if v.label == label:
                return v
        raise KeyError(label)

    @property
    def all_diverged(self) -> bool:
        return all(v.reps_used == 0 for v in self.variants)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for i, v in enumerate(self.variants):
            for k, n in enumerate(v.n):
                last = "" if v.mean_err_last is None else repr(float(v.mean_err_last[k]))
                avg = "" if v.mean_err_avg is None else repr(float(v.mean_err_avg[k]))
                w.writerow([i, v.label, int(n), last, avg, v.reps_used, v.diverged])
        return buf.getvalue()

    def to_json(self) -> dict:
        out = []
        for v in self.variants:
            out.append({
                "label": v.label,
                "schedule": asdict(v.schedule),
                "N": v.n.tolist(),
                "mean_err_last": None if v.mean_err_last is None else v.mean_err_last.tolist(),
                "mean_err_avg": None if v.mean_err_avg is None else v.mean_err_avg.tolist(),
                "reps_used": v.reps_used,
                "diverged": v.diverged,
                "slope_last": v.slope_last,
                "slope_avg": v.slope_avg,
            })
        return {"config": self.config.to_dict(), "variants": out,
                "runtime": {"wall_time_s": self.wall_time, "workers": self.workers}}

    def write(self, csv_path=None, json_path=None):
        csv_path = csv_path or self.config.csv_path
        json_path = json_path or self.config.json_path
        if csv_path:
            Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
            Path(csv_path).write_text(self.to_csv())
        if json_path:
            Path(json_path).parent.mkdir(parents=True, exist_ok=True)
            Path(json_path).write_text(json.dumps(self.to_json(), indent=2))


def _slope(n, values):
    if values is None:
        return None
    try:
        fit = fit_decay_exponent((n, values))
    except ValueError:
        return None
    return fit._asdict()


def _reduce(cfg: ExperimentConfig, results: list, keep: bool) -> list:
    grid = cfg.grid()
    out = []
    for j, v in enumerate(cfg.variants):
        sum_last = np.zeros(len(grid))
        sum_avg = np.zeros(len(grid))
        used = 0
        for res in results:  # replication order
            if res.err_last[j] is None:
                continue
            sum_last += res.err_last[j]
            sum_avg += res.err_avg[j]
            used += 1
        diverged = len(results) - used
        mean_last = sum_last / used if used else None
        mean_avg = sum_avg / used if used else None
        out.append(VariantResult(v.label, v.schedule, grid, mean_last, mean_avg, used, diverged,
                                 _slope(grid, mean_last), _slope(grid, mean_avg)))
    return out


def worker_count(replications: int) -> int:
    """Pool size: ``STREAMOPT_THREADS`` if set, else the CPU count, at most ``replications``."""
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}: must be an integer, got {env!r}") from None
    else:
        n = os.cpu_count() or 1
    return max(1, min(n, replications))


def _shared_data(cfg: ExperimentConfig):
    m = cfg.model
    if m.kind != "median" or m.source != "csv":
        return None
    data = ingest_csv(m.path, m.timestamp_column, m.value_columns)
    x = deseasonalize(data.matrix, data.timestamps) if m.deseasonalize else data.matrix
    if x.shape[1] != m.dimension:
        _fail("model.dimension", f"csv has {x.shape[1]} value columns, config says {m.dimension}")
    series = array_series(x)
    return series, weiszfeld(series.values, tol=1e-10).median


def run_experiment(cfg: ExperimentConfig, workers: Optional[int] = None, keep_replications: bool = False) -> ResultTable:
    """Run every replication and variant of ``cfg`` and average the error curves.

    Diverged replications are left out of the means and counted per variant.
    """
    if isinstance(cfg, dict):
        cfg = ExperimentConfig.from_dict(cfg)
    start = time.perf_counter()
    workers = worker_count(cfg.replications) if workers is None else max(1, min(workers, cfg.replications))
    shared = _shared_data(cfg)
    reps = range(cfg.replications)
    if workers == 1:
        results = [_replicate(cfg, r, shared) for r in reps]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replicate, [cfg] * len(reps), reps, [shared] * len(reps)))
    table = ResultTable(_reduce(cfg, results, keep_replications), cfg, time.perf_counter() - start, workers)
    if keep_replications:
        table.per_replication = results
    return table


def run_median_experiment(cfg: ExperimentConfig, workers: Optional[int] = None,
                          keep_replications: bool = False) -> ResultTable:
    """Geometric-median experiment against the Weiszfeld solution of the full dataset."""
    if isinstance(cfg, dict):
        cfg = ExperimentConfig.from_dict(cfg)
    if cfg.model.kind != "median":
        _fail("model.kind", "median experiment needs kind 'median'")
    return run_experiment(cfg, workers, keep_replications)
