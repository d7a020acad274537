"""Streaming stochastic gradient estimators for dependent data streams."""

from .schedules import ScheduleParams, UncertaintyParams, batch_size, cumulative_count, learning_rate
from .streams import GeneratorSpec, Innovation, Series, StreamBatch, batcher, derive_seed, generate_series
from .models import (
    AR1Model,
    ArArchModel,
    ArchModel,
    ArchParams,
    GeometricMedianModel,
    MisspecifiedAR1Model,
    ZeroModel,
    weiszfeld,
)
from .optim import OptimizerState, ProjectionSpec, project, run, ssg_step
from .theory import BoundParams, ErrorCurve, fit_decay_exponent, theorem_bound

__version__ = "0.1.0"
