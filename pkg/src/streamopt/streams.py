"""Synthetic dependent data streams and real-data ingestion.

Generated series are wrapped in :class:`Series`, which keeps a short
pre-sample (the values before ``X_1``) so that the first mini-batch has
lagged context, exactly like every later batch. :func:`batcher` slices a
series into time-varying mini-batches following a
:class:`~streamopt.schedules.ScheduleParams`.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.signal import lfilter

from .schedules import ScheduleParams, batch_size

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
BURN_IN = 1000
# dense Cholesky above this length needs O(L^2) memory; switch to circulant embedding
CHOLESKY_MAX_LENGTH = 2048
TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"

KINDS = ("ar1", "ma1", "arch1", "ar1_arch1", "gaussian_iid")


class GenerationError(RuntimeError):
    pass


def splitmix64(x: int) -> int:
    """One round of the splitmix64 output function."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed_base: int, index: int) -> int:
    """Independent 64-bit seed for replication ``index``."""
    return (int(seed_base) & MASK64) ^ splitmix64(int(index))


@dataclass(frozen=True)
class Innovation:
    """Innovation family: ``gaussian``, ``student_t`` or ``fgn_student_t``.

    ``df = inf`` is allowed for ``fgn_student_t`` and means Gaussian ``z``.
    """

    kind: str = "gaussian"
    df: float = math.inf
    hurst: float = 0.5

    def __post_init__(self):
        if self.kind not in ("gaussian", "student_t", "fgn_student_t"):
            raise ValueError(f"unknown innovation kind {self.kind!r}")
        if self.kind != "gaussian" and not self.df > 4:
            raise ValueError(f"student-t innovations need df > 4, got {self.df}")
        if self.kind == "student_t" and math.isinf(self.df):
            raise ValueError("student_t needs a finite df")
        if self.kind == "fgn_student_t" and not 0.0 < self.hurst < 1.0:
            raise ValueError(f"hurst must lie in (0, 1), got {self.hurst}")

    @classmethod
    def from_dict(cls, d) -> "Innovation":
        if isinstance(d, str):
            return cls(kind=d)
        df = d.get("df", math.inf)
        return cls(kind=d.get("kind", "gaussian"), df=float(df), hurst=float(d.get("hurst", 0.5)))

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind != "gaussian":
            out["df"] = self.df if math.isfinite(self.df) else "inf"
        if self.kind == "fgn_student_t":
            out["hurst"] = self.hurst
        return out


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str = "ar1"
    theta_star: float = 0.0
    phi_star: float = 0.0
    alpha0: float = 1.0
    alpha1: float = 0.0
    innovation: Innovation = field(default_factory=Innovation)
    dimension: int = 1
    center: Optional[tuple] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("ar1", "ar1_arch1") and not abs(self.theta_star) < 1:
            raise ValueError(f"ar1 needs |theta_star| < 1, got {self.theta_star}")
        if self.kind in ("arch1", "ar1_arch1"):
            if not self.alpha0 > 0:
                raise ValueError(f"arch1 needs alpha0 > 0, got {self.alpha0}")
            if self.alpha1 < 0:
                raise ValueError(f"arch1 needs alpha1 >= 0, got {self.alpha1}")
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if self.center is not None:
            object.__setattr__(self, "center", tuple(float(c) for c in self.center))
            if len(self.center) != self.dimension:
                raise ValueError("center length must equal dimension")
        if not 0 <= int(self.seed) <= MASK64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass
class Series:
    """A generated series with its pre-sample.

    ``data[:offset]`` holds the pre-sample values (last one is ``X_0``) and
    ``data[offset:]`` the observations ``X_1 .. X_L``. Scalar series are 1-D,
    vector series have shape ``(offset + L, d)``. ``innovations`` is aligned
    with ``data`` when the generator knows its true innovations.
    """

    data: np.ndarray
    offset: int
    innovations: Optional[np.ndarray] = None

    @property
    def values(self) -> np.ndarray:
        return self.data[self.offset:]

    @property
    def presample(self) -> np.ndarray:
        return self.data[: self.offset]

    def __len__(self) -> int:
        return len(self.data) - self.offset

    @property
    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))


@dataclass
class StreamBatch:
    """One mini-batch ``X_{N_{t-1}+1} .. X_{N_t}`` with lagged context.

    ``lagged[i]`` is the observation one step before ``values[i]`` and
    ``lagged2[i]`` two steps before (``None`` when the source has no such
    context).
    """

    index: int
    values: np.ndarray
    lagged: np.ndarray
    lagged2: Optional[np.ndarray] = None
    lagged_innovation: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.values) != len(self.lagged) or len(self.values) == 0:
            raise ValueError("values and lagged must be nonempty and of equal length")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def diverged(self) -> bool:
        # a sum is finite only if every term is; overflow of huge values also counts
        try:
            total = float(np.add.reduce(self.values, axis=None)) + float(np.add.reduce(self.lagged, axis=None))
        except FloatingPointError:
            return True
        return not math.isfinite(total)


# ---------------------------------------------------------------------------
# fractional Gaussian noise


def fgn_autocovariance(hurst: float, k) -> np.ndarray:
    """Autocovariance ``r(k)`` of unit-variance fractional Gaussian noise."""
    k = np.abs(np.asarray(k, dtype=float))
    h2 = 2.0 * hurst
    return 0.5 * (np.abs(k + 1.0) ** h2 - 2.0 * k**h2 + np.abs(k - 1.0) ** h2)


def _fgn_cholesky(hurst, length, rng):
    lags = np.arange(length)
    cov = fgn_autocovariance(hurst, np.abs(lags[:, None] - lags[None, :]))
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise GenerationError(f"fGn covariance not positive definite (H={hurst})") from exc
    return chol @ rng.standard_normal(length)


def _fgn_circulant(hurst, length, rng):
    # Davies-Harte: embed the Toeplitz covariance in a circulant of size 2L
    m = 2 * length
    r = fgn_autocovariance(hurst, np.arange(length + 1))
    row = np.concatenate([r, r[-2:0:-1]])
    eig = np.fft.fft(row).real
    if eig.min() < -1e-8 * eig.max():
        raise GenerationError(f"circulant embedding not nonnegative (H={hurst}, L={length})")
    eig = np.clip(eig, 0.0, None)
    noise = rng.standard_normal(m) + 1j * rng.standard_normal(m)
    return np.fft.fft(np.sqrt(eig / m) * noise).real[:length]


def fgn_increments(hurst: float, length: int, seed=None, method: str = "auto") -> np.ndarray:
    """Exact sample of fractional Gaussian noise ``B_{s+1}(H) - B_s(H)``.

    ``method`` is ``"cholesky"`` (dense factorization), ``"circulant"``
    (Davies-Harte embedding, exact as well) or ``"auto"``, which picks the
    Cholesky route for short paths. ``seed`` may be an int or a Generator.
    """
    if not 0.0 < hurst < 1.0:
        raise ValueError(f"hurst must lie in (0, 1), got {hurst}")
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = np.random.default_rng(seed)
    if method == "auto":
        method = "cholesky" if length <= CHOLESKY_MAX_LENGTH else "circulant"
    if method == "cholesky":
        return _fgn_cholesky(hurst, length, rng)
    if method == "circulant":
        if length == 1:
            return rng.standard_normal(1)
        return _fgn_circulant(hurst, length, rng)
    raise ValueError(f"unknown fGn method {method!r}")


# ---------------------------------------------------------------------------
# innovations and series


def _unit_t(rng, df, size):
    if math.isinf(df):
        return rng.standard_normal(size)
    return rng.standard_t(df, size) * math.sqrt((df - 2.0) / df)


def generate_innovations(innovation: Innovation, length: int, seed=None) -> np.ndarray:
    """Innovation sequence of the requested family.

    Student-t draws are scaled to unit variance. The fGn-modulated family
    uses ``sqrt(|G_s(H)|) * z_s``; the absolute value keeps the square root
    real for negative increments.
    """
    if isinstance(innovation, GeneratorSpec):
        innovation = innovation.innovation
    rng = np.random.default_rng(seed)
    if length == 0:
        return np.empty(0)
    if innovation.kind == "gaussian":
        return rng.standard_normal(length)
    if innovation.kind == "student_t":
        return _unit_t(rng, innovation.df, length)
    g = fgn_increments(innovation.hurst, length, rng)
    return np.sqrt(np.abs(g)) * _unit_t(rng, innovation.df, length)


def _arch_recursion(z, alpha0, alpha1, eps0):
    """ARCH(1) path ``eps_s = sigma_s z_s`` started from ``eps0``."""
    out = np.empty(len(z))
    prev = eps0
    for i, zi in enumerate(z.tolist()):
        prev = math.sqrt(alpha0 + alpha1 * prev * prev) * zi
        if abs(prev) > 1e150:
            out[i:] = math.inf
            break
        out[i] = prev
    return out


def generate_series(spec: GeneratorSpec, length: int, seed=None) -> Series:
    """Draw ``length`` observations (plus pre-sample) from ``spec``.

    ``seed`` overrides ``spec.seed``. Explosive ARCH paths are returned with
    ``inf`` from the overflow point on; downstream batches report
    ``diverged``.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    inn = spec.innovation

    if spec.kind == "gaussian_iid":
        center = np.zeros(spec.dimension) if spec.center is None else np.asarray(spec.center)
        data = center + rng.standard_normal((length + 1, spec.dimension))
        return Series(data, 1)

    if spec.kind == "ar1":
        theta = spec.theta_star
        if inn.kind == "gaussian":
            eps = rng.standard_normal(length + 1)
            x_start = rng.standard_normal() / math.sqrt(1.0 - theta * theta)
            x = lfilter([1.0], [1.0, -theta], eps, zi=[theta * x_start])[0]
            data = np.concatenate([[x_start], x])
            innov = np.concatenate([[math.nan], eps])
            return Series(data, 2, innov)
        eps = generate_innovations(inn, BURN_IN + length + 2, rng)
        x = lfilter([1.0], [1.0, -theta], eps)
        return Series(x[BURN_IN:], 2, eps[BURN_IN:])

    if spec.kind == "ma1":
        eps = generate_innovations(inn, length + 3, rng)
        x = eps[1:] + spec.phi_star * eps[:-1]
        return Series(x, 2, eps[1:])

    if spec.kind == "arch1":
        z = generate_innovations(inn, length + 1, rng)
        eps0 = math.sqrt(spec.alpha0) * z[0]
        eps = _arch_recursion(z[1:], spec.alpha0, spec.alpha1, eps0)
        data = np.concatenate([[eps0], eps])
        return Series(data, 1, data.copy())

    # ar1_arch1
    z = generate_innovations(inn, BURN_IN + length + 2, rng)
    eps = _arch_recursion(z, spec.alpha0, spec.alpha1, 0.0)
    with np.errstate(over="ignore", invalid="ignore"):
        x = lfilter([1.0], [1.0, -spec.theta_star], eps)
    return Series(x[BURN_IN:], 2, eps[BURN_IN:])


def batcher(series: Series, schedule: ScheduleParams, max_batches: Optional[int] = None) -> Iterator[StreamBatch]:
    """Yield consecutive mini-batches of sizes ``batch_size(schedule, t)``.

    Stops cleanly after the last complete batch (or after ``max_batches``).
    """
    if series.offset < 1:
        raise ValueError("series needs at least one pre-sample value for lagged context")
    data, k = series.data, series.offset
    innov = series.innovations
    has_lag2 = k >= 2
    total = len(series)
    start, t = 0, 0
    while max_batches is None or t < max_batches:
        n = batch_size(schedule, t + 1)
        if start + n > total:
            return
        lo = k + start
        t += 1
        yield StreamBatch(
            index=t,
            values=data[lo: lo + n],
            lagged=data[lo - 1: lo + n - 1],
            lagged2=data[lo - 2: lo + n - 2] if has_lag2 else None,
            lagged_innovation=innov[lo - 1: lo + n - 1] if innov is not None else None,
        )
        start += n


def array_series(values: np.ndarray, presample: Optional[np.ndarray] = None) -> Series:
    """Wrap an observed array as a :class:`Series`.

    Without an explicit pre-sample the first row becomes ``X_0``.
    """
    values = np.asarray(values, dtype=float)
    if presample is None:
        if len(values) < 2:
            raise ValueError("need at least two rows")
        return Series(values, 1)
    presample = np.asarray(presample, dtype=float)
    return Series(np.concatenate([presample, values]), len(presample))


def export_series_csv(path, series: Series) -> None:
    """Write ``index,value...`` rows (pre-sample rows get nonpositive indices)."""
    data = series.data if series.data.ndim == 2 else series.data[:, None]
    d = data.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index"] + (["value"] if d == 1 else [f"value{j}" for j in range(d)]))
        for i, row in enumerate(data):
            w.writerow([i - series.offset + 1] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# real data


@dataclass
class CsvData:
    matrix: np.ndarray
    timestamps: list
    columns: list
    dropped: int = 0


def ingest_csv(path, timestamp_column: str, value_columns: Optional[Sequence[str]] = None) -> CsvData:
    """Read a header-first CSV into a ``(time, d)`` matrix.

    Rows with a missing, non-numeric or unparseable cell in the selected
    columns are dropped; the number of dropped rows is returned and reported
    through :mod:`warnings`.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path} is empty") from None
        if timestamp_column not in header:
            raise ValueError(f"timestamp column {timestamp_column!r} not in header")
        if value_columns is None:
            value_columns = [c for c in header if c != timestamp_column]
        value_columns = list(value_columns)
        if not value_columns:
            raise ValueError("no value columns selected")
        missing = [c for c in value_columns if c not in header]
        if missing:
            raise ValueError(f"columns not found: {missing}")
        ts_idx = header.index(timestamp_column)
        idx = [header.index(c) for c in value_columns]

        rows, stamps, dropped = [], [], 0
        for line in reader:
            try:
                stamp = datetime.strptime(line[ts_idx].strip(), TIMESTAMP_FORMAT)
                vals = [float(line[j]) for j in idx]
            except (ValueError, IndexError):
                dropped += 1
                continue
            if not all(math.isfinite(v) for v in vals):
                dropped += 1
                continue
            rows.append(vals)
            stamps.append(stamp)

    if dropped:
        warnings.warn(f"{path.name}: dropped {dropped} row(s) with missing or invalid cells", stacklevel=2)
    if not rows:
        raise ValueError(f"{path} has no usable rows")
    return CsvData(np.asarray(rows, dtype=float), stamps, value_columns, dropped)


def deseasonalize(matrix: np.ndarray, timestamps: Sequence[datetime]) -> np.ndarray:
    """Remove annual then monthly means, column by column.

    First each calendar year's mean is subtracted; the calendar-month means
    (pooled across years) of that residual are then subtracted, so every
    month group of the output has zero mean.
    """
    x = np.array(matrix, dtype=float, copy=True)
    if x.ndim == 1:
        x = x[:, None]
    if len(timestamps) != len(x):
        raise ValueError("timestamps must align with rows")
    years = np.array([ts.year for ts in timestamps])
    months = np.array([ts.month for ts in timestamps])
    for groups in (years, months):
        for g in np.unique(groups):
            mask = groups == g
            x[mask] -= x[mask].mean(axis=0)
    return x if np.ndim(matrix) == 2 else x[:, 0]
