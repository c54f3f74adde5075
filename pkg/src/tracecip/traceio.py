"""
Trace ingestion and preparation: CSV reading and writing, the
length/duration filter with normalization, maximum-likelihood
lengthscale fitting on an index grid, and synthetic traces.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg

from .gp import MVN, KernelFamily, KernelSpec, build_covariance, sample_mvn

DEFAULT_GRID = tuple(float(v) for v in np.geomspace(0.5, 20.0, 40))

# GPS-style filter: at most 50 points spanning 4.5 to 5.5 minutes
DEFAULT_MAX_LEN = 50
DEFAULT_MIN_DUR = 270.0
DEFAULT_MAX_DUR = 330.0


class RejectReason(str, enum.Enum):
    TOO_SHORT = "too_short"
    TOO_LONG = "too_long"
    DURATION = "duration"
    CONSTANT = "constant_dimension"
    TIME_ORDER = "time_order"
    NONFINITE = "nonfinite"


class TraceRejected(ValueError):
    def __init__(self, reason: RejectReason, detail: str = ""):
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
        self.reason = reason
        self.detail = detail


class FitError(RuntimeError):
    pass


@dataclass
class Trace:
    """
    Timestamps in seconds and a ``(points, dims)`` value array.
    """

    timestamps: np.ndarray
    values: np.ndarray
    dim_labels: tuple[str, ...]
    trace_id: str = ""

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        self.values = vals
        self.dim_labels = tuple(str(d) for d in self.dim_labels)
        if vals.shape[0] != self.timestamps.size:
            raise ValueError(f"{vals.shape[0]} value rows for {self.timestamps.size} timestamps")
        if vals.shape[1] != len(self.dim_labels):
            raise ValueError(f"{vals.shape[1]} value columns for {len(self.dim_labels)} labels")

    @property
    def n_points(self) -> int:
        return self.timestamps.size

    @property
    def n_dims(self) -> int:
        return self.values.shape[1]

    @property
    def duration(self) -> float:
        return float(self.timestamps[-1] - self.timestamps[0]) if self.n_points else 0.0

    @property
    def sampling_period(self) -> float:
        """Median gap between consecutive timestamps."""
        if self.n_points < 2:
            raise ValueError("sampling period needs at least two points")
        return float(np.median(np.diff(self.timestamps)))

    def dimension(self, label: str) -> np.ndarray:
        return self.values[:, self.dim_labels.index(label)]


def read_trace_csv(path) -> Trace:
    """Read ``t,<dim1>,<dim2>,...`` with a header row."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "t" or len(header) < 2:
            raise ValueError(f"{path}: header must start with 't' followed by dimension names")
        rows = [[float(x) for x in row] for row in reader if row and any(c.strip() for c in row)]
    arr = np.asarray(rows, dtype=float).reshape(-1, len(header))
    return Trace(arr[:, 0], arr[:, 1:], tuple(h.strip() for h in header[1:]), path.stem)


def write_trace_csv(trace: Trace, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", *trace.dim_labels])
        for t, row in zip(trace.timestamps, trace.values):
            writer.writerow([repr(float(t)), *(repr(float(v)) for v in row)])


def read_batch(directory) -> list[Trace]:
    """All ``*.csv`` traces in a directory, sorted by file name."""
    return [read_trace_csv(p) for p in sorted(Path(directory).glob("*.csv"))]


def preprocess(
    raw: Trace,
    min_len: int = 2,
    max_len: int | None = DEFAULT_MAX_LEN,
    min_dur: float | None = DEFAULT_MIN_DUR,
    max_dur: float | None = DEFAULT_MAX_DUR,
) -> Trace:
    """
    Filter by length and duration, then de-mean each dimension and scale
    it to unit (population) variance.

    Raises
    ------
    TraceRejected
        With a reason code when the trace fails a filter.
    """
    n = raw.n_points
    if not np.all(np.isfinite(raw.timestamps)) or not np.all(np.isfinite(raw.values)):
        raise TraceRejected(RejectReason.NONFINITE)
    if n < max(min_len, 2):
        raise TraceRejected(RejectReason.TOO_SHORT, f"{n} points")
    if max_len is not None and n > max_len:
        raise TraceRejected(RejectReason.TOO_LONG, f"{n} points > {max_len}")
    if np.any(np.diff(raw.timestamps) < 0):
        raise TraceRejected(RejectReason.TIME_ORDER)
    dur = raw.duration
    if (min_dur is not None and dur < min_dur) or (max_dur is not None and dur > max_dur):
        raise TraceRejected(RejectReason.DURATION, f"{dur:.6g} s")
    centered = raw.values - raw.values.mean(axis=0)
    std = centered.std(axis=0)
    scale = np.max(np.abs(raw.values), axis=0)
    for label, s, m in zip(raw.dim_labels, std, scale):
        if s <= 1e-12 * max(m, 1.0):
            raise TraceRejected(RejectReason.CONSTANT, label)
    return Trace(raw.timestamps.copy(), centered / std, raw.dim_labels, raw.trace_id)


@dataclass
class LengthscaleFit:
    l_eff: float
    grid: np.ndarray
    loglik: np.ndarray

    @property
    def best_loglik(self) -> float:
        return float(np.max(self.loglik))


def gaussian_loglik(x: np.ndarray, cov: np.ndarray) -> float:
    """Zero-mean multivariate normal log density; ``-inf`` if ``cov`` is not PD."""
    try:
        chol = linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        return -math.inf
    alpha = linalg.solve_triangular(chol, x, lower=True)
    return float(-0.5 * alpha @ alpha - np.sum(np.log(np.diag(chol))) - 0.5 * x.size * math.log(2 * math.pi))


def fit_lengthscale(
    values,
    family: KernelFamily | str = KernelFamily.RBF,
    grid: Sequence[float] = DEFAULT_GRID,
    period: float | None = None,
    jitter: float = 1e-8,
) -> LengthscaleFit:
    """
    Grid maximum-likelihood effective lengthscale for one dimension.

    Parameters
    ----------
    values : array_like or Trace
        Preprocessed samples; a single-dimension Trace is accepted.
    family : KernelFamily
    grid : sequence of float
        Candidate lengthscales in index units. Ties go to the smaller value.
    period : float, optional
        Needed for the periodic family.
    """
    if isinstance(values, Trace):
        if values.n_dims != 1:
            raise ValueError("pass one dimension at a time")
        values = values.values[:, 0]
    x = np.asarray(values, dtype=float).reshape(-1)
    cand = np.unique(np.asarray(grid, dtype=float))
    if cand.size == 0:
        raise ValueError("grid must be nonempty")
    base = KernelSpec(KernelFamily(family), float(cand[0]), period, 1.0, jitter)
    ll = np.array([gaussian_loglik(x, build_covariance(base.with_lengthscale(l), x.size)) for l in cand])
    finite = np.isfinite(ll)
    if not np.any(finite):
        conds = [np.linalg.cond(build_covariance(base.with_lengthscale(l), x.size)) for l in (cand[0], cand[-1])]
        raise FitError(f"log-likelihood non-finite on the whole grid; condition numbers at the ends {conds}")
    best = int(np.argmax(np.where(finite, ll, -np.inf)))
    return LengthscaleFit(float(cand[best]), cand, ll)


@dataclass
class FitRow:
    trace_id: str
    dim: str
    l_eff: float
    loglik: float


def fit_trace(trace: Trace, family=KernelFamily.RBF, grid=DEFAULT_GRID, period=None) -> list[FitRow]:
    rows = []
    for k, label in enumerate(trace.dim_labels):
        fit = fit_lengthscale(trace.values[:, k], family, grid, period)
        rows.append(FitRow(trace.trace_id, label, fit.l_eff, fit.best_loglik))
    return rows


def write_fits_csv(rows: Sequence[FitRow], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trace_id", "dim", "l_eff", "loglik"])
        for r in rows:
            writer.writerow([r.trace_id, r.dim, f"{r.l_eff:.12g}", f"{r.loglik:.12g}"])


def effective_lengthscale(l_seconds: float, period_seconds: float) -> float:
    """Lengthscale in sample counts: seconds divided by the sampling period."""
    if not period_seconds > 0:
        raise ValueError(f"sampling period must be positive, got {period_seconds}")
    if not l_seconds > 0:
        raise ValueError(f"lengthscale must be positive, got {l_seconds}")
    return l_seconds / period_seconds


def batch_summary(l_effs: Sequence[float]) -> dict:
    """Median and interquartile band of fitted lengthscales."""
    arr = np.asarray(l_effs, dtype=float)
    if arr.size == 0:
        raise ValueError("no fitted values")
    q1, med, q3 = np.percentile(arr, [25, 50, 75])
    return {"median": float(med), "q1": float(q1), "q3": float(q3), "count": int(arr.size)}


def dimension_correlation(traces: Sequence[Trace], dims: tuple[int, int] = (0, 1)) -> float:
    """
    Pooled Pearson correlation between two dimensions, after removing each
    trace's own mean.
    """
    a_parts, b_parts = [], []
    for tr in traces:
        a = tr.values[:, dims[0]]
        b = tr.values[:, dims[1]]
        a_parts.append(a - a.mean())
        b_parts.append(b - b.mean())
    if not a_parts:
        raise ValueError("no traces")
    a = np.concatenate(a_parts)
    b = np.concatenate(b_parts)
    if a.size < 2:
        raise ValueError("need at least two points")
    denom = math.sqrt(float(a @ a) * float(b @ b))
    if denom == 0:
        raise ValueError("a dimension has zero variance")
    return float(a @ b) / denom


def synth_trace(spec: KernelSpec, n: int, seed: int, dims: int = 1, trace_id: str = "") -> Trace:
    """
    Independent GP draws per dimension at unit-spaced timestamps.
    Deterministic in ``seed``.
    """
    cov = build_covariance(spec, n)
    children = np.random.SeedSequence(seed).spawn(dims) if dims > 1 else [seed]
    cols = []
    for child in children:
        s = int(child.generate_state(1)[0]) if isinstance(child, np.random.SeedSequence) else child
        cols.append(sample_mvn(MVN(np.zeros(n), cov), s, 1)[0])
    labels = ("x",) if dims == 1 else tuple(f"d{k}" for k in range(dims))
    return Trace(np.arange(n, dtype=float), np.stack(cols, axis=1), labels, trace_id or f"synth-{seed}")
