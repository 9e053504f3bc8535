"""Core K-means types and the sequential Lloyd loop.

The sequential loop is the reference every distributed runner is checked
against, so floating-point accumulation order is pinned everywhere: distances
accumulate coordinate by coordinate, per-cluster sums run over samples in
ascending index order, and nearest-center ties resolve to the lowest center
index.  Any assignment path that must agree bitwise with this module has to go
through the same kernels (`pairwise_sqdist`, `assign_labels`, `group_means`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InitError


def _as_matrix(values: object) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ConfigError(f"expected a 2-d array of samples, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ConfigError(f"need at least one row and one column, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError("samples must be finite")
    return np.ascontiguousarray(arr)


@dataclass(frozen=True)
class Dataset:
    """Immutable table of n d-dimensional samples, row-major float64."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = _as_matrix(self.values).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_rows(cls, rows: object) -> "Dataset":
        return cls(np.asarray(rows, dtype=np.float64))


@dataclass(frozen=True)
class CentroidSet:
    """k centers of dimension d."""

    centers: np.ndarray

    def __post_init__(self) -> None:
        arr = _as_matrix(self.centers).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "centers", arr)

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def d(self) -> int:
        return self.centers.shape[1]


@dataclass
class AssignmentTable:
    """Sample-to-center map plus the bookkeeping of the last update pass."""

    assign: np.ndarray                 # (n,) int64, entries in [0, k)
    changed: bool
    counts: np.ndarray                 # (k,) int64, counts[c] == |assign == c|

    def validate(self, k: int) -> None:
        if self.assign.ndim != 1 or self.counts.shape != (k,):
            raise ConfigError("malformed assignment table")
        if self.assign.size and (self.assign.min() < 0 or self.assign.max() >= k):
            raise ConfigError("assignment out of range")
        if not np.array_equal(np.bincount(self.assign, minlength=k), self.counts):
            raise ConfigError("counts do not match assignments")


@dataclass(frozen=True)
class KmeansConfig:
    k: int
    max_iters: int = 200
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")


def squared_distance(a: object, b: object) -> float:
    """Squared Euclidean distance, accumulated coordinate by coordinate."""
    ax = np.asarray(a, dtype=np.float64)
    bx = np.asarray(b, dtype=np.float64)
    if ax.shape != bx.shape or ax.ndim != 1:
        raise ConfigError(f"shape mismatch: {ax.shape} vs {bx.shape}")
    total = 0.0
    for j in range(ax.shape[0]):
        diff = float(ax[j]) - float(bx[j])
        total += diff * diff
    return total


def pairwise_sqdist(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Squared distances between every point and every center, (n, k).

    Accumulates over coordinates in ascending order so each entry is bitwise
    identical to `squared_distance` on the same pair, no matter how the caller
    sliced its rows out of a larger table.
    """
    pts = np.asarray(points, dtype=np.float64)
    ctr = np.asarray(centers, dtype=np.float64)
    out = np.zeros((pts.shape[0], ctr.shape[0]), dtype=np.float64)
    for j in range(pts.shape[1]):
        diff = pts[:, j, np.newaxis] - ctr[np.newaxis, :, j]
        out += diff * diff
    return out


def assign_labels(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Nearest-center label per row; ties go to the lowest center index."""
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmin(pairwise_sqdist(points, centers), axis=1).astype(np.int64)


def nearest_center(x: object, centroids: CentroidSet) -> int:
    """Index of the closest center to x, lowest index on ties."""
    xs = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if xs.shape[1] != centroids.d:
        raise ConfigError(f"dimension mismatch: {xs.shape[1]} vs {centroids.d}")
    return int(assign_labels(xs, centroids.centers)[0])


def init_centroids(data: Dataset, k: int) -> CentroidSet:
    """First k pairwise-distinct samples, in ascending sample order."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    chosen: list[int] = []
    for i in range(data.n):
        row = data.values[i]
        if any(np.array_equal(row, data.values[j]) for j in chosen):
            continue
        chosen.append(i)
        if len(chosen) == k:
            break
    if len(chosen) < k:
        raise InitError(f"need {k} distinct samples, found only {len(chosen)}")
    return CentroidSet(data.values[chosen])


def initial_assignment(n: int, k: int) -> AssignmentTable:
    """Starting table before the first pass: everything on center 0."""
    counts = np.zeros(k, dtype=np.int64)
    counts[0] = n
    return AssignmentTable(np.zeros(n, dtype=np.int64), True, counts)


def group_means(values: np.ndarray, labels: np.ndarray, k: int,
                prev: np.ndarray) -> np.ndarray:
    """Per-cluster means; a cluster with no samples keeps its previous row."""
    out = np.empty((k, values.shape[1]), dtype=np.float64)
    for c in range(k):
        rows = np.flatnonzero(labels == c)
        if rows.size:
            out[c] = np.sum(values[rows], axis=0) / rows.size
        else:
            out[c] = prev[c]
    return out


def lloyd_step(data: Dataset, centroids: CentroidSet,
               table: AssignmentTable) -> tuple[CentroidSet, AssignmentTable]:
    """One full pass: reassign every sample, then recompute every center."""
    if centroids.d != data.d:
        raise ConfigError(f"dimension mismatch: data d={data.d}, centers d={centroids.d}")
    labels = assign_labels(data.values, centroids.centers)
    changed = not np.array_equal(labels, table.assign)
    counts = np.bincount(labels, minlength=centroids.k)
    centers = group_means(data.values, labels, centroids.k, centroids.centers)
    return CentroidSet(centers), AssignmentTable(labels, changed, counts)


def run_sequential(data: Dataset, cfg: KmeansConfig) -> tuple[CentroidSet, AssignmentTable, int]:
    """Lloyd iterations until no assignment changes or max_iters is hit.

    Returns (centroids, assignments, iterations completed).
    """
    centroids = init_centroids(data, cfg.k)
    table = initial_assignment(data.n, cfg.k)
    iters = 0
    for _ in range(cfg.max_iters):
        centroids, table = lloyd_step(data, centroids, table)
        iters += 1
        if not table.changed:
            break
    return centroids, table, iters


def objective(data: Dataset, centroids: CentroidSet, table: AssignmentTable) -> float:
    """Sum of squared distances to assigned centers, ascending sample order."""
    mu = centroids.centers[table.assign]
    d2 = np.zeros(data.n, dtype=np.float64)
    for j in range(data.d):
        diff = data.values[:, j] - mu[:, j]
        d2 += diff * diff
    total = 0.0
    for v in d2.tolist():
        total += v
    return total
