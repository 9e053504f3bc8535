"""Two parallel decompositions of the clustering pass.

CENTERS splits the center list: each position owns a contiguous block of
centers and, dynamically, the samples currently assigned to those centers.
A sample whose nearest center moved to another block is handed over with a
16-byte ownership record.  Center recomputation is local to the owner, so
with the shared distance kernel and ascending-index extraction the result is
bitwise identical to the sequential pass.

SAMPLES splits the dataset into fixed contiguous blocks: each position
assigns its block against the full replicated center list, then the per
center partial sums and counts are combined across positions in ascending
order and every position performs the same division.  Assignments match the
sequential pass exactly; centroids agree to rounding because the summation
tree differs.

The per-iteration math lives in small pure functions.  `run_parallel` drives
them position by position in one process (no simulated cluster, no failure
handling); the fault-tolerant runtime drives the same functions from real
rank programs.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .kmeans import (
    AssignmentTable,
    CentroidSet,
    Dataset,
    KmeansConfig,
    init_centroids,
    pairwise_sqdist,
)


class Method(enum.Enum):
    CENTERS = "centers"
    SAMPLES = "samples"


def partition(total: int, parts: int) -> list[tuple[int, int]]:
    """Split `total` items into `parts` contiguous blocks, larger blocks first.

    Sizes differ by at most one; the first `total % parts` blocks get the
    extra item.  Blocks may be empty when parts > total.
    """
    if parts < 1:
        raise ConfigError(f"parts must be >= 1, got {parts}")
    if total < 0:
        raise ConfigError(f"total must be >= 0, got {total}")
    base, rem = divmod(total, parts)
    blocks = []
    start = 0
    for p in range(parts):
        size = base + (1 if p < rem else 0)
        blocks.append((start, start + size))
        start += size
    return blocks


def owner_position(blocks: list[tuple[int, int]], center: int) -> int:
    """Position whose block contains `center`."""
    for p, (lo, hi) in enumerate(blocks):
        if lo <= center < hi:
            return p
    raise ConfigError(f"center {center} outside every block")


# 16-byte ownership record: sample id, new center id
_RECORD = struct.Struct("<QQ")
RECORD_SIZE = _RECORD.size


def encode_records(pairs: list[tuple[int, int]]) -> bytes:
    return b"".join(_RECORD.pack(sid, ctr) for sid, ctr in pairs)


def decode_records(buf: bytes) -> list[tuple[int, int]]:
    if len(buf) % RECORD_SIZE:
        raise ConfigError(f"record buffer length {len(buf)} is not a multiple of {RECORD_SIZE}")
    return [_RECORD.unpack_from(buf, off) for off in range(0, len(buf), RECORD_SIZE)]


# -- splitting the centers ---------------------------------------------------

@dataclass
class CentersPass:
    """Result of one assignment pass over the samples a position owns."""

    changed: bool
    staying: dict[int, int]                       # sid -> center, kept here
    outgoing: dict[int, list[tuple[int, int]]]    # dst position -> records


def centers_compute(values: np.ndarray, centers: np.ndarray,
                    owned: dict[int, int],
                    blocks: list[tuple[int, int]], my_pos: int) -> CentersPass:
    """Reassign this position's samples against the full center list."""
    if not owned:
        return CentersPass(changed=False, staying={}, outgoing={})
    ids = sorted(owned)
    rows = np.asarray(ids, dtype=np.int64)
    dists = pairwise_sqdist(values[rows], centers)
    new = np.argmin(dists, axis=1)
    changed = False
    staying: dict[int, int] = {}
    outgoing: dict[int, list[tuple[int, int]]] = {}
    lo, hi = blocks[my_pos]
    for i, sid in enumerate(ids):
        ctr = int(new[i])
        if ctr != owned[sid]:
            changed = True
        if lo <= ctr < hi:
            staying[sid] = ctr
        else:
            outgoing.setdefault(owner_position(blocks, ctr), []).append((sid, ctr))
    return CentersPass(changed=changed, staying=staying, outgoing=outgoing)


def centers_recompute(values: np.ndarray, owned: dict[int, int],
                      centers_prev: np.ndarray,
                      block: tuple[int, int]) -> np.ndarray:
    """New rows for the owned center block; empty centers keep their row."""
    lo, hi = block
    out = centers_prev[lo:hi].copy()
    if hi == lo:
        return out
    members: dict[int, list[int]] = {}
    for sid, ctr in owned.items():
        members.setdefault(ctr, []).append(sid)
    for ctr in range(lo, hi):
        ids = members.get(ctr)
        if not ids:
            continue
        ids.sort()
        rows = values[np.asarray(ids, dtype=np.int64)]
        out[ctr - lo] = np.sum(rows, axis=0) / len(ids)
    return out


def merge_incoming(staying: dict[int, int],
                   batches: list[list[tuple[int, int]]]) -> dict[int, int]:
    """Fold handed-over records (in source order) into the kept set."""
    owned = dict(staying)
    for batch in batches:
        for sid, ctr in batch:
            owned[sid] = ctr
    return owned


# -- splitting the samples ---------------------------------------------------

def samples_compute(values_block: np.ndarray, centers: np.ndarray,
                    prev_assign: np.ndarray) -> tuple[np.ndarray, bool]:
    if values_block.shape[0] == 0:
        return prev_assign.copy(), False
    dists = pairwise_sqdist(values_block, centers)
    new = np.argmin(dists, axis=1).astype(np.int64)
    return new, not np.array_equal(new, prev_assign)


def samples_partials(values_block: np.ndarray, assign: np.ndarray,
                     k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-center coordinate sums and member counts for one block."""
    d = values_block.shape[1]
    sums = np.zeros((k, d), dtype=np.float64)
    counts = np.zeros(k, dtype=np.int64)
    for ctr in range(k):
        rows = np.flatnonzero(assign == ctr)
        if rows.size:
            sums[ctr] = np.sum(values_block[rows], axis=0)
            counts[ctr] = rows.size
    return sums, counts


def samples_divide(sums: np.ndarray, counts: np.ndarray,
                   centers_prev: np.ndarray) -> np.ndarray:
    out = centers_prev.copy()
    for ctr in range(len(counts)):
        if counts[ctr] > 0:
            out[ctr] = sums[ctr] / counts[ctr]
    return out


# -- single-process driver ---------------------------------------------------

@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    centers: np.ndarray
    assign: np.ndarray


@dataclass
class ParallelResult:
    centroids: CentroidSet
    table: AssignmentTable
    iterations: int
    converged: bool
    history: list[IterationRecord] = field(default_factory=list)
    transfers: list[int] = field(default_factory=list)   # CENTERS only


def _assemble_table(assign: np.ndarray, k: int, changed: bool) -> AssignmentTable:
    counts = np.bincount(assign, minlength=k).astype(np.int64)
    table = AssignmentTable(assign=assign.astype(np.int64), changed=changed, counts=counts)
    table.validate(k)
    return table


def run_parallel(data: Dataset, cfg: KmeansConfig, procs: int, method: Method,
                 record_history: bool = False,
                 force_iters: int | None = None) -> ParallelResult:
    """Failure-free lockstep execution of either decomposition.

    With `force_iters` the convergence exit is ignored and exactly that many
    passes run (centers stop moving once assignments settle, so extra passes
    are fixed points).
    """
    if procs < 1:
        raise ConfigError(f"procs must be >= 1, got {procs}")
    if method is Method.CENTERS:
        return _run_centers(data, cfg, procs, record_history, force_iters)
    return _run_samples(data, cfg, procs, record_history, force_iters)


def _history_append(history: list[IterationRecord], record: bool, it: int,
                    centers: np.ndarray, assign: np.ndarray) -> None:
    if record:
        history.append(IterationRecord(it, centers.copy(), assign.copy()))


def _run_centers(data: Dataset, cfg: KmeansConfig, procs: int,
                 record_history: bool, force_iters: int | None) -> ParallelResult:
    values = data.values
    k = cfg.k
    blocks = partition(k, procs)
    centers = init_centroids(data, k).centers.copy()
    # every sample starts on center 0, so position 0 owns the whole set
    owned: list[dict[int, int]] = [{} for _ in range(procs)]
    owned[0] = {sid: 0 for sid in range(data.n)}

    limit = force_iters if force_iters is not None else cfg.max_iters
    history: list[IterationRecord] = []
    transfers: list[int] = []
    iterations = 0
    converged = False
    for t in range(1, limit + 1):
        passes = [centers_compute(values, centers, owned[p], blocks, p)
                  for p in range(procs)]
        changed = False
        for p in range(procs):
            changed = changed or passes[p].changed
        moved = 0
        for p in range(procs):
            batches = []
            for src in range(procs):
                if src == p:
                    continue
                batch = passes[src].outgoing.get(p, [])
                moved += len(batch)
                batches.append(batch)
            owned[p] = merge_incoming(passes[p].staying, batches)
        transfers.append(moved)
        iterations = t
        # the declared all-zeros bootstrap assignment was never derived from
        # distances, so a pass-1 convergence (k=1) still establishes the means;
        # from pass 2 on the recompute is a fixed point and is skipped
        if not changed and t > 1 and force_iters is None:
            converged = True
            _history_append(history, record_history, t, centers, _gather_assign(owned, data.n))
            break
        if not changed:
            converged = True
        new_centers = centers.copy()
        for p in range(procs):
            lo, hi = blocks[p]
            new_centers[lo:hi] = centers_recompute(values, owned[p], centers, blocks[p])
        centers = new_centers
        _history_append(history, record_history, t, centers, _gather_assign(owned, data.n))
        if converged and force_iters is None:
            break

    assign = _gather_assign(owned, data.n)
    return ParallelResult(
        centroids=CentroidSet(centers),
        table=_assemble_table(assign, k, changed=not converged),
        iterations=iterations,
        converged=converged,
        history=history,
        transfers=transfers,
    )


def _gather_assign(owned: list[dict[int, int]], n: int) -> np.ndarray:
    assign = np.full(n, -1, dtype=np.int64)
    for dct in owned:
        for sid, ctr in dct.items():
            assign[sid] = ctr
    if np.any(assign < 0):
        missing = int(np.flatnonzero(assign < 0)[0])
        raise ConfigError(f"sample {missing} lost its owner")
    return assign


def _run_samples(data: Dataset, cfg: KmeansConfig, procs: int,
                 record_history: bool, force_iters: int | None) -> ParallelResult:
    values = data.values
    k = cfg.k
    blocks = partition(data.n, procs)
    centers = init_centroids(data, k).centers.copy()
    assign = np.zeros(data.n, dtype=np.int64)

    limit = force_iters if force_iters is not None else cfg.max_iters
    history: list[IterationRecord] = []
    iterations = 0
    converged = False
    for t in range(1, limit + 1):
        news = []
        changed = False
        for p in range(procs):
            lo, hi = blocks[p]
            new_block, chg = samples_compute(values[lo:hi], centers, assign[lo:hi])
            news.append(new_block)
            changed = changed or chg
        for p in range(procs):
            lo, hi = blocks[p]
            assign[lo:hi] = news[p]
        iterations = t
        # same pass-1 rule as the center split: means must be established once
        if not changed and t > 1 and force_iters is None:
            converged = True
            _history_append(history, record_history, t, centers, assign)
            break
        if not changed:
            converged = True
        sums = np.zeros((k, values.shape[1]), dtype=np.float64)
        counts = np.zeros(k, dtype=np.int64)
        for p in range(procs):          # ascending fold, same as the reduction
            lo, hi = blocks[p]
            ps, pc = samples_partials(values[lo:hi], assign[lo:hi], k)
            sums = sums + ps
            counts = counts + pc
        centers = samples_divide(sums, counts, centers)
        _history_append(history, record_history, t, centers, assign)
        if converged and force_iters is None:
            break

    return ParallelResult(
        centroids=CentroidSet(centers),
        table=_assemble_table(assign, k, changed=not converged),
        iterations=iterations,
        converged=converged,
        history=history,
    )
