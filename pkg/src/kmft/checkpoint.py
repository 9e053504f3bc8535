"""In-memory mirrored checkpoints: ring placement, two-phase commit, restore.

Each rank keeps its own snapshot in a local segment and pushes a copy into a
mirror region on its left ring neighbor with a one-sided write.  A snapshot
becomes a recovery point only after the two-phase dance completes: `start`
captures the state and launches the transfer, `commit` waits on the transfer
token and then joins a group barrier, so a barrier-OK implies every rank's
copy is fully delivered somewhere else.

Snapshot regions are double-buffered by epoch parity.  A crash while epoch e
is in flight can therefore never touch the bytes of epoch e-1, which stays
the valid recovery point.

Payload layout (little-endian): epoch u64, iteration u64, count u64, then
count pairs of (sample id u64, center u64).
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from .errors import (
    ConfigError,
    PeerDead,
    PolicyError,
    SequenceError,
    UnrecoverableError,
)
from .parallel import RECORD_SIZE, decode_records, encode_records
from .simcluster import (
    DEFAULT_TIMEOUT,
    BarrierStatus,
    Group,
    RankContext,
    Token,
    VtPhase,
)

SEG_LOCAL = 0    # my own snapshots, double-buffered
SEG_MIRROR = 1   # snapshots I hold for my right neighbor

HEADER = struct.Struct("<QQQ")


class MirrorTopology(enum.Enum):
    RING_LEFT = "ring_left"


class CommitMode(enum.Enum):
    # commit in the same checkpoint step that started the epoch
    EAGER = "eager"
    # commit the previous epoch when the next one starts, plus a final
    # commit at termination so finished work is always protected
    LAZY = "lazy"


@dataclass(frozen=True)
class CheckpointPolicy:
    interval: int
    mode: CommitMode = CommitMode.EAGER
    topology: MirrorTopology = MirrorTopology.RING_LEFT

    def __post_init__(self) -> None:
        if self.interval < 1:
            raise ConfigError(f"checkpoint interval must be >= 1, got {self.interval}")


def mirror_target(rank: int, group: Group) -> int:
    """The rank that stores `rank`'s snapshot copy: its left ring neighbor."""
    if group.size < 2:
        raise PolicyError("ring mirroring needs at least two members")
    pos = group.position(rank)
    return group.members[(pos - 1) % group.size]


def mirror_source(rank: int, group: Group) -> int:
    """The rank whose snapshot copy `rank` stores (inverse of mirror_target)."""
    if group.size < 2:
        raise PolicyError("ring mirroring needs at least two members")
    pos = group.position(rank)
    return group.members[(pos + 1) % group.size]


def slot_size(max_entries: int) -> int:
    if max_entries < 0:
        raise ConfigError(f"max_entries must be >= 0, got {max_entries}")
    return HEADER.size + max_entries * RECORD_SIZE


def segment_spec(max_entries: int) -> dict[int, int]:
    """Segment sizes to preallocate at spawn for this payload capacity."""
    size = 2 * slot_size(max_entries)
    return {SEG_LOCAL: size, SEG_MIRROR: size}


def slot_offset(epoch: int, max_entries: int) -> int:
    return slot_size(max_entries) * (epoch % 2)


def encode_snapshot(epoch: int, iteration: int,
                    entries: list[tuple[int, int]]) -> bytes:
    if epoch < 1:
        raise ConfigError(f"epoch must be >= 1, got {epoch}")
    return HEADER.pack(epoch, iteration, len(entries)) + encode_records(entries)


def decode_snapshot(buf: bytes) -> tuple[int, int, list[tuple[int, int]]]:
    if len(buf) < HEADER.size:
        raise ConfigError(f"snapshot buffer too short: {len(buf)} bytes")
    epoch, iteration, count = HEADER.unpack_from(buf, 0)
    need = HEADER.size + count * RECORD_SIZE
    if len(buf) < need:
        raise ConfigError(f"snapshot claims {count} entries, buffer has {len(buf)} bytes")
    entries = decode_records(buf[HEADER.size:need])
    return epoch, iteration, entries


class Checkpointer:
    """Per-rank checkpoint driver bound to one group incarnation.

    Rebuilt after every recovery (the ring follows the group); the driver
    carries `last_committed` and `committed_count` across incarnations.
    """

    def __init__(self, ctx: RankContext, group: Group, max_entries: int,
                 last_committed: int | None = None, committed_count: int = 0):
        group.position(ctx.rank)
        self.ctx = ctx
        self.group = group
        self.max_entries = max_entries
        self.target = mirror_target(ctx.rank, group)
        self.source = mirror_source(ctx.rank, group)
        self.last_committed = last_committed
        self.committed_count = committed_count
        self._outstanding: tuple[int, Token] | None = None

    @property
    def slot_bytes(self) -> int:
        return slot_size(self.max_entries)

    @property
    def outstanding_epoch(self) -> int | None:
        return self._outstanding[0] if self._outstanding is not None else None

    def start(self, epoch: int, iteration: int,
              entries: list[tuple[int, int]]) -> None:
        """Capture local state and launch the mirror transfer."""
        if self._outstanding is not None:
            raise SequenceError(
                f"epoch {self._outstanding[0]} is still started; commit it first")
        if len(entries) > self.max_entries:
            raise ConfigError(
                f"{len(entries)} entries exceed the slot capacity {self.max_entries}")
        payload = encode_snapshot(epoch, iteration, entries)
        off = slot_offset(epoch, self.max_entries)
        with self.ctx.phase(VtPhase.CKPT_START):
            self.ctx.charge(self.ctx.costs.payload_ticks(len(payload)))  # local copy
            self.ctx.write_local(SEG_LOCAL, off, payload)
            token = self.ctx.write_remote(self.target, SEG_MIRROR, off, payload)
        self._outstanding = (epoch, token)

    def commit(self, epoch: int, timeout: int = DEFAULT_TIMEOUT) -> BarrierStatus:
        """Wait for the mirror transfer, then agree globally on the epoch."""
        if self._outstanding is None:
            raise SequenceError(f"commit of epoch {epoch} without a start")
        started, token = self._outstanding
        if started != epoch:
            raise SequenceError(f"commit of epoch {epoch} but epoch {started} is started")
        self._outstanding = None
        with self.ctx.phase(VtPhase.CKPT_COMMIT):
            self.ctx.wait(token)   # FAILED only when the mirror died; the
            # barrier below stays responsible for surfacing that as TIMEOUT
            status = self.ctx.barrier(self.group, timeout, ("ckpt-commit", epoch))
        if status is BarrierStatus.OK:
            self.last_committed = epoch
            self.committed_count += 1
        return status

    def abandon(self) -> None:
        """Forget an outstanding start (used when recovery supersedes it)."""
        self._outstanding = None

    def fetch(self, epoch: int) -> tuple[int, list[tuple[int, int]]]:
        """Recover this position's payload for `epoch`.

        Reads the local slot first; a survivor always satisfies that.  A
        replacement rank holds nothing locally and falls back to the copy its
        ring target stores, which the left neighbor kept on behalf of the
        failed predecessor at the same position.
        """
        off = slot_offset(epoch, self.max_entries)
        buf = self.ctx.read_local(SEG_LOCAL, off, self.slot_bytes)
        got = self._try_decode(buf, epoch)
        if got is not None:
            return got
        try:
            buf = self.ctx.read_remote(self.target, SEG_MIRROR, off, self.slot_bytes)
        except PeerDead:
            raise UnrecoverableError(
                f"epoch {epoch}: local slot invalid and mirror holder "
                f"{self.target} is corrupt") from None
        got = self._try_decode(buf, epoch)
        if got is None:
            raise UnrecoverableError(
                f"epoch {epoch}: no valid copy on rank {self.ctx.rank} "
                f"or its mirror holder {self.target}")
        return got

    def adopt(self, epoch: int, iteration: int,
              entries: list[tuple[int, int]]) -> None:
        """Write a fetched payload into the local slot (heals a replacement)."""
        payload = encode_snapshot(epoch, iteration, entries)
        self.ctx.write_local(SEG_LOCAL, slot_offset(epoch, self.max_entries), payload)

    def _try_decode(self, buf: bytes,
                    epoch: int) -> tuple[int, list[tuple[int, int]]] | None:
        try:
            got_epoch, iteration, entries = decode_snapshot(buf)
        except ConfigError:
            return None
        if got_epoch != epoch:
            return None
        return iteration, entries
