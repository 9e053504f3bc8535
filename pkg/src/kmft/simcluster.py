"""Simulated multi-rank cluster: segments, messages, collectives, failures.

Rank programs are plain blocking Python callables.  Each rank runs in its own
thread; what differs between the two modes is who gets to run:

* DETERMINISTIC - a baton scheduler lets exactly one rank thread run at a
  time.  Every cluster operation yields one scheduling slot, slots rotate in
  a seeded round-robin order, and blocked ranks are re-checked at every
  handoff.  Two runs with the same seed replay the identical event order.
* CONCURRENT - rank threads run freely and synchronize on one shared
  condition variable.  A wall-clock guard converts a stuck run into
  SimDeadlock instead of a hang.

Time is virtual: every rank owns an integer tick clock, operations charge
costs from a CostModel, and synchronizing operations pull a rank's clock up
to the completion instant.  Every tick charged is also attributed to the
rank's current accounting phase, so per-phase ledgers always sum to the
rank's total virtual time.

Failure model is crash-stop.  A FailurePlan names (rank, iteration, phase)
instants; when the rank's program reaches that point its context is killed,
its state flips to CORRUPT forever, and it never communicates again.  A
barrier whose group contains a corrupt member that has not arrived resolves
to TIMEOUT at every surviving caller; nobody is left blocked.

One-sided writes land with all-or-nothing visibility: the payload becomes
visible at the destination when the writer waits on the completion token, or
lazily once the destination's own clock passes the transfer's ready time.
A reader never observes a torn payload.
"""

from __future__ import annotations

import contextlib
import enum
import random
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    PeerDead,
    SegmentError,
    SimDeadlock,
    Timeout,
)


class Health(enum.Enum):
    HEALTHY = "healthy"
    CORRUPT = "corrupt"


class Mode(enum.Enum):
    DETERMINISTIC = "det"
    CONCURRENT = "conc"


class FailPhase(enum.Enum):
    BEFORE_BARRIER = "barrier"
    DURING_COMPUTE = "compute"
    DURING_CHECKPOINT = "ckpt"


class VtPhase(enum.Enum):
    COMPUTE = "compute"
    COMM = "comm"
    CKPT_START = "ckpt_start"
    CKPT_COMMIT = "ckpt_commit"
    DETECT = "detect"
    RESTORE = "restore"


class ReduceOp(enum.Enum):
    SUM = "sum"
    OR = "or"
    MIN = "min"


class BarrierStatus(enum.Enum):
    OK = "ok"
    TIMEOUT = "timeout"


class TokenState(enum.Enum):
    PENDING = "pending"
    DELIVERED = "delivered"
    FAILED = "failed"


@dataclass(frozen=True)
class FailureEvent:
    """Kill `rank` when its program reaches (iteration, phase, substep)."""

    rank: int
    iteration: int
    phase: FailPhase
    substep: int = 0


class FailurePlan:
    """A set of planned kills, at most one per rank."""

    def __init__(self, events: list[FailureEvent] | tuple[FailureEvent, ...] = ()):
        self.events = tuple(events)
        seen: set[int] = set()
        for ev in self.events:
            if ev.iteration < 1:
                raise ConfigError(f"kill iteration must be >= 1, got {ev.iteration}")
            if ev.rank in seen:
                raise ConfigError(f"more than one kill for rank {ev.rank}")
            seen.add(ev.rank)

    def validate(self, world_size: int) -> None:
        for ev in self.events:
            if not 0 <= ev.rank < world_size:
                raise ConfigError(f"kill targets rank {ev.rank}, world has {world_size}")

    def match(self, rank: int, iteration: int, phase: FailPhase, substep: int) -> bool:
        for ev in self.events:
            if (ev.rank, ev.iteration, ev.phase, ev.substep) == (rank, iteration, phase, substep):
                return True
        return False

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class Group:
    """An ordered set of ranks plus a generation counter.

    Positions are the stable identity across recoveries: a replacement rank
    takes over the failed rank's position, and the generation increments.
    """

    members: tuple[int, ...]
    generation: int = 0

    def __post_init__(self) -> None:
        if len(self.members) < 1:
            raise ConfigError("group must have at least one member")
        if len(set(self.members)) != len(self.members):
            raise ConfigError(f"duplicate members in group {self.members}")

    @property
    def size(self) -> int:
        return len(self.members)

    def position(self, rank: int) -> int:
        try:
            return self.members.index(rank)
        except ValueError:
            raise ConfigError(f"rank {rank} is not in group {self.members}") from None


@dataclass(frozen=True)
class CostModel:
    """Integer tick costs for simulated operations."""

    compute_per_sample: int = 1
    send: int = 2
    recv: int = 2
    msg_latency: int = 10
    barrier: int = 20
    collective_base: int = 20
    rdma_base: int = 10
    bytes_per_tick: int = 64      # payload ticks = nbytes // bytes_per_tick
    state_query: int = 1

    def payload_ticks(self, nbytes: int) -> int:
        return nbytes // self.bytes_per_tick

    def transfer_ticks(self, nbytes: int) -> int:
        return self.rdma_base + self.payload_ticks(nbytes)


DEFAULT_TIMEOUT = 1000


class _Killed(Exception):
    """Internal control-flow signal: this rank was killed by the plan."""


@dataclass
class _Transfer:
    seq: int
    src: int
    dst: int
    seg: int
    offset: int
    payload: bytes
    ready_at: int
    delivered: bool = False


class Token:
    """Completion handle for one one-sided write."""

    def __init__(self, transfer: _Transfer):
        self._transfer = transfer
        self.state = TokenState.PENDING


@dataclass
class _Collective:
    kind: str
    members: tuple[int, ...]
    root: int | None = None
    deposits: dict[int, int] = field(default_factory=dict)   # rank -> arrival vt
    values: dict[int, object] = field(default_factory=dict)
    result: object = None
    combined: bool = False


class _RankFlag(enum.Enum):
    READY = 0
    RUNNING = 1
    BLOCKED = 2
    DONE = 3


class _DetScheduler:
    """Baton passing: one runnable rank at a time, seeded rotation order."""

    def __init__(self, order: list[int]):
        self._order = list(order)
        self._lock = threading.Lock()
        self._events = {r: threading.Event() for r in order}
        self._state = {r: _RankFlag.READY for r in order}
        self._preds: dict[int, object] = {}
        self._ptr = 0
        self._poison: BaseException | None = None
        self._done = threading.Event()

    def _runnable(self, rank: int) -> bool:
        st = self._state[rank]
        if st is _RankFlag.READY:
            return True
        if st is _RankFlag.BLOCKED:
            return bool(self._preds[rank]())
        return False

    def _handoff(self) -> None:
        n = len(self._order)
        for i in range(n):
            idx = (self._ptr + i) % n
            rank = self._order[idx]
            if self._runnable(rank):
                self._ptr = (idx + 1) % n
                self._state[rank] = _RankFlag.RUNNING
                self._preds.pop(rank, None)
                self._events[rank].set()
                return
        if all(s is _RankFlag.DONE for s in self._state.values()):
            self._done.set()
            return
        blocked = sorted(r for r, s in self._state.items() if s is _RankFlag.BLOCKED)
        self._poison = SimDeadlock(f"no runnable rank; blocked: {blocked}")
        for r, s in self._state.items():
            if s is not _RankFlag.DONE:
                self._events[r].set()
        self._done.set()

    def _pause(self, rank: int) -> None:
        ev = self._events[rank]
        ev.wait()
        ev.clear()
        if self._poison is not None:
            raise self._poison

    def enter(self, rank: int) -> None:
        """First call from a rank thread: wait until granted the baton."""
        self._pause(rank)

    def launch(self) -> None:
        with self._lock:
            self._handoff()

    def yield_slot(self, rank: int) -> None:
        with self._lock:
            self._state[rank] = _RankFlag.READY
            self._handoff()
        self._pause(rank)

    def block_until(self, rank: int, pred) -> None:
        with self._lock:
            if pred():
                self._state[rank] = _RankFlag.RUNNING
                return
            self._state[rank] = _RankFlag.BLOCKED
            self._preds[rank] = pred
            self._handoff()
        self._pause(rank)

    def finish(self, rank: int) -> None:
        with self._lock:
            self._state[rank] = _RankFlag.DONE
            self._handoff()

    def join(self, wall_timeout: float) -> None:
        if not self._done.wait(wall_timeout):
            with self._lock:
                self._poison = SimDeadlock("wall-clock guard expired")
                for r, s in self._state.items():
                    if s is not _RankFlag.DONE:
                        self._events[r].set()
            raise self._poison
        if self._poison is not None:
            raise self._poison


class _ConcScheduler:
    """Free-running threads; blocking waits on one shared condition."""

    def __init__(self, cv: threading.Condition, wall_guard: float):
        self._cv = cv
        self._guard = wall_guard

    def enter(self, rank: int) -> None:
        pass

    def launch(self) -> None:
        pass

    def yield_slot(self, rank: int) -> None:
        pass

    def block_until(self, rank: int, pred) -> None:
        with self._cv:
            if not self._cv.wait_for(pred, timeout=self._guard):
                raise SimDeadlock(f"rank {rank} blocked past the wall-clock guard")

    def finish(self, rank: int) -> None:
        with self._cv:
            self._cv.notify_all()

    def join(self, wall_timeout: float) -> None:
        pass


@dataclass
class RankResult:
    status: str                 # "done" | "killed" | "error"
    value: object = None
    error: BaseException | None = None


class RankContext:
    """Per-rank handle a program uses for every cluster interaction."""

    def __init__(self, world: "ClusterHandle", rank: int):
        self._world = world
        self.rank = rank
        self._vt_phase = VtPhase.COMPUTE

    @property
    def world_size(self) -> int:
        return self._world.world_size

    @property
    def costs(self) -> CostModel:
        return self._world.costs

    @property
    def vt(self) -> int:
        """This rank's current virtual clock, in ticks."""
        return self._world._vt[self.rank]

    @contextlib.contextmanager
    def phase(self, p: VtPhase):
        prev = self._vt_phase
        self._vt_phase = p
        try:
            yield
        finally:
            self._vt_phase = prev

    # -- local work ------------------------------------------------------

    def charge(self, ticks: int) -> None:
        """Account `ticks` of local work to the current phase."""
        self._world._op_charge(self.rank, ticks, self._vt_phase)

    def advance(self, ticks: int) -> None:
        """Let `ticks` of idle time pass, delivering anything now due."""
        self._world._op_advance(self.rank, ticks, self._vt_phase)

    def failure_point(self, iteration: int, phase: FailPhase, substep: int = 0) -> None:
        self._world._op_failure_point(self.rank, iteration, phase, substep, self._vt_phase)

    # -- segments --------------------------------------------------------

    def alloc_segment(self, seg: int, size: int) -> None:
        self._world._op_alloc_segment(self.rank, seg, size)

    def write_local(self, seg: int, offset: int, payload: bytes) -> None:
        self._world._op_write_local(self.rank, seg, offset, payload)

    def read_local(self, seg: int, offset: int, size: int) -> bytes:
        return self._world._op_read_local(self.rank, seg, offset, size, self._vt_phase)

    def write_remote(self, dst: int, seg: int, offset: int, payload: bytes) -> Token:
        return self._world._op_write_remote(self.rank, dst, seg, offset, payload, self._vt_phase)

    def wait(self, token: Token) -> TokenState:
        return self._world._op_wait_token(self.rank, token, self._vt_phase)

    def read_remote(self, owner: int, seg: int, offset: int, size: int) -> bytes:
        return self._world._op_read_remote(self.rank, owner, seg, offset, size, self._vt_phase)

    # -- messages --------------------------------------------------------

    def send(self, dst: int, payload: object) -> None:
        self._world._op_send(self.rank, dst, payload, self._vt_phase)

    def recv(self, src: int) -> object:
        return self._world._op_recv(self.rank, src, self._vt_phase)

    def recv_any(self) -> tuple[int, object]:
        return self._world._op_recv_any(self.rank, self._vt_phase)

    def purge_incoming(self) -> None:
        self._world._op_purge_incoming(self.rank)

    # -- collectives -----------------------------------------------------

    def barrier(self, group: Group, timeout: int, tag: object) -> BarrierStatus:
        return self._world._op_barrier(self.rank, group, timeout, tag, self._vt_phase)

    def reduce_all(self, group: Group, value: object, op: ReduceOp, tag: object) -> object:
        return self._world._op_reduce(self.rank, group, value, op, tag, self._vt_phase)

    def broadcast(self, group: Group, root: int, payload: object, tag: object) -> object:
        return self._world._op_broadcast(self.rank, group, root, payload, tag, self._vt_phase)

    def state_vector(self) -> dict[int, Health]:
        return self._world._op_state_vector(self.rank, self._vt_phase)


def _share(value: object) -> object:
    """Copy mutable payloads handed across ranks; leave immutables alone."""
    if isinstance(value, np.ndarray):
        return value.copy()
    if isinstance(value, bytearray):
        return bytes(value)
    return value


class ClusterHandle:
    """A spawned world of ranks plus its transport state."""

    def __init__(self, world_size: int, plan: FailurePlan | None = None,
                 costs: CostModel | None = None, mode: Mode = Mode.DETERMINISTIC,
                 seed: int = 0, record_trace: bool = False,
                 segments: dict[int, int] | None = None,
                 wall_guard: float = 120.0):
        if world_size < 1:
            raise ConfigError(f"world_size must be >= 1, got {world_size}")
        plan = plan or FailurePlan()
        plan.validate(world_size)
        self.world_size = world_size
        self.plan = plan
        self.costs = costs or CostModel()
        self.mode = mode
        self.seed = seed
        self.record_trace = record_trace
        self.trace: list[tuple] = []
        self._wall_guard = wall_guard

        self._cv = threading.Condition(threading.RLock())
        self._health = {r: Health.HEALTHY for r in range(world_size)}
        self._finished = {r: False for r in range(world_size)}
        self._vt = {r: 0 for r in range(world_size)}
        self._ledger = {r: {p: 0 for p in VtPhase} for r in range(world_size)}
        self._channels: dict[tuple[int, int], list[tuple[object, int]]] = {}
        self._segments: dict[tuple[int, int], bytearray] = {}
        self._pending: list[_Transfer] = []
        self._collectives: dict[tuple, _Collective] = {}
        self._xfer_seq = 0
        self._results: dict[int, RankResult] = {}
        self._ctxs = {r: RankContext(self, r) for r in range(world_size)}

        order = list(range(world_size))
        random.Random(seed).shuffle(order)
        self.schedule_order = order
        if mode is Mode.DETERMINISTIC:
            self._sched: _DetScheduler | _ConcScheduler = _DetScheduler(order)
        else:
            self._sched = _ConcScheduler(self._cv, wall_guard)

        for seg, size in (segments or {}).items():
            for r in range(world_size):
                self._segments[(r, seg)] = bytearray(size)

    # -- running programs --------------------------------------------------

    def run(self, programs: dict[int, object], raise_errors: bool = True) -> dict[int, RankResult]:
        """Execute one program per rank; returns a result for every rank."""
        if sorted(programs) != list(range(self.world_size)):
            raise ConfigError("need exactly one program per rank")
        threads = []
        for rank in range(self.world_size):
            t = threading.Thread(target=self._thread_body, args=(rank, programs[rank]),
                                 name=f"rank-{rank}", daemon=True)
            threads.append(t)
            t.start()
        self._sched.launch()
        if isinstance(self._sched, _DetScheduler):
            self._sched.join(self._wall_guard)
        for t in threads:
            t.join(self._wall_guard)
            if t.is_alive():
                raise SimDeadlock(f"{t.name} still running past the wall-clock guard")
        if raise_errors:
            for rank in range(self.world_size):
                res = self._results.get(rank)
                if res is not None and res.status == "error":
                    raise res.error
        return dict(self._results)

    def _thread_body(self, rank: int, fn) -> None:
        self._sched.enter(rank)
        try:
            value = fn(self._ctxs[rank])
            self._results[rank] = RankResult("done", value=value)
        except _Killed:
            self._results[rank] = RankResult("killed")
        except BaseException as exc:  # noqa: BLE001 - reported via RankResult
            self._results[rank] = RankResult("error", error=exc)
        finally:
            with self._cv:
                self._finished[rank] = True
                self._cv.notify_all()
            self._sched.finish(rank)

    # -- inspection (tests, reporting) --------------------------------------

    def state_vector(self) -> dict[int, Health]:
        return dict(self._health)

    def vt(self, rank: int) -> int:
        return self._vt[rank]

    def ledger(self, rank: int) -> dict[VtPhase, int]:
        return dict(self._ledger[rank])

    def segment_bytes(self, rank: int, seg: int) -> bytes:
        self._settle_segment(rank, seg)
        return bytes(self._segment(rank, seg))

    # -- internals -----------------------------------------------------------

    def _trace_event(self, *entry: object) -> None:
        if self.record_trace:
            self.trace.append(entry)

    def _segment(self, rank: int, seg: int) -> bytearray:
        try:
            return self._segments[(rank, seg)]
        except KeyError:
            raise SegmentError(f"rank {rank} has no segment {seg}") from None

    def _charge(self, rank: int, ticks: int, phase: VtPhase) -> None:
        if ticks < 0:
            raise ConfigError("cannot charge negative ticks")
        self._vt[rank] += ticks
        self._ledger[rank][phase] += ticks

    def _sync_to(self, rank: int, instant: int, phase: VtPhase) -> None:
        if instant > self._vt[rank]:
            self._charge(rank, instant - self._vt[rank], phase)

    def _settle_segment(self, owner: int, seg: int) -> None:
        """Apply pending transfers whose ready time the owner's clock passed."""
        if not self._alive(owner):
            return
        now = self._vt[owner]
        for xf in self._pending:
            if xf.dst == owner and xf.seg == seg and not xf.delivered and xf.ready_at <= now:
                self._deliver(xf)

    def _deliver(self, xf: _Transfer) -> None:
        buf = self._segment(xf.dst, xf.seg)
        buf[xf.offset:xf.offset + len(xf.payload)] = xf.payload
        xf.delivered = True
        self._trace_event("deliver", xf.src, xf.dst, xf.seg, xf.offset, len(xf.payload))

    def _alive(self, rank: int) -> bool:
        return self._health[rank] is Health.HEALTHY

    # -- operations (called via RankContext) ---------------------------------

    def _op_charge(self, rank: int, ticks: int, phase: VtPhase) -> None:
        self._sched.yield_slot(rank)
        with self._cv:
            self._charge(rank, ticks, phase)
            self._cv.notify_all()

    def _op_advance(self, rank: int, ticks: int, phase: VtPhase) -> None:
        self._sched.yield_slot(rank)
        with self._cv:
            self._charge(rank, ticks, phase)
            for (owner, seg) in list(self._segments):
                if owner == rank:
                    self._settle_segment(rank, seg)
            self._cv.notify_all()

    def _op_failure_point(self, rank: int, iteration: int, phase: FailPhase,
                          substep: int, vt_phase: VtPhase) -> None:
        self._sched.yield_slot(rank)
        if not self.plan.match(rank, iteration, phase, substep):
            return
        with self._cv:
            self._health[rank] = Health.CORRUPT
            self._trace_event("kill", rank, iteration, phase.value, substep, self._vt[rank])
            self._cv.notify_all()
        raise _Killed()

    def _op_alloc_segment(self, rank: int, seg: int, size: int) -> None:
        self._sched.yield_slot(rank)
        with self._cv:
            if (rank, seg) in self._segments:
                raise SegmentError(f"rank {rank} segment {seg} already allocated")
            if size < 1:
                raise SegmentError(f"segment size must be >= 1, got {size}")
            self._segments[(rank, seg)] = bytearray(size)

    def _check_bounds(self, rank: int, seg: int, offset: int, length: int) -> None:
        buf = self._segment(rank, seg)
        if offset < 0 or length < 0 or offset + length > len(buf):
            raise SegmentError(
                f"access [{offset}, {offset + length}) outside segment {seg} "
                f"of rank {rank} (size {len(buf)})")

    def _op_write_local(self, rank: int, seg: int, offset: int, payload: bytes) -> None:
        self._sched.yield_slot(rank)
        with self._cv:
            self._check_bounds(rank, seg, offset, len(payload))
            self._settle_segment(rank, seg)
            buf = self._segment(rank, seg)
            buf[offset:offset + len(payload)] = payload

    def _op_read_local(self, rank: int, seg: int, offset: int, size: int,
                       phase: VtPhase) -> bytes:
        self._sched.yield_slot(rank)
        with self._cv:
            self._check_bounds(rank, seg, offset, size)
            self._settle_segment(rank, seg)
            buf = self._segment(rank, seg)
            return bytes(buf[offset:offset + size])

    def _op_write_remote(self, rank: int, dst: int, seg: int, offset: int,
                         payload: bytes, phase: VtPhase) -> Token:
        self._sched.yield_slot(rank)
        with self._cv:
            if not 0 <= dst < self.world_size:
                raise ConfigError(f"no such rank {dst}")
            self._check_bounds(dst, seg, offset, len(payload))
            self._charge(rank, self.costs.rdma_base, phase)
            self._xfer_seq += 1
            xf = _Transfer(self._xfer_seq, rank, dst, seg, offset, bytes(payload),
                           ready_at=self._vt[rank] + self.costs.transfer_ticks(len(payload)))
            self._pending.append(xf)
            self._trace_event("rdma", rank, dst, seg, offset, len(payload))
            self._cv.notify_all()
            return Token(xf)

    def _op_wait_token(self, rank: int, token: Token, phase: VtPhase) -> TokenState:
        self._sched.yield_slot(rank)
        with self._cv:
            if token.state is not TokenState.PENDING:
                return token.state
            xf = token._transfer
            if not self._alive(xf.dst):
                token.state = TokenState.FAILED
                self._trace_event("token", rank, "failed", xf.dst)
                return token.state
            # earlier writes to the same region land first, preserving order
            for other in self._pending:
                if (other.dst, other.seg) == (xf.dst, xf.seg) and \
                        other.seq <= xf.seq and not other.delivered:
                    self._deliver(other)
            self._sync_to(rank, xf.ready_at, phase)
            token.state = TokenState.DELIVERED
            self._trace_event("token", rank, "delivered", xf.dst)
            self._cv.notify_all()
            return token.state

    def _op_read_remote(self, rank: int, owner: int, seg: int, offset: int,
                        size: int, phase: VtPhase) -> bytes:
        self._sched.yield_slot(rank)
        with self._cv:
            if not self._alive(owner):
                raise PeerDead(f"rank {owner} is corrupt; its segments are unreadable")
            self._check_bounds(owner, seg, offset, size)
            self._settle_segment(owner, seg)
            self._charge(rank, self.costs.transfer_ticks(size), phase)
            buf = self._segment(owner, seg)
            self._trace_event("read", rank, owner, seg, offset, size)
            return bytes(buf[offset:offset + size])

    def _op_send(self, rank: int, dst: int, payload: object, phase: VtPhase) -> None:
        self._sched.yield_slot(rank)
        with self._cv:
            if not 0 <= dst < self.world_size:
                raise ConfigError(f"no such rank {dst}")
            self._charge(rank, self.costs.send, phase)
            if not self._alive(dst):
                raise PeerDead(f"send to corrupt rank {dst}")
            arrival = self._vt[rank] + self.costs.msg_latency
            self._channels.setdefault((rank, dst), []).append((_share(payload), arrival))
            self._trace_event("send", rank, dst)
            self._cv.notify_all()

    def _op_recv(self, rank: int, src: int, phase: VtPhase) -> object:
        self._sched.yield_slot(rank)

        def ready() -> bool:
            if self._channels.get((src, rank)):
                return True
            return not self._alive(src) or self._finished[src]

        self._sched.block_until(rank, ready)
        with self._cv:
            queue = self._channels.get((src, rank))
            if queue:
                payload, arrival = queue.pop(0)
                self._sync_to(rank, arrival, phase)
                self._charge(rank, self.costs.recv, phase)
                self._trace_event("recv", rank, src)
                return payload
            if not self._alive(src):
                raise PeerDead(f"recv from corrupt rank {src}")
            raise Timeout(f"rank {src} finished without sending")

    def _op_recv_any(self, rank: int, phase: VtPhase) -> tuple[int, object]:
        self._sched.yield_slot(rank)

        def ready() -> bool:
            for src in range(self.world_size):
                if self._channels.get((src, rank)):
                    return True
            return all(not self._alive(s) or self._finished[s]
                       for s in range(self.world_size) if s != rank)

        self._sched.block_until(rank, ready)
        with self._cv:
            for src in range(self.world_size):
                queue = self._channels.get((src, rank))
                if queue:
                    payload, arrival = queue.pop(0)
                    self._sync_to(rank, arrival, phase)
                    self._charge(rank, self.costs.recv, phase)
                    self._trace_event("recv", rank, src)
                    return src, payload
            raise Timeout("every peer is corrupt or finished")

    def _op_purge_incoming(self, rank: int) -> None:
        self._sched.yield_slot(rank)
        with self._cv:
            for key in list(self._channels):
                if key[1] == rank:
                    self._channels[key] = []

    def _coll_slot(self, key: tuple, kind: str, members: tuple[int, ...],
                   root: int | None = None) -> _Collective:
        coll = self._collectives.get(key)
        if coll is None:
            coll = _Collective(kind, members, root=root)
            self._collectives[key] = coll
        elif coll.kind != kind or coll.members != members or coll.root != root:
            raise ConfigError(f"collective tag {key} reused with different shape")
        return coll

    def _op_barrier(self, rank: int, group: Group, timeout: int, tag: object,
                    phase: VtPhase) -> BarrierStatus:
        self._sched.yield_slot(rank)
        key = (group.generation, "bar", tag)
        with self._cv:
            group.position(rank)  # membership check
            coll = self._coll_slot(key, "bar", group.members)
            coll.deposits[rank] = self._vt[rank]
            self._trace_event("bar", rank, key)
            self._cv.notify_all()

        def ready() -> bool:
            if len(coll.deposits) == len(coll.members):
                return True
            return any(self._health[m] is Health.CORRUPT and m not in coll.deposits
                       for m in coll.members)

        self._sched.block_until(rank, ready)
        with self._cv:
            if len(coll.deposits) == len(coll.members):
                done = max(coll.deposits.values()) + self.costs.barrier
                self._sync_to(rank, done, phase)
                self._trace_event("bar-ok", rank, key)
                return BarrierStatus.OK
            self._sync_to(rank, coll.deposits[rank] + timeout, phase)
            self._trace_event("bar-timeout", rank, key)
            return BarrierStatus.TIMEOUT

    def _op_reduce(self, rank: int, group: Group, value: object, op: ReduceOp,
                   tag: object, phase: VtPhase) -> object:
        self._sched.yield_slot(rank)
        key = (group.generation, "red", op.value, tag)
        with self._cv:
            group.position(rank)
            coll = self._coll_slot(key, "red", group.members)
            coll.deposits[rank] = self._vt[rank]
            coll.values[rank] = _share(value)
            self._trace_event("red", rank, key)
            self._cv.notify_all()

        def ready() -> bool:
            if len(coll.deposits) == len(coll.members):
                return True
            return any(self._health[m] is Health.CORRUPT and m not in coll.deposits
                       for m in coll.members)

        self._sched.block_until(rank, ready)
        with self._cv:
            if len(coll.deposits) != len(coll.members):
                self._sync_to(rank, coll.deposits[rank] + DEFAULT_TIMEOUT, phase)
                raise Timeout(f"reduce {tag}: a group member died before contributing")
            if not coll.combined:
                coll.result = _combine(op, [coll.values[m] for m in sorted(coll.members)])
                coll.combined = True
            done = max(coll.deposits.values()) + self.costs.collective_base
            self._sync_to(rank, done, phase)
            return _share(coll.result)

    def _op_broadcast(self, rank: int, group: Group, root: int, payload: object,
                      tag: object, phase: VtPhase) -> object:
        self._sched.yield_slot(rank)
        key = (group.generation, "bcast", tag)
        with self._cv:
            group.position(rank)
            group.position(root)
            coll = self._coll_slot(key, "bcast", group.members, root=root)
            if rank == root:
                coll.values[root] = _share(payload)
                coll.deposits[root] = self._vt[rank]
                self._cv.notify_all()
            self._trace_event("bcast", rank, key)

        def ready() -> bool:
            return root in coll.deposits or self._health[root] is Health.CORRUPT

        self._sched.block_until(rank, ready)
        with self._cv:
            if root not in coll.deposits:
                self._sync_to(rank, self._vt[rank] + DEFAULT_TIMEOUT, phase)
                raise Timeout(f"broadcast {tag}: root {root} died before sending")
            size = _payload_nbytes(coll.values[root])
            done = coll.deposits[root] + self.costs.collective_base + self.costs.payload_ticks(size)
            self._sync_to(rank, done, phase)
            return _share(coll.values[root])

    def _op_state_vector(self, rank: int, phase: VtPhase) -> dict[int, Health]:
        self._sched.yield_slot(rank)
        with self._cv:
            self._charge(rank, self.costs.state_query, phase)
            self._trace_event("sv", rank)
            return dict(self._health)


def _payload_nbytes(value: object) -> int:
    if isinstance(value, (bytes, bytearray)):
        return len(value)
    if isinstance(value, np.ndarray):
        return value.nbytes
    return 8


def _combine(op: ReduceOp, values: list[object]) -> object:
    if op is ReduceOp.OR:
        acc = False
        for v in values:
            acc = acc or bool(v)
        return acc
    if op is ReduceOp.MIN:
        acc = values[0]
        for v in values[1:]:
            if v < acc:
                acc = v
        return acc
    acc = values[0]
    if isinstance(acc, np.ndarray):
        acc = acc.copy()
    for v in values[1:]:
        acc = acc + v
    return acc


def spawn_world(world_size: int, plan: FailurePlan | None = None,
                costs: CostModel | None = None, mode: Mode = Mode.DETERMINISTIC,
                seed: int = 0, record_trace: bool = False,
                segments: dict[int, int] | None = None,
                wall_guard: float = 120.0) -> ClusterHandle:
    """Create a world of `world_size` ranks, all HEALTHY, clocks at zero."""
    return ClusterHandle(world_size, plan=plan, costs=costs, mode=mode, seed=seed,
                         record_trace=record_trace, segments=segments,
                         wall_guard=wall_guard)
