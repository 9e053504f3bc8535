"""Fault-tolerant clustering driver over the simulated cluster.

Every rank runs the same program.  Compute positions iterate the chosen
decomposition; ranks beyond the active set park as spares and wait for a
wake or shutdown message.  Each iteration ends with a detection barrier; a
missing member turns it into a timeout, the state vector names the corrupt
ranks, and every survivor derives the identical recovery plan with no
further coordination: promote spares into the failed positions (ascending),
rebuild the group under a fresh generation, restore the last committed
snapshot (survivors from their local slot, replacements from the failed
rank's mirror holder), recompute centroids from the restored assignments,
and re-protect the restored state with a fresh checkpoint so the ring is
fully redundant again before normal iterations resume.

A failure before the first commit rolls back to the deterministic initial
state instead of a snapshot; that state needs no re-protection because it
is reconstructible from the run configuration alone.

Rendezvous discipline: collective tags carry the iteration or epoch they
belong to, detection barriers a per-generation round counter, and the group
generation separates the tag spaces of different incarnations, so a rank
can never meet a stale slot after recovery rewinds the iteration counter.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass

import numpy as np

from .checkpoint import (
    Checkpointer,
    CheckpointPolicy,
    CommitMode,
    mirror_target,
    segment_spec,
)
from .errors import ConfigError, PeerDead, Timeout, UnrecoverableError
from .kmeans import (
    AssignmentTable,
    CentroidSet,
    Dataset,
    KmeansConfig,
    init_centroids,
)
from .parallel import (
    Method,
    centers_compute,
    centers_recompute,
    decode_records,
    encode_records,
    merge_incoming,
    partition,
    samples_compute,
    samples_divide,
    samples_partials,
)
from .simcluster import (
    DEFAULT_TIMEOUT,
    BarrierStatus,
    ClusterHandle,
    CostModel,
    FailPhase,
    FailurePlan,
    Group,
    Health,
    Mode,
    RankContext,
    ReduceOp,
    VtPhase,
    spawn_world,
)


@dataclass(frozen=True)
class WorldLayout:
    """Compute positions plus an ordered pool of initially idle spares."""

    active: int
    spares: int = 0

    def __post_init__(self) -> None:
        if self.active < 2:
            raise ConfigError(f"need at least 2 active ranks, got {self.active}")
        if self.spares < 0:
            raise ConfigError(f"spares must be >= 0, got {self.spares}")

    @property
    def world_size(self) -> int:
        return self.active + self.spares

    @property
    def spare_ids(self) -> tuple[int, ...]:
        return tuple(range(self.active, self.active + self.spares))


@dataclass
class RecoveryEvent:
    """One rank's view of one recovery (the digest is its own restore)."""

    completed_iteration: int
    failed: tuple[int, ...]
    promoted: tuple[int, ...]
    epoch: int | None
    resumed_iteration: int
    position: int
    restored_digest: str | None


@dataclass
class RunOutcome:
    centroids: CentroidSet | None
    table: AssignmentTable | None
    iterations: int
    converged: bool
    recoveries: int
    epochs_committed: int
    reason: str
    ledger: dict[int, dict[VtPhase, int]]
    vt_total: dict[int, int]
    recovery_events: list[dict]
    captures: dict[int, list[tuple[int, int, str]]]   # position -> (epoch, it, digest)
    final_group: tuple[int, ...]
    wall_ms: float
    trace: list | None = None


def detect_failures(ctx: RankContext, group: Group, round_no: int,
                    timeout: int) -> tuple[int, ...]:
    """Barrier probe: OK means nobody is missing; a timeout names the dead."""
    with ctx.phase(VtPhase.DETECT):
        status = ctx.barrier(group, timeout, ("det", round_no))
        if status is BarrierStatus.OK:
            return ()
        sv = ctx.state_vector()
    return tuple(m for m in group.members if sv[m] is Health.CORRUPT)


def _digest(entries: list[tuple[int, int]], epoch: int, iteration: int) -> str:
    h = hashlib.sha256()
    h.update(epoch.to_bytes(8, "little"))
    h.update(iteration.to_bytes(8, "little"))
    h.update(encode_records(entries))
    return h.hexdigest()


class _CentersState:
    """Per-rank state of the center-split method."""

    def __init__(self, data: Dataset, cfg: KmeansConfig, procs: int):
        self.data = data
        self.cfg = cfg
        self.blocks = partition(cfg.k, procs)
        self.init_centers = init_centroids(data, cfg.k).centers.copy()
        self.centers = self.init_centers.copy()
        self.owned: dict[int, int] = {}
        self.position = 0

    def reset_initial(self, position: int) -> None:
        self.position = position
        self.centers = self.init_centers.copy()
        self.owned = {sid: 0 for sid in range(self.data.n)} if position == 0 else {}

    def capture_entries(self) -> list[tuple[int, int]]:
        return sorted(self.owned.items())

    def restore_entries(self, entries: list[tuple[int, int]], position: int) -> None:
        self.position = position
        self.owned = {sid: ctr for sid, ctr in entries}

    def run_pass(self, ctx: RankContext, group: Group, t: int,
                 skip_recompute_when_settled: bool) -> bool:
        members = group.members
        position = self.position
        with ctx.phase(VtPhase.COMPUTE):
            ctx.charge(ctx.costs.compute_per_sample * len(self.owned))
            out = centers_compute(self.data.values, self.centers, self.owned,
                                  self.blocks, position)
        with ctx.phase(VtPhase.COMM):
            for dst_pos in range(len(members)):
                if dst_pos == position:
                    continue
                records = out.outgoing.get(dst_pos, [])
                if records:
                    ctx.send(members[dst_pos], encode_records(records))
                ctx.send(members[dst_pos], b"")      # end of this batch
            batches = []
            for src_pos in range(len(members)):
                if src_pos == position:
                    continue
                batch: list[tuple[int, int]] = []
                while True:
                    chunk = ctx.recv(members[src_pos])
                    if chunk == b"":
                        break
                    batch.extend(decode_records(chunk))
                batches.append(batch)
            merged = merge_incoming(out.staying, batches)
            changed = ctx.reduce_all(group, out.changed, ReduceOp.OR, ("chg", t))
        self.owned = merged
        if not changed and skip_recompute_when_settled:
            return False
        self._recompute_and_share(ctx, group, ("cb", t))
        return bool(changed)

    def rebuild_centroids(self, ctx: RankContext, group: Group) -> None:
        """Post-restore: derive every center block from assignments, then share."""
        self.centers = self.init_centers.copy()
        self._recompute_and_share(ctx, group, ("rcb",),
                                  (VtPhase.RESTORE, VtPhase.RESTORE))

    def _recompute_and_share(self, ctx: RankContext, group: Group, tag: tuple,
                             phases=(VtPhase.COMPUTE, VtPhase.COMM)) -> None:
        with ctx.phase(phases[0]):
            lo, hi = self.blocks[self.position]
            mine = centers_recompute(self.data.values, self.owned, self.centers,
                                     (lo, hi))
            ctx.charge(ctx.costs.compute_per_sample * len(self.owned))
        with ctx.phase(phases[1]):
            new_centers = self.centers.copy()
            for pos in range(len(group.members)):
                blo, bhi = self.blocks[pos]
                if bhi == blo:
                    continue
                payload = mine if pos == self.position else None
                rows = ctx.broadcast(group, group.members[pos], payload, tag + (pos,))
                new_centers[blo:bhi] = rows
            self.centers = new_centers

    def local_fragment(self) -> list[tuple[int, int]]:
        return sorted(self.owned.items())


class _SamplesState:
    """Per-rank state of the sample-split method."""

    def __init__(self, data: Dataset, cfg: KmeansConfig, procs: int):
        self.data = data
        self.cfg = cfg
        self.blocks = partition(data.n, procs)
        self.init_centers = init_centroids(data, cfg.k).centers.copy()
        self.centers = self.init_centers.copy()
        self.assign = np.zeros(0, dtype=np.int64)
        self.position = 0

    def reset_initial(self, position: int) -> None:
        self.position = position
        lo, hi = self.blocks[position]
        self.centers = self.init_centers.copy()
        self.assign = np.zeros(hi - lo, dtype=np.int64)

    def capture_entries(self) -> list[tuple[int, int]]:
        lo, _ = self.blocks[self.position]
        return [(lo + i, int(ctr)) for i, ctr in enumerate(self.assign)]

    def restore_entries(self, entries: list[tuple[int, int]], position: int) -> None:
        self.position = position
        lo, hi = self.blocks[position]
        if [sid for sid, _ in entries] != list(range(lo, hi)):
            raise UnrecoverableError(
                f"snapshot does not cover block {lo}:{hi} of position {position}")
        self.assign = np.array([ctr for _, ctr in entries], dtype=np.int64)

    def run_pass(self, ctx: RankContext, group: Group, t: int,
                 skip_recompute_when_settled: bool) -> bool:
        lo, hi = self.blocks[self.position]
        block = self.data.values[lo:hi]
        with ctx.phase(VtPhase.COMPUTE):
            ctx.charge(ctx.costs.compute_per_sample * (hi - lo))
            new_assign, changed_local = samples_compute(block, self.centers,
                                                        self.assign)
        with ctx.phase(VtPhase.COMM):
            changed = ctx.reduce_all(group, changed_local, ReduceOp.OR, ("chg", t))
        self.assign = new_assign
        if not changed and skip_recompute_when_settled:
            return False
        self._reduce_and_divide(ctx, group, ("ms", t))
        return bool(changed)

    def rebuild_centroids(self, ctx: RankContext, group: Group) -> None:
        self.centers = self.init_centers.copy()
        self._reduce_and_divide(ctx, group, ("rcs",),
                                (VtPhase.RESTORE, VtPhase.RESTORE))

    def _reduce_and_divide(self, ctx: RankContext, group: Group, tag: tuple,
                           phases=(VtPhase.COMPUTE, VtPhase.COMM)) -> None:
        lo, hi = self.blocks[self.position]
        with ctx.phase(phases[0]):
            sums, counts = samples_partials(self.data.values[lo:hi], self.assign,
                                            self.cfg.k)
            ctx.charge(ctx.costs.compute_per_sample * (hi - lo))
        with ctx.phase(phases[1]):
            gsums = ctx.reduce_all(group, sums, ReduceOp.SUM, tag + ("s",))
            gcounts = ctx.reduce_all(group, counts, ReduceOp.SUM, tag + ("c",))
        if int(gcounts.sum()) != self.data.n:
            raise ConfigError(
                f"count conservation violated: {int(gcounts.sum())} != {self.data.n}")
        self.centers = samples_divide(gsums, gcounts, self.centers)

    def local_fragment(self) -> list[tuple[int, int]]:
        lo, _ = self.blocks[self.position]
        return [(lo + i, int(ctr)) for i, ctr in enumerate(self.assign)]


def _make_state(method: Method, data: Dataset, cfg: KmeansConfig, procs: int):
    if method is Method.CENTERS:
        return _CentersState(data, cfg, procs)
    return _SamplesState(data, cfg, procs)


class _ActiveDriver:
    """The per-rank control loop shared by originals and woken spares."""

    def __init__(self, ctx: RankContext, data: Dataset, cfg: KmeansConfig,
                 method: Method, policy: CheckpointPolicy, layout: WorldLayout,
                 timeout: int, force_iters: int | None):
        self.ctx = ctx
        self.data = data
        self.cfg = cfg
        self.policy = policy
        self.layout = layout
        self.timeout = timeout
        self.force_iters = force_iters
        self.cap = force_iters if force_iters is not None else cfg.max_iters

        self.group = Group(tuple(range(layout.active)))
        self.position = 0
        self.state = _make_state(method, data, cfg, layout.active)
        self.it = 0
        self.detect_round = 0
        self.consumed_spares = 0
        self.recoveries = 0
        self.events: list[RecoveryEvent] = []
        self.captures: list[tuple[int, int, str]] = []
        self.cp: Checkpointer | None = None      # built once membership is known
        self.converged = False
        self.reason = ""

    # -- bootstrap paths -----------------------------------------------

    def start_fresh(self) -> None:
        self.position = self.group.position(self.ctx.rank)
        self.cp = Checkpointer(self.ctx, self.group, self.data.n)
        self.state.reset_initial(self.position)

    def start_from_wake(self, msg: tuple) -> None:
        (_, members, generation, last_committed, committed_count,
         recoveries, consumed, events, completed, failed, promoted) = msg
        self.group = Group(tuple(members), generation)
        self.position = self.group.position(self.ctx.rank)
        self.recoveries = recoveries
        self.consumed_spares = consumed
        self.events = list(events)
        self.cp = Checkpointer(self.ctx, self.group, self.data.n,
                               last_committed=last_committed,
                               committed_count=committed_count)
        digest = self._restore(last_committed)
        self._reprotect()
        self.events.append(RecoveryEvent(
            completed_iteration=completed,
            failed=failed,
            promoted=promoted,
            epoch=last_committed,
            resumed_iteration=self.it,
            position=self.position,
            restored_digest=digest,
        ))

    # -- main loop -----------------------------------------------------

    def run(self) -> dict:
        while self.it < self.cap:
            t = self.it + 1
            self.ctx.failure_point(t, FailPhase.DURING_COMPUTE)
            try:
                changed = self.state.run_pass(
                    self.ctx, self.group, t,
                    skip_recompute_when_settled=(t > 1))
            except (Timeout, PeerDead):
                if not self._handle_comm_fault():
                    break
                continue
            self.it = t
            if not changed:
                self.converged = True
                if self.force_iters is None:
                    break
            self.ctx.failure_point(t, FailPhase.BEFORE_BARRIER)
            self.detect_round += 1
            failed = detect_failures(self.ctx, self.group, self.detect_round,
                                     self.timeout)
            if failed:
                if not self._recover_or_abort(failed):
                    break
                continue
            self.ctx.failure_point(t, FailPhase.DURING_CHECKPOINT, 0)
            if t % self.policy.interval == 0:
                if not self._checkpoint_step(t):
                    break
        if self.converged or self.it >= self.cap:
            self._final_commit_if_lazy()
        self._shutdown_parked()
        return self._result()

    # -- checkpointing ---------------------------------------------------

    def _checkpoint_step(self, t: int) -> bool:
        """False means abort; a recovery inside the step still returns True."""
        cp = self.cp
        if self.policy.mode is CommitMode.EAGER:
            epoch = (cp.last_committed or 0) + 1
            self._capture(epoch, t)
            self.ctx.failure_point(t, FailPhase.DURING_CHECKPOINT, 1)
            status = cp.commit(epoch, self.timeout)
            self.ctx.failure_point(t, FailPhase.DURING_CHECKPOINT, 2)
            if status is BarrierStatus.TIMEOUT:
                return self._recover_after_ckpt_timeout()
            return True
        # lazy: settle the previous epoch first, then capture the new one
        if cp.outstanding_epoch is not None:
            status = cp.commit(cp.outstanding_epoch, self.timeout)
            if status is BarrierStatus.TIMEOUT:
                return self._recover_after_ckpt_timeout()
        self.ctx.failure_point(t, FailPhase.DURING_CHECKPOINT, 1)
        self._capture((cp.last_committed or 0) + 1, t)
        self.ctx.failure_point(t, FailPhase.DURING_CHECKPOINT, 2)
        return True

    def _capture(self, epoch: int, iteration: int) -> None:
        entries = self.state.capture_entries()
        self.cp.start(epoch, iteration, entries)
        self.captures.append((epoch, iteration, _digest(entries, epoch, iteration)))

    def _final_commit_if_lazy(self) -> None:
        if self.policy.mode is not CommitMode.LAZY:
            return
        epoch = self.cp.outstanding_epoch
        if epoch is None:
            return
        if self.cp.commit(epoch, self.timeout) is BarrierStatus.TIMEOUT:
            self.cp.abandon()    # the result is already final; drop the epoch

    # -- failure handling ------------------------------------------------

    def _handle_comm_fault(self) -> bool:
        """A pass aborted mid-communication; identify the dead and recover."""
        self.cp.abandon()
        self.detect_round += 1
        failed = detect_failures(self.ctx, self.group, self.detect_round,
                                 self.timeout)
        if not failed:
            self.reason = "communication fault without a detectable failure"
            return False
        return self._recover_or_abort(failed)

    def _recover_after_ckpt_timeout(self) -> bool:
        self.detect_round += 1
        failed = detect_failures(self.ctx, self.group, self.detect_round,
                                 self.timeout)
        if not failed:
            self.reason = "commit timeout without a detectable failure"
            return False
        return self._recover_or_abort(failed)

    def _recover_or_abort(self, failed: tuple[int, ...]) -> bool:
        self.cp.abandon()
        try:
            self._recover(failed)
            return True
        except UnrecoverableError as exc:
            self.reason = str(exc)
            self.converged = False
            return False

    def _recover(self, failed: tuple[int, ...]) -> None:
        failed = tuple(sorted(failed))
        pool = self.layout.spare_ids[self.consumed_spares:]
        if len(pool) < len(failed):
            raise UnrecoverableError(
                f"need {len(failed)} spares for {failed} but only {len(pool)} left")
        last = self.cp.last_committed
        if last is not None:
            for dead in failed:
                holder = mirror_target(dead, self.group)
                if holder in failed:
                    raise UnrecoverableError(
                        f"rank {dead} and its mirror holder {holder} both failed")
        promoted = tuple(pool[:len(failed)])
        members = list(self.group.members)
        for dead, spare in zip(failed, promoted):
            members[self.group.position(dead)] = spare
        new_group = Group(tuple(members), self.group.generation + 1)

        self.ctx.purge_incoming()
        self.consumed_spares += len(failed)
        self.recoveries += len(failed)
        completed = self.it

        survivors = [m for m in self.group.members if m not in failed]
        coordinator = min(survivors, key=self.group.position)
        if self.ctx.rank == coordinator:
            for spare in promoted:
                self.ctx.send(spare, (
                    "wake", tuple(members), new_group.generation,
                    self.cp.last_committed, self.cp.committed_count,
                    self.recoveries, self.consumed_spares, tuple(self.events),
                    completed, failed, promoted))

        self.group = new_group
        self.position = new_group.position(self.ctx.rank)
        self.detect_round = 0
        self.cp = Checkpointer(self.ctx, new_group, self.data.n,
                               last_committed=self.cp.last_committed,
                               committed_count=self.cp.committed_count)
        digest = self._restore(last)
        self._reprotect()
        self.events.append(RecoveryEvent(
            completed_iteration=completed,
            failed=failed,
            promoted=promoted,
            epoch=last,
            resumed_iteration=self.it,
            position=self.position,
            restored_digest=digest,
        ))

    def _restore(self, epoch: int | None) -> str | None:
        with self.ctx.phase(VtPhase.RESTORE):
            if epoch is None:
                # nothing committed yet: back to the seed state, which wants
                # no rebuild (its centroids are given, not derived)
                self.state.reset_initial(self.position)
                self.it = 0
                return None
            iteration, entries = self.cp.fetch(epoch)
            self.cp.adopt(epoch, iteration, entries)
            self.state.restore_entries(entries, self.position)
            self.it = iteration
            self.state.rebuild_centroids(self.ctx, self.group)
        return _digest(entries, epoch, iteration)

    def _reprotect(self) -> None:
        """Fresh checkpoint of the restored state heals ring redundancy."""
        if self.cp.last_committed is None:
            return    # rolled back to the initial state; nothing stored to protect
        epoch = self.cp.last_committed + 1
        self._capture(epoch, self.it)
        if self.cp.commit(epoch, self.timeout) is BarrierStatus.TIMEOUT:
            raise UnrecoverableError("failure during recovery re-protection")

    # -- termination -------------------------------------------------------

    def _shutdown_parked(self) -> None:
        sv = self.ctx.state_vector()
        alive = [m for m in self.group.members if sv[m] is Health.HEALTHY]
        if not alive or self.ctx.rank != min(alive, key=self.group.position):
            return
        for spare in self.layout.spare_ids[self.consumed_spares:]:
            try:
                self.ctx.send(spare, ("shutdown",))
            except PeerDead:
                pass

    def _result(self) -> dict:
        return {
            "role": "active",
            "position": self.position,
            "members": self.group.members,
            "generation": self.group.generation,
            "centers": self.state.centers.copy(),
            "fragment": self.state.local_fragment(),
            "iterations": self.it,
            "converged": self.converged,
            "recoveries": self.recoveries,
            "epochs_committed": self.cp.committed_count,
            "last_committed": self.cp.last_committed,
            "events": list(self.events),
            "captures": list(self.captures),
            "reason": self.reason,
        }


def _spare_program(ctx: RankContext, driver: _ActiveDriver) -> dict:
    while True:
        try:
            with ctx.phase(VtPhase.COMM):     # parked time is waiting, not work
                _, msg = ctx.recv_any()
        except (Timeout, PeerDead):
            # every active rank is gone without a shutdown; nothing to do
            return {"role": "spare", "state": "orphaned"}
        if not isinstance(msg, tuple) or not msg:
            continue
        if msg[0] == "shutdown":
            return {"role": "spare", "state": "parked"}
        if msg[0] == "wake":
            driver.start_from_wake(msg)
            return driver.run()


def run_ft_kmeans(data: Dataset, cfg: KmeansConfig, method: Method,
                  policy: CheckpointPolicy, layout: WorldLayout,
                  plan: FailurePlan | None = None,
                  mode: Mode = Mode.DETERMINISTIC, seed: int = 0,
                  timeout: int = DEFAULT_TIMEOUT,
                  costs: CostModel | None = None,
                  force_iters: int | None = None,
                  record_trace: bool = False,
                  wall_guard: float = 300.0) -> RunOutcome:
    """Run the chosen decomposition under failures with checkpoint/restart."""
    started = time.perf_counter()
    world = spawn_world(layout.world_size, plan=plan, costs=costs, mode=mode,
                        seed=seed, record_trace=record_trace,
                        segments=segment_spec(data.n), wall_guard=wall_guard)

    def program(ctx: RankContext):
        driver = _ActiveDriver(ctx, data, cfg, method, policy, layout,
                               timeout, force_iters)
        if ctx.rank < layout.active:
            driver.start_fresh()
            return driver.run()
        return _spare_program(ctx, driver)

    results = world.run({r: program for r in range(layout.world_size)})
    outcome = _assemble(world, results, data, cfg, started)
    if record_trace:
        outcome.trace = list(world.trace)
    return outcome


def _assemble(world: ClusterHandle, results: dict, data: Dataset,
              cfg: KmeansConfig, started: float) -> RunOutcome:
    finals = [res.value for res in results.values()
              if res.status == "done" and isinstance(res.value, dict)
              and res.value.get("role") == "active"]
    if not finals:
        raise ConfigError("no active rank finished; nothing to report")
    ref = min(finals, key=lambda v: v["position"])
    members = ref["members"]
    if any(v["members"] != members for v in finals):
        raise ConfigError("surviving ranks disagree on the final group")
    by_position = {v["position"]: v for v in finals}

    for key in ("iterations", "converged", "recoveries", "epochs_committed",
                "reason", "generation"):
        vals = {repr(v[key]) for v in finals}
        if len(vals) != 1:
            raise ConfigError(f"ranks disagree on {key}: {sorted(vals)}")

    centroids = None
    table = None
    if not ref["reason"]:
        assign = np.full(data.n, -1, dtype=np.int64)
        for v in finals:
            for sid, ctr in v["fragment"]:
                assign[sid] = ctr
        if np.any(assign < 0):
            raise ConfigError("assignment fragments do not cover the dataset")
        counts = np.bincount(assign, minlength=cfg.k).astype(np.int64)
        table = AssignmentTable(assign=assign, changed=not ref["converged"],
                                counts=counts)
        table.validate(cfg.k)
        centroids = CentroidSet(ref["centers"])

    merged_events = []
    for i in range(len(ref["events"])):
        base: RecoveryEvent = ref["events"][i]
        digests: dict[int, str] = {}
        for v in finals:
            if i < len(v["events"]):
                ev: RecoveryEvent = v["events"][i]
                if ev.restored_digest is not None:
                    digests[ev.position] = ev.restored_digest
        merged_events.append({
            "completed_iteration": base.completed_iteration,
            "failed": base.failed,
            "promoted": base.promoted,
            "epoch": base.epoch,
            "resumed_iteration": base.resumed_iteration,
            "digests": digests,
        })

    return RunOutcome(
        centroids=centroids,
        table=table,
        iterations=ref["iterations"],
        converged=ref["converged"],
        recoveries=ref["recoveries"],
        epochs_committed=ref["epochs_committed"],
        reason=ref["reason"],
        ledger={r: world.ledger(r) for r in range(world.world_size)},
        vt_total={r: world.vt(r) for r in range(world.world_size)},
        recovery_events=merged_events,
        captures={pos: list(v["captures"]) for pos, v in by_position.items()},
        final_group=members,
        wall_ms=(time.perf_counter() - started) * 1000.0,
    )
