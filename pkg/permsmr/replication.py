"""
Replication plane.

The leader side runs Propose over the fabric: confirmed followers, catch-up, follower update,
prepare and accept, with the omit-prepare and growing-followers extensions. Every replica also
runs a replayer that advances its FUO from its own log and applies committed entries.
"""

from __future__ import annotations

import itertools
import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Generator, Iterable

import simpy

from .background import recycle_logs
from .consensus_log import U64, Entry
from .fabric import Op, RegionKind, Status, WorkCompletion
from .kv import ClientOp

if TYPE_CHECKING:
    from .replica import Replica

logger = logging.getLogger(__name__)


class AbortReason(str, Enum):
    PERMISSION_LOST = "PermissionLost"
    STALE_PROPOSAL = "StaleProposal"
    FOLLOWER_CRASHED = "FollowerCrashed"
    LOG_FULL = "LogFull"
    NOT_LEADER = "NotLeader"


class ProposeAborted(Exception):
    """Propose could not finish this attempt."""
    def __init__(self, reason: AbortReason, message: str = ""):
        self.reason = reason
        self.message = message or reason.value
        super().__init__(self.message)


_STATUS_REASON = {
    Status.PERMISSION_DENIED: AbortReason.PERMISSION_LOST,
    Status.TARGET_CRASHED: AbortReason.FOLLOWER_CRASHED,
}


@dataclass
class ProposeOutcome:
    committed: bool
    index: int | None = None
    reason: AbortReason | None = None

    @classmethod
    def committed_at(cls, index: int) -> ProposeOutcome:
        return cls(True, index)

    @classmethod
    def aborted(cls, reason: AbortReason) -> ProposeOutcome:
        return cls(False, reason=reason)

    def to_dict(self) -> dict:
        return {
            "result": "committed" if self.committed else "aborted",
            "index": self.index,
            "reason": self.reason.value if self.reason else None,
        }


@dataclass
class LeaderState:
    """Leader-side bookkeeping of one replica."""
    id: int
    n: int
    confirmed: set[int] = field(default_factory=set)
    prop_num: int = 0
    omit_prepare: bool = False
    my_fuo: int = 0
    my_value: bytes | None = None
    max_seen: int = 0
    needs_confirm: bool = True

    # Last known FUO and recycledBelow per replica
    follower_fuo: dict[int, int] = field(default_factory=dict)
    recycled: dict[int, int] = field(default_factory=dict)
    flushed_fuo: int = 0
    last_recycle: int = 0

    @property
    def majority(self) -> int:
        return self.n // 2 + 1

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "confirmed": sorted(self.confirmed),
            "prop_num": self.prop_num,
            "omit_prepare": self.omit_prepare,
            "my_fuo": self.my_fuo,
            "max_seen": self.max_seen,
        }


def pick_proposal_number(state: LeaderState, min_proposals: Iterable[int] = ()) -> int:
    """Smallest n > everything seen with n ≡ id (mod N)."""
    seen = max([state.max_seen, state.prop_num, *min_proposals])
    state.max_seen = seen
    candidate = (seen // state.n) * state.n + state.id
    while candidate <= seen or candidate <= 0:
        candidate += state.n
    return candidate


Steps = Generator[simpy.Event, object, object]


class ReplicationEngine:
    """Propose, the leader driver loop and the replayer of one replica."""

    def __init__(self, replica: Replica):
        self.r = replica
        self.settings = replica.settings
        self.fabric = replica.fabric
        self.layout = replica.layout
        self.bg_layout = replica.bg_layout
        self.state = LeaderState(replica.id, replica.settings.n)
        self.queue: deque[ClientOp] = deque()
        self.outstanding: set[int] = set()
        self.outcomes: list[ProposeOutcome] = []
        self._calls = itertools.count(1)
        self._driver = None
        self._idle: simpy.Event | None = None

    @property
    def id(self) -> int:
        return self.r.id

    def start(self) -> None:
        self.r.spawn("replayer", self._replay_loop())
        if self.r.is_leader:
            self.on_role_change()

    def on_role_change(self) -> None:
        if self.r.is_leader:
            self.state.needs_confirm = True
            self.state.omit_prepare = False
            if self._driver is None or self._driver.done:
                self._driver = self.r.spawn("leader", self._drive())
        else:
            self.queue.clear()
            self.r.bounce_waiting()

    def enqueue(self, op: ClientOp) -> None:
        if all(queued.op_id != op.op_id for queued in self.queue):
            self.queue.append(op)

    # ── fabric helpers ───────────────────────────────────────

    def _write(self, target: int, offset: int, data: bytes, tag: str) -> int:
        rid = self.fabric.post_write(self.id, target, RegionKind.LOG, offset, data, tag=tag)
        self.outstanding.add(rid)
        return rid

    def _read(self, target: int, offset: int, length: int, tag: str) -> int:
        rid = self.fabric.post_read(self.id, target, RegionKind.LOG, offset, length, tag=tag)
        self.outstanding.add(rid)
        return rid

    def _write_local_fuo(self, fuo: int) -> None:
        self.fabric.local_write(self.id, RegionKind.LOG, self.layout.fuo_offset, U64.pack(fuo), tag=f"fuo:{fuo}")

    def forget(self, request_id: int) -> None:
        self.outstanding.discard(request_id)
        if not self.outstanding and self._idle is not None and not self._idle.triggered:
            self._idle.succeed()

    def _detach(self, ids: set[int]) -> None:
        if ids:
            self.r.detach(ids, self.on_detached)

    def on_detached(self, wc: WorkCompletion) -> None:
        """Completion that arrived after its phase moved on."""
        if wc.ok or wc.region is not RegionKind.LOG:
            return
        st = self.state
        if wc.target not in st.confirmed:
            return
        if wc.target == self.id:
            st.needs_confirm = True
            return
        st.confirmed.discard(wc.target)
        self.fabric.local_write(self.id, RegionKind.BACKGROUND, self.bg_layout.ack_offset(wc.target), b"\x00")
        logger.info("t=%d leader %d dropped follower %d (%s)", self.r.now, self.id, wc.target, wc.status.value)
        if len(st.confirmed) < st.majority:
            st.needs_confirm = True

    def _await_groups(self, groups: dict[int, list[int]], need: int, require: int | None = None) -> Steps:
        """
        Wait until ``need`` targets (and ``require``, if given) have all their requests done.

        Any failure seen before that aborts; requests still in flight are detached.
        """
        if len(groups) < need:
            raise ProposeAborted(AbortReason.FOLLOWER_CRASHED, f"{len(groups)} targets for a quorum of {need}")
        pending = {rid: target for target, ids in groups.items() for rid in ids}
        remaining = {target: set(ids) for target, ids in groups.items()}
        results: dict[int, list[WorkCompletion]] = defaultdict(list)
        done: set[int] = set()
        while len(done) < need or (require in groups and require not in done):
            wc = yield from self.r.next_completion(pending)
            target = pending.pop(wc.request_id)
            if not wc.ok:
                self._detach(set(pending))
                raise ProposeAborted(_STATUS_REASON[wc.status], f"{wc.op.value} on {target}: {wc.status.value}")
            results[target].append(wc)
            remaining[target].discard(wc.request_id)
            if not remaining[target]:
                done.add(target)
        self._detach(set(pending))
        return {target: results[target] for target in done}

    def _gather(self, groups: dict[int, list[int]]) -> Steps:
        """Wait for every request; failures are returned, not raised."""
        pending = {rid: target for target, ids in groups.items() for rid in ids}
        results: dict[int, list[WorkCompletion]] = defaultdict(list)
        while pending:
            wc = yield from self.r.next_completion(pending)
            results[pending.pop(wc.request_id)].append(wc)
        return results

    def _drain(self) -> Steps:
        """Wait until every replication request this replica posted has completed."""
        if self.outstanding:
            self._idle = self.r.env.event()
            yield self._idle

    def _phase(self, call: int, name: str) -> None:
        self.r.trace.record(self.r.now, self.id, "phase", call=call, name=name)

    def _check_room(self, target: int, index: int) -> None:
        """A slot may be written only inside the target's recycled window."""
        recycled = self.state.recycled.get(target, 0)
        if index >= recycled + self.layout.capacity - 1:
            raise ProposeAborted(AbortReason.LOG_FULL, f"index {index} on {target} past window of {recycled}")

    def _acked(self) -> set[int]:
        base = self.bg_layout.ack_offset(0)
        raw = self.fabric.local_read(self.id, RegionKind.BACKGROUND, base, self.settings.n)
        return {g for g, byte in enumerate(raw) if byte}

    # ── Propose ──────────────────────────────────────────────

    def build_confirmed_followers(self, call: int) -> Steps:
        st = self.state
        n = self.settings.n
        self._phase(call, "confirm")
        self.fabric.local_write(self.id, RegionKind.BACKGROUND, self.bg_layout.ack_offset(0), bytes(n))
        ids = set()
        for q in range(n):
            if q in self.fabric.crashed:
                continue
            ids.add(self.fabric.post_write(
                self.id, q, RegionKind.BACKGROUND, self.bg_layout.request_offset(self.id), b"\x01",
                tag="request", request_permission=True,
            ))
        self.r.detach(ids, _ignore)

        majority_at = None
        while True:
            if not self.r.is_leader:
                raise ProposeAborted(AbortReason.NOT_LEADER)
            acked = self._acked()
            if self.id in acked and len(acked) >= st.majority:
                if majority_at is None:
                    majority_at = self.r.now
                if len(acked) == n or self.r.now - majority_at >= self.settings.grace_window:
                    break
            yield self.r.sleep(self.settings.t_ack_poll)

        st.confirmed = acked
        st.needs_confirm = False
        st.omit_prepare = False
        self.r.trace.record(self.r.now, self.id, "confirmed", call=call, followers=",".join(map(str, sorted(acked))))
        logger.info("t=%d leader %d confirmed followers %s", self.r.now, self.id, sorted(acked))

    def leader_catch_up(self, call: int) -> Steps:
        st = self.state
        self._phase(call, "catch_up")
        st.my_fuo = self.r.log.fuo
        st.recycled[self.id] = self.r.log.recycled_below
        followers = sorted(st.confirmed - {self.id})
        groups = {}
        for p in followers:
            groups[p] = [
                self._read(p, self.layout.fuo_offset, 8, tag="fuo"),
                self.fabric.post_read(self.id, p, RegionKind.BACKGROUND, self.bg_layout.recycled_offset, 8, tag="recycled"),
            ]
        results = (yield from self._await_groups(groups, len(groups))) if groups else {}
        for p, wcs in results.items():
            for wc in wcs:
                value = U64.unpack(wc.payload)[0]
                if wc.region is RegionKind.LOG:
                    st.follower_fuo[p] = value
                else:
                    st.recycled[p] = value

        if not followers:
            return
        source = max(followers, key=lambda p: (st.follower_fuo[p], -p))
        target_fuo = st.follower_fuo[source]
        if target_fuo <= st.my_fuo:
            return
        self._check_room(self.id, target_fuo - 1)
        reads = {}
        for first, count, offset in self.layout.spans(st.my_fuo, target_fuo):
            reads[(first, count, offset)] = self._read(source, offset, count * self.layout.slot_width, tag=f"slots:{first}:{first + count}")
        fetched = yield from self._await_groups({source: list(reads.values())}, 1)
        by_id = {wc.request_id: wc.payload for wc in fetched[source]}
        writes = []
        for (first, count, offset), rid in reads.items():
            data = by_id[rid]
            if any(entry is None for entry in self.layout.decode_run(data)):
                logger.warning("t=%d leader %d copied an empty slot in [%d, %d)", self.r.now, self.id, first, first + count)
            writes.append(self._write(self.id, offset, data, tag=f"slots:{first}:{first + count}"))
        yield from self._await_groups({self.id: writes}, 1)
        st.my_fuo = target_fuo
        self._write_local_fuo(target_fuo)

    def update_followers(self, call: int, members: Iterable[int] | None = None) -> Steps:
        st = self.state
        self._phase(call, "update")
        members = sorted((st.confirmed if members is None else set(members)) - {self.id})
        groups: dict[int, list[int]] = {}
        for p in members:
            behind = st.follower_fuo.get(p, 0)
            if behind >= st.my_fuo:
                continue
            self._check_room(p, st.my_fuo - 1)
            ids = []
            for first, count, offset in self.layout.spans(behind, st.my_fuo):
                data = self.fabric.local_read(self.id, RegionKind.LOG, offset, count * self.layout.slot_width)
                ids.append(self._write(p, offset, data, tag=f"slots:{first}:{first + count}"))
            ids.append(self._write(p, self.layout.fuo_offset, U64.pack(st.my_fuo), tag=f"fuo:{st.my_fuo}"))
            groups[p] = ids
        if groups:
            yield from self._await_groups(groups, len(groups))
        for p in groups:
            st.follower_fuo[p] = st.my_fuo

    def grow_confirmed_followers(self, call: int) -> Steps:
        st = self.state
        fresh = self._acked() - st.confirmed
        if not fresh:
            return set()
        self._phase(call, "grow")
        groups = {}
        for p in sorted(fresh):
            groups[p] = [
                self._read(p, self.layout.fuo_offset, 8, tag="fuo"),
                self.fabric.post_read(self.id, p, RegionKind.BACKGROUND, self.bg_layout.recycled_offset, 8, tag="recycled"),
            ]
        results = yield from self._gather(groups)
        reachable = set()
        for p, wcs in results.items():
            if all(wc.ok for wc in wcs):
                reachable.add(p)
                for wc in wcs:
                    value = U64.unpack(wc.payload)[0]
                    if wc.region is RegionKind.LOG:
                        st.follower_fuo[p] = value
                    else:
                        st.recycled[p] = value
        added = set()
        for p in sorted(reachable):
            if self.settings.update_followers:
                try:
                    yield from self.update_followers(call, [p])
                except ProposeAborted as e:
                    logger.debug("t=%d could not bring %d up to date: %s", self.r.now, p, e.message)
                    continue
            added.add(p)
        if added:
            st.confirmed |= added
            st.omit_prepare = False
            logger.info("t=%d leader %d grew confirmed followers by %s", self.r.now, self.id, sorted(added))
        return added

    def prepare_phase(self, call: int, value: bytes) -> Steps:
        st = self.state
        self._phase(call, "prepare")
        index = st.my_fuo
        for p in st.confirmed:
            self._check_room(p, index)
        targets = sorted(st.confirmed)

        groups = {p: [self._read(p, self.layout.min_proposal_offset, 8, tag="minprop")] for p in targets}
        results = yield from self._await_groups(groups, st.majority)
        seen = [U64.unpack(wcs[0].payload)[0] for wcs in results.values()]
        st.prop_num = pick_proposal_number(st, seen)
        if any(m > st.prop_num for m in seen):
            raise ProposeAborted(AbortReason.STALE_PROPOSAL)

        offset, width = self.layout.slot_span(index)
        groups = {
            p: [
                self._write(p, self.layout.min_proposal_offset, U64.pack(st.prop_num), tag=f"minprop:{st.prop_num}"),
                self._read(p, offset, width, tag=f"slot:{index}"),
            ]
            for p in targets
        }
        results = yield from self._await_groups(groups, st.majority)
        entries: list[Entry] = []
        for wcs in results.values():
            for wc in wcs:
                if wc.op is Op.READ:
                    entry = self.layout.decode_slot(wc.payload)
                    if entry is not None:
                        entries.append(entry)
        if not entries:
            st.omit_prepare = self.settings.omit_prepare
            return value
        return max(entries, key=lambda e: e.proposal).value

    def accept_phase(self, call: int, value: bytes) -> Steps:
        st = self.state
        self._phase(call, "accept")
        index = st.my_fuo
        for p in st.confirmed:
            self._check_room(p, index)
        image = self.layout.encode_slot(st.prop_num, value)
        offset, _ = self.layout.slot_span(index)
        groups = {p: [self._write(p, offset, image, tag=f"slot:{index}")] for p in sorted(st.confirmed)}
        yield from self._await_groups(groups, st.majority, require=self.id)
        st.my_fuo = index + 1
        self._write_local_fuo(st.my_fuo)
        return index

    def establish(self, call: int) -> Steps:
        """Takeover: confirm followers, catch up, bring followers up to date."""
        yield from self.build_confirmed_followers(call)
        yield from self.leader_catch_up(call)
        if self.settings.update_followers:
            yield from self.update_followers(call)

    def propose(self, value: bytes) -> Steps:
        st = self.state
        call = next(self._calls)
        st.my_value = value
        self.r.trace.record(self.r.now, self.id, "propose_begin", call=call, value=value)
        try:
            if st.needs_confirm:
                yield from self.establish(call)
            else:
                yield from self.grow_confirmed_followers(call)
            while True:
                if st.omit_prepare:
                    adopted = value
                else:
                    adopted = yield from self.prepare_phase(call, value)
                index = yield from self.accept_phase(call, adopted)
                if adopted == value:
                    break
            outcome = ProposeOutcome.committed_at(index)
        except ProposeAborted as e:
            outcome = ProposeOutcome.aborted(e.reason)
            self._on_abort(e)
            yield from self._drain()
        self.r.trace.record(
            self.r.now, self.id, "propose_end",
            call=call, result="committed" if outcome.committed else "aborted",
            index=outcome.index, reason=outcome.reason.value if outcome.reason else "",
        )
        self.outcomes.append(outcome)
        return outcome

    def _on_abort(self, e: ProposeAborted) -> None:
        st = self.state
        st.omit_prepare = False
        if e.reason is not AbortReason.LOG_FULL:
            st.needs_confirm = True
        logger.debug("t=%d replica %d propose aborted: %s", self.r.now, self.id, e.message)

    # ── leader loop ──────────────────────────────────────────

    def _drive(self) -> Steps:
        st = self.state
        s = self.settings
        idle_since = self.r.now
        while self.r.is_leader:
            if self.queue:
                op = self.queue[0]
                cached = self.r.app.results.get(op.op_id)
                if cached is not None:
                    self.queue.popleft()
                    self.r.waiting_clients.pop(op.op_id, None)
                    if self.r.clients is not None:
                        self.r.clients.respond(self.id, op.op_id, cached)
                    continue
                outcome = yield from self.propose(op.payload)
                idle_since = self.r.now
                if outcome.committed:
                    if self.queue and self.queue[0] is op:
                        self.queue.popleft()
                elif outcome.reason is AbortReason.LOG_FULL and s.recycling:
                    if not (yield from self.recycle_logs()):
                        yield self.r.sleep(s.t_ack_poll)
                else:
                    yield self.r.sleep(s.t_ack_poll)
                continue
            if st.needs_confirm:
                try:
                    yield from self.establish(0)
                except ProposeAborted as e:
                    self._on_abort(e)
                    yield from self._drain()
                    yield self.r.sleep(s.t_ack_poll)
                continue
            if s.recycling and self.r.now - st.last_recycle >= s.t_recycle:
                yield from self.recycle_logs()
                continue
            if st.my_fuo > st.flushed_fuo and self.r.now - idle_since >= s.t_flush:
                self.flush_commits()
            yield self.r.sleep(1)
        self.queue.clear()

    def flush_commits(self) -> None:
        """Idle leader: push its FUO to followers so the last entry commits everywhere."""
        st = self.state
        ids = set()
        for p in sorted(st.confirmed - {self.id}):
            ids.add(self._write(p, self.layout.fuo_offset, U64.pack(st.my_fuo), tag=f"fuo:{st.my_fuo}"))
            st.follower_fuo[p] = max(st.follower_fuo.get(p, 0), st.my_fuo)
        self._detach(ids)
        st.flushed_fuo = st.my_fuo

    # ── recycling ────────────────────────────────────────────

    def recycle_logs(self) -> Steps:
        return (yield from recycle_logs(self))

    # ── replayer ─────────────────────────────────────────────

    def _replay_loop(self) -> Steps:
        while True:
            yield self.r.sleep(self.settings.t_replay)
            self.replayer_step()

    def advance_fuo(self) -> int:
        """Follower rule: while slots FUO and FUO+1 are both filled, FUO += 1."""
        log = self.r.log
        fuo = start = log.fuo
        end = log.window_end
        while fuo + 1 < end and log.slot(fuo) is not None and log.slot(fuo + 1) is not None:
            fuo += 1
        if fuo != start:
            self._write_local_fuo(fuo)
        return fuo

    def replayer_step(self) -> list[tuple[int, bytes]]:
        if not self.r.is_leader:
            self.advance_fuo()
        return self.r.apply_committed()


def _ignore(wc: WorkCompletion) -> None:
    return None


__all__ = [
    "AbortReason",
    "LeaderState",
    "ProposeAborted",
    "ProposeOutcome",
    "ReplicationEngine",
    "pick_proposal_number",
]
