"""
Background plane: heartbeat pull-score election, permission worker, log recycling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import TYPE_CHECKING

from .config import Settings
from .consensus_log import U64
from .fabric import PermissionAction, RegionKind, WorkCompletion

if TYPE_CHECKING:
    from .replica import Replica
    from .replication import ReplicationEngine, Steps

logger = logging.getLogger(__name__)


class PeerStatus(str, Enum):
    ALIVE = "alive"
    SUSPECTED = "suspected"


@dataclass(frozen=True)
class ScoreEntry:
    """Pull-score state one replica keeps about one peer."""
    peer: int
    score: int = 15
    last_counter: int | None = None
    status: PeerStatus = PeerStatus.ALIVE

    @property
    def alive(self) -> bool:
        return self.status is PeerStatus.ALIVE

    def to_dict(self) -> dict:
        return {
            "peer": self.peer,
            "score": self.score,
            "last_counter": self.last_counter,
            "status": self.status.value,
        }


def update_score(entry: ScoreEntry, counter_read: int | None, settings: Settings) -> ScoreEntry:
    """
    Apply one heartbeat read to a score entry.

    A changed counter raises the score, anything else (same value, failed read) lowers it.
    Status only flips below the failure threshold or above the recovery threshold.
    """
    s = settings
    changed = counter_read is not None and counter_read != entry.last_counter
    if changed:
        score = min(s.score_max, entry.score + 1)
    else:
        score = max(s.score_min, entry.score - 1)
    status = entry.status
    if score < s.fail_threshold:
        status = PeerStatus.SUSPECTED
    elif score > s.recover_threshold:
        status = PeerStatus.ALIVE
    last = counter_read if counter_read is not None else entry.last_counter
    return replace(entry, score=score, last_counter=last, status=status)


class BackgroundPlane:
    """Heartbeat, election scan and permission worker of one replica."""

    def __init__(self, replica: Replica):
        self.r = replica
        self.settings = replica.settings
        self.fabric = replica.fabric
        self.layout = replica.bg_layout
        self.scores: dict[int, ScoreEntry] = {
            peer: ScoreEntry(peer, score=self.settings.initial_score)
            for peer in range(self.settings.n)
            if peer != replica.id
        }
        self._reading: set[int] = set()
        self.served: list[tuple[int, int]] = []

    def start(self) -> None:
        self.r.spawn("heartbeat", self._heartbeat_loop())
        self.r.spawn("election", self._election_loop())
        self.r.spawn("permissions", self._permission_loop())

    # ── heartbeat and election ───────────────────────────────

    @property
    def counter(self) -> int:
        raw = self.fabric.local_read(self.r.id, RegionKind.BACKGROUND, self.layout.heartbeat_offset, 8)
        return U64.unpack(raw)[0]

    def heartbeat_tick(self) -> int:
        value = self.counter + 1
        self.fabric.local_write(self.r.id, RegionKind.BACKGROUND, self.layout.heartbeat_offset, U64.pack(value))
        return value

    def _heartbeat_loop(self) -> Steps:
        while True:
            yield self.r.sleep(self.settings.t_hb)
            self.heartbeat_tick()

    def _election_loop(self) -> Steps:
        while True:
            yield self.r.sleep(self.settings.t_scan)
            self.election_scan()

    def current_leader(self) -> int:
        alive = [peer for peer, entry in self.scores.items() if entry.alive]
        return min([self.r.id, *alive])

    def election_scan(self) -> int:
        """
        Post one heartbeat read to every peer without a read in flight.

        Scores change as the reads complete; a peer whose previous read is still outstanding
        is skipped, so network delay alone never lowers a score.
        """
        for peer in sorted(self.scores):
            if peer in self._reading:
                continue
            rid = self.fabric.post_read(
                self.r.id, peer, RegionKind.BACKGROUND, self.layout.heartbeat_offset, 8, tag="heartbeat",
            )
            self._reading.add(peer)
            self.r.detach({rid}, self._on_heartbeat)
        return self.current_leader()

    def _on_heartbeat(self, wc: WorkCompletion) -> None:
        self._reading.discard(wc.target)
        counter = U64.unpack(wc.payload)[0] if wc.ok else None
        before = self.scores[wc.target]
        after = update_score(before, counter, self.settings)
        self.scores[wc.target] = after
        if before.alive and not after.alive:
            self.r.trace.record(self.r.now, self.r.id, "suspect", peer=wc.target)
            logger.info("t=%d replica %d suspects %d", self.r.now, self.r.id, wc.target)
        elif not before.alive and after.alive:
            self.r.trace.record(self.r.now, self.r.id, "trust", peer=wc.target)
            logger.info("t=%d replica %d trusts %d again", self.r.now, self.r.id, wc.target)
        self.r.set_leader(self.current_leader())

    # ── permission worker ────────────────────────────────────

    def pending_requests(self) -> list[int]:
        raw = self.fabric.local_read(self.r.id, RegionKind.BACKGROUND, self.layout.request_offset(0), self.settings.n)
        return [q for q, byte in enumerate(raw) if byte]

    def _permission_loop(self) -> Steps:
        while True:
            yield self.r.sleep(self.settings.t_perm_poll)
            yield from self.permission_worker_step()

    def permission_worker_step(self) -> Steps:
        """Serve the lowest-id pending requester: revoke, grant, ack."""
        pending = self.pending_requests()
        if not pending:
            return []
        q = pending[0]
        me = self.r.id
        self.fabric.local_write(me, RegionKind.BACKGROUND, self.layout.request_offset(q), b"\x00")

        revoked = self.fabric.set_write_permission(me, PermissionAction.revoke())
        yield self.r.await_permission(revoked.change_id)
        granted = self.fabric.set_write_permission(me, PermissionAction.grant(q))
        if not granted.ok:
            return []
        yield self.r.await_permission(granted.change_id)

        rid = self.fabric.post_write(me, q, RegionKind.BACKGROUND, self.layout.ack_offset(me), b"\x01", tag="ack")
        self.r.detach({rid}, _ack_done)
        self.served.append((q, rid))
        return [(q, rid)]

    def to_dict(self) -> dict:
        return {
            "leader": self.current_leader(),
            "counter": self.counter,
            "scores": [entry.to_dict() for entry in self.scores.values()],
        }


def _ack_done(wc: WorkCompletion) -> None:
    if not wc.ok:
        logger.debug("ack to %d not delivered: %s", wc.target, wc.status.value)


def recycle_logs(engine: ReplicationEngine) -> Steps:
    """
    Zero log slots every replica has already applied.

    Reads logHead and recycledBelow of all replicas; minHead is their minimum. Each confirmed
    follower p gets [max(recycledBelow(p), minHead - capacity + 1), minHead) zeroed and then
    recycledBelow(p) = minHead. Any failed read skips the round. Returns the zeroed range per
    replica.
    """
    st = engine.state
    r = engine.r
    layout = engine.layout
    bg = engine.bg_layout
    st.last_recycle = r.now
    groups = {
        q: [engine.fabric.post_read(r.id, q, RegionKind.BACKGROUND, bg.log_head_offset, 16, tag="heads")]
        for q in range(engine.settings.n)
        if q != r.id
    }
    results = yield from engine._gather(groups)
    heads = {r.id: r.log.log_head}
    recycled = {r.id: r.log.recycled_below}
    for q, wcs in results.items():
        if not wcs[0].ok:
            logger.debug("t=%d recycling skipped: replica %d unreachable", r.now, q)
            return {}
        heads[q] = U64.unpack_from(wcs[0].payload, 0)[0]
        recycled[q] = U64.unpack_from(wcs[0].payload, 8)[0]
    for q, value in recycled.items():
        st.recycled[q] = max(st.recycled.get(q, 0), value)
    min_head = min(heads.values())

    zero_groups: dict[int, list[int]] = {}
    ranges: dict[int, tuple[int, int]] = {}
    for p in sorted(st.confirmed):
        below = st.recycled.get(p, 0)
        if below >= min_head:
            continue
        lo = max(below, min_head - layout.capacity + 1)
        # canaries first, lowest index first; the queue pair keeps them ahead of the bodies
        zero_groups[p] = [
            engine._write(p, layout.canary_offset(index), b"\x00", tag=f"zero:{index}:{index + 1}")
            for index in range(lo, min_head)
        ] + [
            engine._write(p, offset, bytes(count * layout.slot_width), tag=f"zero:{first}:{first + count}")
            for first, count, offset in layout.spans(lo, min_head)
        ]
        ranges[p] = (lo, min_head)
    if not zero_groups:
        return {}

    results = yield from engine._gather(zero_groups)
    zeroed = [p for p, wcs in results.items() if all(wc.ok for wc in wcs)]
    marks = {
        p: [engine.fabric.post_write(
            r.id, p, RegionKind.BACKGROUND, bg.recycled_offset, U64.pack(min_head), tag="recycled",
        )]
        for p in zeroed
    }
    results = yield from engine._gather(marks)
    done = {}
    for p, wcs in results.items():
        if all(wc.ok for wc in wcs):
            st.recycled[p] = min_head
            done[p] = ranges[p]
    if done:
        logger.info("t=%d leader %d recycled below %d on %s", r.now, r.id, min_head, sorted(done))
    return done


__all__ = [
    "BackgroundPlane",
    "PeerStatus",
    "ScoreEntry",
    "recycle_logs",
    "update_score",
]
