"""
Per-replica runtime.

A replica's protocol logic runs as simpy processes on the fabric's environment. A process
yields the events it waits for, all of them triggered by this replica's dispatcher:

    sleep(ticks)                        a fabric timer owned by this replica
    next_completion(request_ids)        the earliest completion among these requests
    await_permission(change_id)         a permission change on this replica landing

The harness hands each fabric event to the replica it belongs to. Paused replicas defer the
event and crashed ones drop it, so their processes stay parked.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Generator, Iterable, Protocol

import simpy

from .config import Settings
from .consensus_log import BackgroundLayout, ConsensusLog, LogLayout, U64
from .fabric import PLANE_OF, EventKind, Fabric, FabricEvent, Plane, RegionKind, WorkCompletion
from .kv import ClientOp, KVResponse, KVStore
from .trace import TraceRecorder

logger = logging.getLogger(__name__)

TaskGen = Generator[simpy.Event, Any, Any]


@dataclass(eq=False)
class Task:
    name: str
    process: simpy.Process

    @property
    def done(self) -> bool:
        return not self.process.is_alive


class ClientPort(Protocol):
    """Out-of-band channel back to the clients."""

    def bounce(self, replica: int, op: ClientOp, hint: int) -> None: ...

    def respond(self, replica: int, op_id: int, response: KVResponse) -> None: ...


class Replica:
    """One replica: its memory regions, app, local state and running tasks."""

    def __init__(self, rid: int, settings: Settings, fabric: Fabric, clients: ClientPort | None = None):
        self.id = rid
        self.settings = settings
        self.fabric = fabric
        self.env: simpy.Environment = fabric.env
        self.trace: TraceRecorder = fabric.trace
        self.clients = clients

        self.layout = LogLayout(settings.capacity, settings.value_size)
        self.bg_layout = BackgroundLayout(settings.n)
        fabric.register_region(rid, RegionKind.LOG, self.layout.region_size)
        fabric.register_region(rid, RegionKind.BACKGROUND, self.bg_layout.region_size)
        self.log = ConsensusLog(
            self.layout,
            self.bg_layout,
            fabric.memory(rid, RegionKind.LOG),
            fabric.memory(rid, RegionKind.BACKGROUND),
        )
        self.app = KVStore()

        self.leader = 0
        self.crashed = False
        self.paused = False
        self._deferred: deque[FabricEvent] = deque()
        self._done: dict[int, simpy.Event] = {}
        self._handlers: dict[int, Callable[[WorkCompletion], None]] = {}
        self._perm_waiters: dict[int, simpy.Event] = {}
        self.tasks: list[Task] = []
        self.waiting_clients: dict[int, ClientOp] = {}

        from .background import BackgroundPlane
        from .replication import ReplicationEngine

        self.background = BackgroundPlane(self)
        self.replication = ReplicationEngine(self)

    # ── lifecycle ────────────────────────────────────────────

    @property
    def now(self) -> int:
        return self.fabric.now

    @property
    def is_leader(self) -> bool:
        return not self.crashed and self.leader == self.id

    def start(self) -> None:
        self.background.start()
        self.replication.start()

    def crash(self) -> None:
        """Stop for good; parked processes are never resumed."""
        self.crashed = True
        self.fabric.crash(self.id)
        self._deferred.clear()
        self._done.clear()
        self._handlers.clear()
        self._perm_waiters.clear()

    def pause(self) -> None:
        self.paused = True

    def resume(self) -> None:
        self.paused = False
        while self._deferred and not self.paused and not self.crashed:
            self._dispatch(self._deferred.popleft())

    def set_leader(self, leader: int) -> None:
        if leader == self.leader:
            return
        previous, self.leader = self.leader, leader
        role = "leader" if leader == self.id else "follower"
        self.trace.record(self.now, self.id, "role", role=role, leader=leader, previous=previous)
        logger.info("t=%d replica %d: leader %d -> %d", self.now, self.id, previous, leader)
        self.replication.on_role_change()

    # ── tasks ────────────────────────────────────────────────

    def spawn(self, name: str, gen: TaskGen) -> Task:
        task = Task(name, self.env.process(gen))
        self.tasks = [t for t in self.tasks if not t.done]
        self.tasks.append(task)
        return task

    def sleep(self, ticks: int) -> simpy.Event:
        """Event that fires on this replica's timer ``ticks`` (at least 1) from now."""
        wake = self.env.event()
        self.fabric.schedule_timer(self.now + max(1, ticks), self.id, ("wake", wake))
        return wake

    def await_permission(self, change_id: int) -> simpy.Event:
        landed = self.env.event()
        self._perm_waiters[change_id] = landed
        return landed

    def next_completion(self, ids: Iterable[int]) -> Generator[simpy.Event, Any, WorkCompletion]:
        """Wait for the earliest completion among ``ids`` and claim it."""
        events = [self._completion(rid) for rid in sorted(ids)]
        if not events:
            raise ValueError("waiting on no requests")
        yield self.env.any_of(events)
        wc = min((event.value for event in events if event.triggered), key=lambda wc: (wc.time, wc.request_id))
        del self._done[wc.request_id]
        return wc

    def _completion(self, rid: int) -> simpy.Event:
        if rid not in self._done:
            self._done[rid] = self.env.event()
        return self._done[rid]

    def detach(self, ids: Iterable[int], handler: Callable[[WorkCompletion], None]) -> None:
        """Route completions of ``ids`` to ``handler``, including ones already in but unclaimed."""
        for rid in ids:
            event = self._done.pop(rid, None)
            if event is not None and event.triggered:
                handler(event.value)
            else:
                self._handlers[rid] = handler

    # ── event dispatch ───────────────────────────────────────

    def handle(self, event: FabricEvent) -> None:
        if self.crashed:
            return
        if self.paused:
            self._deferred.append(event)
            return
        self._dispatch(event)

    def _dispatch(self, event: FabricEvent) -> None:
        if event.kind is EventKind.DELIVERY:
            for wc in self.fabric.poll_completions(self.id):
                self._on_completion(wc)
        elif event.kind is EventKind.PERMISSION:
            landed = self._perm_waiters.pop(event.change.id, None)
            if landed is not None:
                landed.succeed(event.change)
        elif event.kind is EventKind.TIMER:
            self._on_timer(event.tag)

    def _on_timer(self, tag: Any) -> None:
        if isinstance(tag, tuple) and tag and tag[0] == "wake" and not tag[1].triggered:
            tag[1].succeed()

    def _on_completion(self, wc: WorkCompletion) -> None:
        self.replication.forget(wc.request_id)
        handler = self._handlers.pop(wc.request_id, None)
        if handler is not None:
            handler(wc)
            return
        event = self._done.get(wc.request_id)
        if event is not None:
            event.succeed(wc)
        elif PLANE_OF[wc.region] is Plane.REPLICATION:
            self.replication.on_detached(wc)

    # ── clients and application ──────────────────────────────

    def submit(self, op: ClientOp) -> None:
        if self.crashed or self.paused:
            return
        if not self.is_leader:
            if self.clients is not None:
                self.clients.bounce(self.id, op, self.leader)
            return
        self.waiting_clients[op.op_id] = op
        self.replication.enqueue(op)

    def apply_committed(self) -> list[tuple[int, bytes]]:
        """Apply entries in [logHead, FUO) to the app and advance logHead."""
        head = self.log.log_head
        fuo = self.log.fuo
        applied = []
        while head < fuo:
            entry = self.log.slot(head)
            if entry is None:
                break
            response = self.app.apply(head, entry.value)
            self.trace.record(self.now, self.id, "apply_app", index=head, op=response.op_id)
            applied.append((head, entry.value))
            if response.op_id is not None and response.op_id in self.waiting_clients:
                self.waiting_clients.pop(response.op_id)
                if self.clients is not None:
                    self.clients.respond(self.id, response.op_id, response)
            head += 1
        if applied:
            self.fabric.local_write(self.id, RegionKind.BACKGROUND, self.bg_layout.log_head_offset, U64.pack(head))
        return applied

    def bounce_waiting(self) -> None:
        waiting, self.waiting_clients = self.waiting_clients, {}
        for op in waiting.values():
            if self.clients is not None:
                self.clients.bounce(self.id, op, self.leader)

    def decoded_log(self) -> list[tuple[int, bytes]]:
        """(index, value) of every non-empty slot in the live window."""
        start = self.log.recycled_below
        out = []
        for index in range(start, self.log.window_end):
            entry = self.log.slot(index)
            if entry is not None:
                out.append((index, entry.value))
        return out

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "leader": self.leader,
            "crashed": self.crashed,
            "paused": self.paused,
            "log": self.log.to_dict(),
            "kv": self.app.snapshot(),
        }


__all__ = [
    "ClientPort",
    "Replica",
    "Task",
    "TaskGen",
]
