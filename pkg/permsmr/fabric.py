"""
Deterministic simulated one-sided memory fabric.

Models the RDMA behaviour the protocol relies on:

- one reliable FIFO queue pair per (issuer, target, plane),
- one-sided reads and writes against registered regions,
- a single write-permission holder per LogRegion, checked when a write lands,
- writes applied left to right (optionally in chunks across scheduler steps),
- permission grants backed by single-use tokens minted by permission requests.

Everything runs on one ``simpy.Environment``. Fabric events sit on its queue with a priority
that encodes (replica, kind rank), so same-time events run in (replica, kind rank, insertion)
order. simpy's own URGENT and NORMAL events, which carry process wake-ups, sort ahead of all
fabric events at the same instant.
"""

from __future__ import annotations

import itertools
import logging
import math
import random
from collections import defaultdict, deque
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any

import simpy

from .config import ConfigurationError, Settings
from .trace import TraceRecorder

logger = logging.getLogger(__name__)

SETTLE_PRIORITY = 2
FABRIC_PRIORITY = 3


class SimulationComplete(Exception):
    """No pending fabric events remain."""
    def __init__(self, message: str = "event set empty"):
        self.message = message
        super().__init__(message)


class RegionKind(str, Enum):
    LOG = "log"
    BACKGROUND = "background"


class Plane(str, Enum):
    REPLICATION = "replication"
    BACKGROUND = "background"


PLANE_OF = {RegionKind.LOG: Plane.REPLICATION, RegionKind.BACKGROUND: Plane.BACKGROUND}


class Op(str, Enum):
    READ = "read"
    WRITE = "write"


class Status(str, Enum):
    OK = "ok"
    PERMISSION_DENIED = "permission_denied"
    TARGET_CRASHED = "target_crashed"


class PairStatus(str, Enum):
    OPERATIONAL = "operational"
    ERROR = "error"


class EventKind(IntEnum):
    """Rank used to break ties between events at the same time on the same replica."""
    DELIVERY = 0
    PERMISSION = 1
    TIMER = 2


class PermissionOutcome(str, Enum):
    OK = "ok"
    VIOLATION = "violation"


@dataclass(frozen=True)
class RegionId:
    owner: int
    kind: RegionKind
    size: int


@dataclass
class WorkRequest:
    """A posted one-sided operation."""
    id: int
    issuer: int
    target: int
    op: Op
    region: RegionKind
    offset: int
    length: int
    payload: bytes
    issue_time: int
    tag: str = ""
    request_permission: bool = False
    done: bool = False

    @property
    def plane(self) -> Plane:
        return PLANE_OF[self.region]


@dataclass
class WorkCompletion:
    """Outcome of one WorkRequest."""
    request_id: int
    issuer: int
    target: int
    op: Op
    region: RegionKind
    status: Status
    time: int
    payload: bytes = b""
    tag: str = ""

    @property
    def ok(self) -> bool:
        return self.status is Status.OK

    def to_dict(self) -> dict:
        return {
            "request_id": self.request_id,
            "issuer": self.issuer,
            "target": self.target,
            "op": self.op.value,
            "region": self.region.value,
            "status": self.status.value,
            "time": self.time,
            "payload": self.payload.hex(),
        }


@dataclass
class QueuePairState:
    issuer: int
    target: int
    plane: Plane
    status: PairStatus = PairStatus.OPERATIONAL
    pending: deque[WorkRequest] = field(default_factory=deque)
    busy_until: int = 0


@dataclass(frozen=True)
class PermissionAction:
    """Argument of set_write_permission."""
    kind: str
    requester: int | None = None

    @classmethod
    def grant(cls, requester: int) -> PermissionAction:
        return cls("grant", requester)

    @classmethod
    def revoke(cls) -> PermissionAction:
        return cls("revoke")


@dataclass(frozen=True)
class PermissionChange:
    id: int
    target: int
    action: PermissionAction


@dataclass(frozen=True)
class PermissionResult:
    outcome: PermissionOutcome
    change_id: int | None = None

    @property
    def ok(self) -> bool:
        return self.outcome is PermissionOutcome.OK


@dataclass
class FabricEvent:
    """What advance() just processed."""
    kind: EventKind
    time: int
    replica: int
    request: WorkRequest | None = None
    completion: WorkCompletion | None = None
    change: PermissionChange | None = None
    tag: Any = None

    @property
    def wrote_log(self) -> bool:
        """True when bytes of a LogRegion changed in this event."""
        return (
            self.request is not None
            and self.request.op is Op.WRITE
            and self.request.region is RegionKind.LOG
            and (self.completion is None or self.completion.ok)
        )


class Scheduled(simpy.Event):
    """
    An already-triggered event placed on the simpy queue at a chosen (delay, priority).

    Built the way ``simpy.Timeout`` is, with the priority passed through to ``env.schedule``.
    """

    def __init__(self, env: simpy.Environment, delay: int, priority: int, item: Any = None):
        super().__init__(env)
        self.item = item
        self._ok = True
        self._value = None
        env.schedule(self, priority, delay)


class Fabric:
    """
    Discrete-event memory fabric.

    Example:
        >>> fabric = Fabric(Settings(n=3))
        >>> region = fabric.register_region(0, RegionKind.BACKGROUND, 64)
        >>> rid = fabric.post_write(1, 0, RegionKind.BACKGROUND, 0, b"\\x01")
        >>> fabric.advance().completion.ok
        True
    """

    def __init__(self, settings: Settings, trace: TraceRecorder | None = None):
        self.settings = settings
        self.trace = trace if trace is not None else TraceRecorder()
        self.env = simpy.Environment()
        self._rng = random.Random(settings.seed)
        self._last: FabricEvent | None = None
        self._queued = 0
        self._request_ids = itertools.count(1)
        self._change_ids = itertools.count(1)
        self._regions: dict[tuple[int, RegionKind], bytearray] = {}
        self._region_ids: dict[tuple[int, RegionKind], RegionId] = {}
        self._pairs: dict[tuple[int, int, Plane], QueuePairState] = {}
        self._completions: dict[int, list[WorkCompletion]] = defaultdict(list)
        self._holders: dict[int, int | None] = {}
        self._tokens: dict[tuple[int, int], int] = defaultdict(int)
        self._spikes: dict[tuple[int, int], int] = defaultdict(int)
        self._perm_spikes: dict[int, int] = defaultdict(int)
        self.crashed: set[int] = set()

    @property
    def now(self) -> int:
        return int(self.env.now)

    # ── topology ──────────────────────────────────────────────

    def register_region(self, owner: int, kind: RegionKind, size: int) -> RegionId:
        key = (owner, kind)
        if key in self._regions:
            raise ConfigurationError(f"region {kind.value} already registered for replica {owner}")
        if size <= 0:
            raise ConfigurationError(f"region size must be positive, got {size}")
        self._regions[key] = bytearray(size)
        region_id = RegionId(owner, kind, size)
        self._region_ids[key] = region_id
        if kind is RegionKind.LOG:
            self._holders[owner] = None
        return region_id

    def memory(self, owner: int, kind: RegionKind) -> bytearray:
        return self._regions[(owner, kind)]

    def holder(self, target: int) -> int | None:
        return self._holders.get(target)

    def tokens(self, target: int, requester: int) -> int:
        return self._tokens[(target, requester)]

    def pair(self, issuer: int, target: int, plane: Plane) -> QueuePairState:
        key = (issuer, target, plane)
        if key not in self._pairs:
            self._pairs[key] = QueuePairState(issuer, target, plane)
        return self._pairs[key]

    # ── one-sided operations ─────────────────────────────────

    def post_write(
        self,
        issuer: int,
        target: int,
        region: RegionKind,
        offset: int,
        payload: bytes,
        *,
        tag: str = "",
        request_permission: bool = False,
    ) -> int:
        return self._post(issuer, target, Op.WRITE, region, offset, len(payload), bytes(payload), tag, request_permission)

    def post_read(self, issuer: int, target: int, region: RegionKind, offset: int, length: int, *, tag: str = "") -> int:
        return self._post(issuer, target, Op.READ, region, offset, length, b"", tag, False)

    def _post(
        self,
        issuer: int,
        target: int,
        op: Op,
        region: RegionKind,
        offset: int,
        length: int,
        payload: bytes,
        tag: str,
        request_permission: bool,
    ) -> int:
        if issuer in self.crashed:
            raise ValueError(f"replica {issuer} is crashed and cannot post")
        key = (target, region)
        if key not in self._regions:
            raise ConfigurationError(f"no {region.value} region registered for replica {target}")
        if offset < 0 or length < 0 or offset + length > len(self._regions[key]):
            raise ValueError(f"[{offset}, {offset + length}) outside {region.value} region of replica {target}")

        request = WorkRequest(
            id=next(self._request_ids),
            issuer=issuer,
            target=target,
            op=op,
            region=region,
            offset=offset,
            length=length,
            payload=payload,
            issue_time=self.now,
            tag=tag,
            request_permission=request_permission,
        )
        pair = self.pair(issuer, target, request.plane)
        if target in self.crashed:
            at = self.now + self.settings.t_conn
        else:
            at = self.now + self._latency(issuer, target, request.plane)
        at = max(at, pair.busy_until)
        chunks = 1
        if op is Op.WRITE and self.settings.torn_writes and length > 0:
            chunks = -(-length // self.settings.chunk_size)
        for k in range(chunks):
            self._push(at + k, issuer, EventKind.DELIVERY, (request, k, chunks))
        pair.busy_until = at + chunks - 1
        pair.pending.append(request)

        self.trace.record(
            self.now, issuer, "post",
            req=request.id, op=op.value, target=target, region=region.value,
            plane=request.plane.value, offset=offset, length=length, tag=tag,
        )
        return request.id

    def _latency(self, issuer: int, target: int, plane: Plane) -> int:
        s = self.settings
        base, jitter = (s.repl_base, s.repl_jitter) if plane is Plane.REPLICATION else (s.bg_base, s.bg_jitter)
        delay = base + (self._rng.randint(-jitter, jitter) if jitter else 0)
        return max(1, delay) + self._spikes[(issuer, target)]

    def poll_completions(self, issuer: int) -> list[WorkCompletion]:
        """Return and remove every completion available to ``issuer``."""
        return self._completions.pop(issuer, [])

    # ── local access (owner's CPU, no fabric round trip) ─────

    def local_read(self, owner: int, region: RegionKind, offset: int, length: int) -> bytes:
        return bytes(self._regions[(owner, region)][offset:offset + length])

    def local_write(self, owner: int, region: RegionKind, offset: int, data: bytes, *, tag: str = "") -> None:
        mem = self._regions[(owner, region)]
        mem[offset:offset + len(data)] = data
        if region is RegionKind.LOG:
            self.trace.record(self.now, owner, "local", region=region.value, offset=offset, tag=tag, data=bytes(data))

    # ── permissions ──────────────────────────────────────────

    def set_write_permission(self, target: int, action: PermissionAction) -> PermissionResult:
        """
        Change the write-permission holder of ``target``'s LogRegion.

        Takes effect after L_perm ticks. A grant needs an unconsumed token minted by a
        permission request from the requester and consumes it now.
        """
        if action.kind == "grant":
            key = (target, action.requester)
            if self._tokens[key] < 1:
                self.trace.record(
                    self.now, target, "violation",
                    target=target, requester=action.requester, reason="grant_without_request",
                )
                logger.warning("replica %s granted %s without a pending request", target, action.requester)
                return PermissionResult(PermissionOutcome.VIOLATION)
            self._tokens[key] -= 1
        change = PermissionChange(next(self._change_ids), target, action)
        latency = self.settings.permission_latency + self._perm_spikes[target]
        self._push(self.now + latency, target, EventKind.PERMISSION, change)
        return PermissionResult(PermissionOutcome.OK, change.id)

    def _apply_permission(self, change: PermissionChange) -> None:
        target = change.target
        previous = self._holders.get(target)
        if change.action.kind == "revoke":
            self._holders[target] = None
            self.trace.record(self.now, target, "perm", action="revoke", target=target, holder="", previous=previous, requester="")
            if previous is not None:
                self._fail_pair(self.pair(previous, target, Plane.REPLICATION))
            return
        requester = change.action.requester
        self._holders[target] = requester
        self.trace.record(
            self.now, target, "perm",
            action="grant", target=target, holder=requester, previous=previous, requester=requester,
        )
        if previous is not None and previous != requester:
            self._fail_pair(self.pair(previous, target, Plane.REPLICATION))
        self.pair(requester, target, Plane.REPLICATION).status = PairStatus.OPERATIONAL

    # ── faults ───────────────────────────────────────────────

    def crash(self, replica: int) -> None:
        self.crashed.add(replica)

    def add_delay(self, issuer: int, target: int, amount: int) -> None:
        self._spikes[(issuer, target)] = max(0, self._spikes[(issuer, target)] + amount)

    def add_permission_delay(self, target: int, amount: int) -> None:
        self._perm_spikes[target] = max(0, self._perm_spikes[target] + amount)

    # ── event engine ─────────────────────────────────────────

    def schedule_timer(self, at: int, replica: int, tag: Any) -> None:
        self._push(max(at, self.now), replica, EventKind.TIMER, tag)

    def _push(self, at: int, replica: int, kind: EventKind, item: Any) -> None:
        priority = FABRIC_PRIORITY + replica * len(EventKind) + int(kind)
        event = Scheduled(self.env, at - self.now, priority, (replica, kind, item))
        event.callbacks.append(self._fire)
        self._queued += 1

    def _fire(self, event: Scheduled) -> None:
        self._queued -= 1
        replica, kind, item = event.item
        self._last = self._process(kind, replica, item)

    def next_time(self) -> int | None:
        at = self.env.peek()
        return None if at == math.inf else int(at)

    @property
    def pending_events(self) -> int:
        return self._queued

    def advance(self, until: int | None = None) -> FabricEvent:
        """Process exactly one fabric event and return it. Events after ``until`` stay queued."""
        while True:
            at = self.env.peek()
            if at == math.inf:
                raise SimulationComplete()
            if until is not None and at > until:
                raise SimulationComplete(f"no event before {until}")
            self._last = None
            self.env.step()
            if self._last is not None:
                return self._last

    def settle(self) -> None:
        """Run every process wake-up pending at the current instant."""
        self.env.run(until=Scheduled(self.env, 0, SETTLE_PRIORITY))

    def _process(self, kind: EventKind, replica: int, item: Any) -> FabricEvent | None:
        if kind is EventKind.TIMER:
            if replica in self.crashed:
                return None
            return FabricEvent(kind, self.now, replica, tag=item)
        if kind is EventKind.PERMISSION:
            if item.target in self.crashed:
                return None
            self._apply_permission(item)
            return FabricEvent(kind, self.now, replica, change=item)
        request, chunk, chunks = item
        return self._deliver(request, chunk, chunks)

    def _deliver(self, request: WorkRequest, chunk: int, chunks: int) -> FabricEvent | None:
        if request.done:
            return None
        pair = self.pair(request.issuer, request.target, request.plane)
        if request.issuer in self.crashed:
            request.done = True
            if request in pair.pending:
                pair.pending.remove(request)
            return None
        if request.target in self.crashed:
            pair.status = PairStatus.ERROR
            wc = self._complete(request, Status.TARGET_CRASHED)
            return FabricEvent(EventKind.DELIVERY, self.now, request.issuer, request=request, completion=wc)
        if pair.status is PairStatus.ERROR:
            wc = self._complete(request, Status.PERMISSION_DENIED)
            return FabricEvent(EventKind.DELIVERY, self.now, request.issuer, request=request, completion=wc)
        if (
            request.op is Op.WRITE
            and request.region is RegionKind.LOG
            and self._holders.get(request.target) != request.issuer
        ):
            wc = self._complete(request, Status.PERMISSION_DENIED)
            self._fail_pair(pair)
            return FabricEvent(EventKind.DELIVERY, self.now, request.issuer, request=request, completion=wc)

        mem = self._regions[(request.target, request.region)]
        last = chunk == chunks - 1
        if request.op is Op.WRITE:
            size = self.settings.chunk_size if chunks > 1 else request.length
            lo = chunk * size
            data = request.payload[lo:lo + size]
            start = request.offset + lo
            mem[start:start + len(data)] = data
            self.trace.record(
                self.now, request.issuer, "deliver",
                req=request.id, op=request.op.value, target=request.target, region=request.region.value,
                offset=start, status=Status.OK.value, last=last, tag=request.tag, data=data,
            )
            if last and request.request_permission:
                self._tokens[(request.target, request.issuer)] += 1
                self.trace.record(self.now, request.issuer, "perm_request", target=request.target, req=request.id)
            if not last:
                return FabricEvent(EventKind.DELIVERY, self.now, request.issuer, request=request)
            wc = self._complete(request, Status.OK, traced=False)
        else:
            payload = bytes(mem[request.offset:request.offset + request.length])
            wc = self._complete(request, Status.OK, payload)
        return FabricEvent(EventKind.DELIVERY, self.now, request.issuer, request=request, completion=wc)

    def _complete(self, request: WorkRequest, status: Status, payload: bytes = b"", traced: bool = True) -> WorkCompletion:
        request.done = True
        pair = self.pair(request.issuer, request.target, request.plane)
        if request in pair.pending:
            pair.pending.remove(request)
        wc = WorkCompletion(
            request_id=request.id,
            issuer=request.issuer,
            target=request.target,
            op=request.op,
            region=request.region,
            status=status,
            time=self.now,
            payload=payload,
            tag=request.tag,
        )
        if request.issuer not in self.crashed:
            self._completions[request.issuer].append(wc)
        if traced:
            self.trace.record(
                self.now, request.issuer, "deliver",
                req=request.id, op=request.op.value, target=request.target, region=request.region.value,
                offset=request.offset, status=status.value, last=True, tag=request.tag,
            )
        return wc

    def _fail_pair(self, pair: QueuePairState) -> None:
        """Move a pair to error and fail everything still queued on it, in FIFO order."""
        pair.status = PairStatus.ERROR
        for queued in list(pair.pending):
            self._complete(queued, Status.PERMISSION_DENIED)


__all__ = [
    "EventKind",
    "Fabric",
    "FabricEvent",
    "Op",
    "PairStatus",
    "PermissionAction",
    "PermissionChange",
    "PermissionOutcome",
    "PermissionResult",
    "Plane",
    "QueuePairState",
    "RegionId",
    "RegionKind",
    "Scheduled",
    "SimulationComplete",
    "Status",
    "WorkCompletion",
    "WorkRequest",
]
