"""
Trace checkers.

Every checker is a pure function of a recorded trace. Log and background memory are rebuilt
from the ``deliver`` and ``local`` records instead of being read from live replicas, so a
checker sees what the fabric actually did.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

from .config import ConfigurationError
from .consensus_log import BackgroundLayout, LogLayout, U64
from .trace import TraceEvent

logger = logging.getLogger(__name__)

DOCTOR_KINDS = frozenset({"agreement", "decided", "exclusivity", "linearizability", "solo"})


class WindowTooLarge(Exception):
    """A history window has more concurrent operations than the search allows."""
    def __init__(self, key: str, concurrency: int, cap: int):
        self.key = key
        self.concurrency = concurrency
        self.cap = cap
        self.message = f"key {key!r}: {concurrency} concurrent operations exceed the window cap of {cap}"
        super().__init__(self.message)


@dataclass
class Verdict:
    """Outcome of one checker. A failure carries the first violating event."""
    name: str
    passed: bool
    time: int | None = None
    details: str = ""
    witness: dict = field(default_factory=dict)
    refused: bool = False

    @classmethod
    def ok(cls, name: str, details: str = "") -> Verdict:
        return cls(name, True, details=details)

    @classmethod
    def fail(cls, name: str, time: int, details: str, **witness: object) -> Verdict:
        return cls(name, False, time, details, dict(witness))

    def to_line(self) -> str:
        fields = {
            "name": self.name,
            "passed": "1" if self.passed else "0",
            "refused": "1" if self.refused else "0",
            "details": self.details.replace("|", "/").replace("=", ":"),
        }
        fields.update({k: str(v).replace("|", "/").replace("=", ":") for k, v in self.witness.items()})
        return TraceEvent(self.time or 0, 0, "verdict", fields).to_line()

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "refused": self.refused,
            "time": self.time,
            "details": self.details,
            "witness": self.witness,
        }


# ── memory reconstruction ────────────────────────────────────


class ClusterImage:
    """Byte images of every replica's regions, replayed from trace records."""

    def __init__(self, meta: TraceEvent):
        self.n = meta.number("n")
        self.layout = LogLayout(meta.number("capacity"), meta.number("value_size"))
        self.bg_layout = BackgroundLayout(self.n)
        self.logs = [bytearray(self.layout.region_size) for _ in range(self.n)]
        self.bgs = [bytearray(self.bg_layout.region_size) for _ in range(self.n)]

    @classmethod
    def from_events(cls, events: list[TraceEvent]) -> ClusterImage | None:
        meta = next((e for e in events if e.kind == "meta"), None)
        return cls(meta) if meta is not None else None

    def apply(self, e: TraceEvent) -> tuple[int, int, int] | None:
        """Replay one record; returns (replica, lo, hi) for the log bytes it changed."""
        if e.kind == "deliver":
            if e.get("op") != "write" or e.get("status") != "ok" or not e.get("data"):
                return None
            owner = e.number("target")
        elif e.kind == "local":
            owner = e.replica
        else:
            return None
        data = bytes.fromhex(e.get("data"))
        offset = e.number("offset")
        if e.get("region") == "log":
            self.logs[owner][offset:offset + len(data)] = data
            return owner, offset, offset + len(data)
        self.bgs[owner][offset:offset + len(data)] = data
        return None

    def recycled_below(self, q: int) -> int:
        return U64.unpack_from(self.bgs[q], self.bg_layout.recycled_offset)[0]

    def touched(self, lo: int, hi: int) -> range:
        """Physical slots overlapping log bytes [lo, hi)."""
        header, width = self.layout.header_size, self.layout.slot_width
        if hi <= header:
            return range(0)
        first = max(0, lo - header) // width
        last = (hi - header - 1) // width
        return range(first, min(last, self.layout.capacity - 1) + 1)

    def logical(self, q: int, physical: int, floor: int | None = None) -> int:
        base = self.recycled_below(q) if floor is None else floor
        return base + (physical - base) % self.layout.capacity

    def filled(self, q: int, index: int) -> bool:
        offset, width = self.layout.slot_span(index)
        return self.logs[q][offset + width - 1] != 0

    def value(self, q: int, index: int) -> bytes | None:
        offset, width = self.layout.slot_span(index)
        entry = self.layout.decode_slot(bytes(self.logs[q][offset:offset + width]))
        return entry.value if entry is not None else None


def _value(e: TraceEvent) -> bytes:
    return bytes.fromhex(e.get("value"))


# ── safety checkers ──────────────────────────────────────────


def check_agreement_validity(events: list[TraceEvent]) -> Verdict:
    """Equal commit indexes carry equal values; every committed value was submitted."""
    name = "agreement_validity"
    submitted = {e.get("payload") for e in events if e.kind == "invoke"}
    chosen: dict[int, tuple[str, int]] = {}
    for e in events:
        if e.kind != "commit":
            continue
        index, value = e.number("index"), e.get("value")
        if value not in submitted:
            return Verdict.fail(
                name, e.time, f"replica {e.replica} committed a value nobody submitted at index {index}",
                index=index, replica=e.replica, value=value,
            )
        first = chosen.setdefault(index, (value, e.replica))
        if first[0] != value:
            return Verdict.fail(
                name, e.time, f"index {index}: replica {first[1]} committed {first[0]}, replica {e.replica} {value}",
                index=index, value=first[0], other=value,
            )
    return Verdict.ok(name, f"{len(chosen)} indexes agreed")


def check_decided_committed(events: list[TraceEvent]) -> Verdict:
    """
    A committed value sits at its index on a majority at the commit instant, and later writes
    never leave a majority of replicas holding a different non-empty value there.
    """
    name = "decided_committed"
    image = ClusterImage.from_events(events)
    if image is None:
        return Verdict.ok(name, "no meta record; nothing to check")
    majority = image.n // 2 + 1
    committed: dict[int, bytes] = {}
    for e in events:
        changed = image.apply(e)
        if changed is not None:
            q, lo, hi = changed
            for physical in image.touched(lo, hi):
                index = image.logical(q, physical)
                expected = committed.get(index)
                if expected is None or not image.filled(q, index) or image.value(q, index) == expected:
                    continue
                conflicting = [
                    r for r in range(image.n)
                    if image.recycled_below(r) <= index and image.filled(r, index) and image.value(r, index) != expected
                ]
                if len(conflicting) > image.n - majority:
                    return Verdict.fail(
                        name, e.time, f"committed index {index} lost its majority after a write to replica {q}",
                        index=index, replica=q, value=expected.hex(), conflicting=conflicting,
                    )
        elif e.kind == "commit":
            index, value = e.number("index"), _value(e)
            holders = [q for q in range(image.n) if image.value(q, index) == value]
            if len(holders) < majority:
                return Verdict.fail(
                    name, e.time, f"replica {e.replica} committed index {index} held by {holders} only",
                    index=index, replica=e.replica, holders=holders,
                )
            committed.setdefault(index, value)
    return Verdict.ok(name, f"{len(committed)} commits decided")


def check_no_holes(events: list[TraceEvent]) -> Verdict:
    """Above the recycled floor, every replica's filled slots form a contiguous prefix."""
    name = "no_holes"
    image = ClusterImage.from_events(events)
    if image is None:
        return Verdict.ok(name, "no meta record; nothing to check")
    cap = image.layout.capacity
    zeroed = [0] * image.n
    prefix = [0] * image.n
    for e in events:
        if e.kind == "deliver" and e.get("tag").startswith("zero:"):
            target = e.number("target")
            zeroed[target] = max(zeroed[target], int(e.get("tag").split(":")[2]))
        changed = image.apply(e)
        if changed is None:
            continue
        q, lo, hi = changed
        floor = max(image.recycled_below(q), zeroed[q])
        top = floor + cap - 1
        prefix[q] = max(prefix[q], floor)
        while prefix[q] < top and image.filled(q, prefix[q]):
            prefix[q] += 1
        for physical in image.touched(lo, hi):
            index = image.logical(q, physical, floor)
            if index >= top:
                continue
            if index > prefix[q] and image.filled(q, index):
                return Verdict.fail(
                    name, e.time, f"replica {q} holds index {index} but index {prefix[q]} is empty",
                    replica=q, index=index, hole=prefix[q],
                )
    return Verdict.ok(name)


def check_log_no_holes(filled: Iterable[bool], floor: int = 0) -> Verdict:
    """No-holes over one decoded log image given as per-index filled flags from ``floor``."""
    name = "no_holes"
    hole = None
    for index, full in enumerate(filled, floor):
        if not full and hole is None:
            hole = index
        elif full and hole is not None:
            return Verdict.fail(name, 0, f"index {index} filled but index {hole} is empty", index=index, hole=hole)
    return Verdict.ok(name)


def check_exclusivity_solo(events: list[TraceEvent]) -> Verdict:
    """
    At most one holder per log at any instant, grants never exceed requests, and no other
    replica's write lands on a log between a holder's grant and that holder's writes.
    """
    name = "exclusivity_solo"
    holder: dict[int, int | None] = {}
    requests: dict[tuple[int, int], int] = defaultdict(int)
    grants: dict[tuple[int, int], int] = defaultdict(int)
    # last grant time per (target, holder) and last foreign write per target
    granted_at: dict[tuple[int, int], int] = {}
    last_writer: dict[int, tuple[int, int]] = {}
    for pos, e in enumerate(events):
        if e.kind == "violation":
            return Verdict.fail(name, e.time, f"protocol violation on replica {e.number('target')}: {e.get('reason')}", **e.fields)
        if e.kind == "perm_request":
            requests[(e.number("target"), e.replica)] += 1
        elif e.kind == "perm":
            target = e.number("target")
            if e.get("action") == "revoke":
                holder[target] = None
                continue
            requester = e.number("requester")
            current = holder.get(target)
            if current is not None and current != requester:
                return Verdict.fail(
                    name, e.time, f"replica {target} granted {requester} while {current} still held its log",
                    target=target, holder=current, requester=requester,
                )
            grants[(target, requester)] += 1
            if grants[(target, requester)] > requests[(target, requester)]:
                return Verdict.fail(
                    name, e.time, f"replica {target} granted {requester} more often than it was asked",
                    target=target, requester=requester,
                )
            holder[target] = requester
            granted_at[(target, requester)] = pos
        elif e.kind == "deliver" and e.get("region") == "log" and e.get("op") == "write" and e.get("status") == "ok":
            target, writer = e.number("target"), e.replica
            since = granted_at.get((target, writer))
            previous = last_writer.get(target)
            if since is not None and previous is not None and previous[0] != writer and previous[1] > since:
                return Verdict.fail(
                    name, e.time, f"replica {previous[0]} wrote to {target} after {writer}'s grant",
                    target=target, writer=writer, other=previous[0],
                )
            last_writer[target] = (writer, pos)
    return Verdict.ok(name)


# ── clients ──────────────────────────────────────────────────


@dataclass
class HistoryOp:
    op_id: int
    kind: str
    key: str
    value: str
    call: int
    ret: int | None = None
    found: bool = False
    result: str = ""

    @property
    def pending(self) -> bool:
        return self.ret is None


def client_history(events: list[TraceEvent]) -> list[HistoryOp]:
    """Invocations and first responses; positions in the trace order them in real time."""
    ops: dict[int, HistoryOp] = {}
    for pos, e in enumerate(events):
        if e.kind == "invoke":
            op_id = e.number("op")
            ops[op_id] = HistoryOp(op_id, e.get("kind"), e.get("key"), e.get("value"), pos)
        elif e.kind == "response":
            op = ops.get(e.number("op"))
            if op is not None and op.ret is None:
                op.ret = pos
                op.found = e.get("found") == "1"
                op.result = e.get("value")
    return list(ops.values())


def _step(op: HistoryOp, state: str | None) -> tuple[bool, str | None]:
    if not op.pending:
        if op.found != (state is not None) or op.result != (state or ""):
            return False, state
    return True, (op.value if op.kind == "put" else state)


def _windows(ops: list[HistoryOp]) -> list[list[HistoryOp]]:
    """Split at points where no operation is open."""
    windows: list[list[HistoryOp]] = []
    current: list[HistoryOp] = []
    open_until = -1
    for op in sorted(ops, key=lambda o: o.call):
        if current and op.call > open_until:
            windows.append(current)
            current = []
        current.append(op)
        open_until = max(open_until, float("inf") if op.pending else op.ret)
    if current:
        windows.append(current)
    return windows


def _concurrency(window: list[HistoryOp]) -> int:
    points = []
    for op in window:
        points.append((op.call, 1))
        if not op.pending:
            points.append((op.ret, -1))
    live = peak = 0
    for _, delta in sorted(points):
        live += delta
        peak = max(peak, live)
    return peak


def _search(window: list[HistoryOp], starts: set[str | None]) -> set[str | None]:
    """End states of every legal order of ``window``; pending ops may be left out."""
    count = len(window)
    required = sum(1 << i for i, op in enumerate(window) if not op.pending)
    full = (1 << count) - 1
    ends: set[str | None] = set()
    seen: set[tuple[int, str | None]] = set()

    def visit(done: int, state: str | None) -> None:
        if (done, state) in seen:
            return
        seen.add((done, state))
        if done & required == required:
            ends.add(state)
        if done == full:
            return
        horizon = min((op.ret for i, op in enumerate(window) if not done >> i & 1 and not op.pending), default=None)
        for i, op in enumerate(window):
            if done >> i & 1 or (horizon is not None and op.call > horizon):
                continue
            legal, after = _step(op, state)
            if legal:
                visit(done | 1 << i, after)

    for start in starts:
        visit(0, start)
    return ends


def check_linearizability(events: list[TraceEvent], max_window: int = 12) -> Verdict:
    """
    Per-key Wing-Gong search over the client history.

    Keys are independent, so each key's history is split into windows at quiescent points and
    searched separately, carrying the set of possible values across windows. Raises
    WindowTooLarge when a window has more than ``max_window`` concurrent operations.
    """
    name = "linearizability"
    by_key: dict[str, list[HistoryOp]] = defaultdict(list)
    for op in client_history(events):
        if op.pending and op.kind == "get":
            continue
        by_key[op.key].append(op)
    for key in sorted(by_key):
        states: set[str | None] = {None}
        for window in _windows(by_key[key]):
            peak = _concurrency(window)
            if peak > max_window:
                raise WindowTooLarge(key, peak, max_window)
            states = _search(window, states)
            if not states:
                first = window[0]
                return Verdict.fail(
                    name, events[first.call].time, f"key {key!r}: no legal order for ops {[op.op_id for op in window]}",
                    key=key, ops=[op.op_id for op in window],
                )
    return Verdict.ok(name, f"{len(by_key)} keys")


def check_client_completeness(events: list[TraceEvent]) -> Verdict:
    """Every invoked client op got a response."""
    name = "client_completeness"
    pending = [op for op in client_history(events) if op.pending]
    if pending:
        first = pending[0]
        return Verdict.fail(
            name, events[first.call].time, f"{len(pending)} ops never answered, first {first.op_id}",
            op=first.op_id, pending=len(pending),
        )
    return Verdict.ok(name)


# ── round complexity ─────────────────────────────────────────


@dataclass
class ProposeRounds:
    """Replication-plane operations issued by one propose call."""
    replica: int
    call: int
    start: int
    writes: int = 0
    reads: int = 0
    phases: list[str] = field(default_factory=list)
    result: str = ""
    index: int | None = None

    @property
    def recovery(self) -> bool:
        return any(phase != "accept" for phase in self.phases)

    def to_dict(self) -> dict:
        return {
            "replica": self.replica,
            "call": self.call,
            "start": self.start,
            "writes": self.writes,
            "reads": self.reads,
            "phases": self.phases,
            "result": self.result,
            "index": self.index,
            "recovery": self.recovery,
        }


def measure_round_complexity(events: list[TraceEvent]) -> list[ProposeRounds]:
    """Count replication-plane reads and writes inside every propose span."""
    open_calls: dict[int, ProposeRounds] = {}
    calls = []
    for e in events:
        span = open_calls.get(e.replica)
        if e.kind == "propose_begin":
            span = ProposeRounds(e.replica, e.number("call"), e.time)
            open_calls[e.replica] = span
            calls.append(span)
        elif span is None:
            continue
        elif e.kind == "post" and e.get("plane") == "replication":
            if e.get("op") == "write":
                span.writes += 1
            else:
                span.reads += 1
        elif e.kind == "phase":
            span.phases.append(e.get("name"))
        elif e.kind == "propose_end":
            span.result = e.get("result")
            span.index = e.number("index", None)
            del open_calls[e.replica]
    return calls


# ── negative controls ────────────────────────────────────────


def _insert(events: list[TraceEvent], pos: int, event: TraceEvent) -> list[TraceEvent]:
    return [*events[:pos], event, *events[pos:]]


def doctor_trace(events: list[TraceEvent], kind: str) -> list[TraceEvent]:
    """
    Return a copy of ``events`` with one injected fault that the named checker must catch.

    agreement: a second replica commits a different value at an already committed index.
    decided: a commit is claimed before any replica holds the value.
    exclusivity: a log is granted to a second replica while the first still holds it.
    solo: another replica's write lands on a log between a grant and the holder's first write.
    linearizability: a read returns a value nobody wrote.
    """
    events = list(events)
    if kind == "agreement":
        pos, first = next(((i, e) for i, e in enumerate(events) if e.kind == "commit"), (None, None))
        if first is None:
            raise ConfigurationError("no commit to doctor", "doctor")
        payloads = [e.get("payload") for e in events if e.kind == "invoke" and e.get("payload") != first.get("value")]
        if not payloads:
            raise ConfigurationError("agreement doctoring needs two submitted values", "doctor")
        forged = replace(first, replica=first.replica + 1, fields={**first.fields, "value": payloads[0]})
        return _insert(events, pos + 1, forged)
    if kind == "decided":
        pos, first = next(((i, e) for i, e in enumerate(events) if e.kind == "commit"), (None, None))
        if first is None:
            raise ConfigurationError("no commit to doctor", "doctor")
        start = next((i for i, e in enumerate(events) if e.kind == "meta"), -1) + 1
        return _insert(events, start, replace(first, time=events[start - 1].time if start else 0))
    if kind == "exclusivity":
        pos, grant = next(
            ((i, e) for i, e in enumerate(events) if e.kind == "perm" and e.get("action") == "grant"),
            (None, None),
        )
        if grant is None:
            raise ConfigurationError("no grant to doctor", "doctor")
        target, requester = grant.number("target"), grant.number("requester")
        intruder = next(q for q in range(target + requester + 2) if q not in (target, requester))
        forged = replace(grant, fields={**grant.fields, "holder": str(intruder), "requester": str(intruder), "previous": str(requester)})
        return _insert(events, pos + 1, forged)
    if kind == "solo":
        for pos, grant in enumerate(events):
            if grant.kind != "perm" or grant.get("action") != "grant":
                continue
            target, holder = grant.number("target"), grant.number("requester")
            write = next(
                (
                    (i, e) for i, e in enumerate(events[pos + 1:], pos + 1)
                    if e.kind == "deliver" and e.get("region") == "log" and e.get("op") == "write"
                    and e.get("status") == "ok" and e.replica == holder and e.number("target") == target
                ),
                None,
            )
            if write is None:
                continue
            intruder = next(q for q in range(target + holder + 2) if q not in (target, holder))
            return _insert(events, write[0], replace(write[1], replica=intruder))
        raise ConfigurationError("no granted write to doctor", "doctor")
    if kind == "linearizability":
        pos, response = next(((i, e) for i, e in enumerate(events) if e.kind == "response"), (None, None))
        if response is None:
            raise ConfigurationError("no client response to doctor", "doctor")
        events[pos] = replace(response, fields={**response.fields, "value": "never-written", "found": "1"})
        return events
    raise ConfigurationError(f"unknown doctor {kind!r}", "doctor")


# ── suite ────────────────────────────────────────────────────


def run_all(
    events: list[TraceEvent],
    max_window: int = 12,
    require_completion: bool = False,
    no_holes: bool = True,
) -> list[Verdict]:
    """Run the checker suite; a refused linearizability search is reported, not failed."""
    checks: list[Callable[[list[TraceEvent]], Verdict]] = [
        check_agreement_validity,
        check_decided_committed,
        check_exclusivity_solo,
    ]
    if no_holes:
        checks.append(check_no_holes)
    verdicts = [check(events) for check in checks]
    try:
        verdicts.append(check_linearizability(events, max_window))
    except WindowTooLarge as e:
        logger.info("linearizability refused: %s", e.message)
        verdicts.append(Verdict("linearizability", True, details=e.message, refused=True))
    if require_completion:
        verdicts.append(check_client_completeness(events))
    return verdicts


def all_passed(verdicts: Iterable[Verdict]) -> bool:
    return all(v.passed for v in verdicts)


__all__ = [
    "ClusterImage",
    "DOCTOR_KINDS",
    "HistoryOp",
    "ProposeRounds",
    "Verdict",
    "WindowTooLarge",
    "all_passed",
    "check_agreement_validity",
    "check_client_completeness",
    "check_decided_committed",
    "check_exclusivity_solo",
    "check_linearizability",
    "check_log_no_holes",
    "check_no_holes",
    "client_history",
    "doctor_trace",
    "measure_round_complexity",
    "run_all",
]
