"""
Trace events and their line format.

A trace line is ``time|replica|kind|key=value|key=value...`` (UTF-8, one event per line).
Field values never contain ``|``, ``=`` or newlines; byte payloads are hex.

Kinds and their fields:

    meta          n, capacity, value_size, seed
    post          req, op, target, region, plane, offset, length, tag
    deliver       req, op, target, region, offset, status, last, tag, data (writes)
    local         region, offset, tag, data
    perm_request  target, req
    perm          action (grant|revoke), target, holder, previous, requester
    violation     target, requester, reason
    timer         tag
    fault         action, target, duration, amount
    role          role, leader
    suspect       peer
    trust         peer
    propose_begin call, value
    propose_end   call, result, index, reason
    phase         call, name
    commit        index, value
    apply_app     index, op
    invoke        op, kind, key, value, payload
    response      op, kind, key, value, found
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator


class TraceFormatError(Exception):
    """Malformed or truncated trace file."""
    def __init__(self, message: str, line_no: int):
        self.message = message
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


@dataclass(frozen=True)
class TraceEvent:
    """One timestamped trace record."""
    time: int
    replica: int
    kind: str
    fields: dict[str, str] = field(default_factory=dict)

    def get(self, key: str, default: str = "") -> str:
        return self.fields.get(key, default)

    def number(self, key: str, default: int = -1) -> int:
        raw = self.fields.get(key)
        return default if raw in (None, "") else int(raw)

    def to_line(self) -> str:
        parts = [str(self.time), str(self.replica), self.kind]
        parts.extend(f"{k}={v}" for k, v in self.fields.items())
        return "|".join(parts)

    def to_dict(self) -> dict:
        return {"time": self.time, "replica": self.replica, "kind": self.kind, **self.fields}

    @classmethod
    def from_line(cls, line: str, line_no: int = 0) -> TraceEvent:
        parts = line.rstrip("\n").split("|")
        if len(parts) < 3:
            raise TraceFormatError("expected time|replica|kind", line_no)
        try:
            time, replica = int(parts[0]), int(parts[1])
        except ValueError as e:
            raise TraceFormatError(f"bad time or replica: {e}", line_no) from e
        fields: dict[str, str] = {}
        for part in parts[3:]:
            key, sep, value = part.partition("=")
            if not sep:
                raise TraceFormatError(f"field without '=': {part!r}", line_no)
            fields[key] = value
        return cls(time, replica, parts[2], fields)


def _clean(value: object) -> str:
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, bool):
        return "1" if value else "0"
    if value is None:
        return ""
    return str(value)


class TraceRecorder:
    """
    Append-only trace sink.

    Keeps events in memory and optionally streams each line to a file as it is recorded,
    so an interrupted run leaves a valid prefix.
    """

    def __init__(self, stream: IO[str] | None = None):
        self.events: list[TraceEvent] = []
        self._stream = stream

    def record(self, time: int, replica: int, kind: str, /, **fields: object) -> TraceEvent:
        event = TraceEvent(time, replica, kind, {k: _clean(v) for k, v in fields.items()})
        self.events.append(event)
        if self._stream is not None:
            self._stream.write(event.to_line() + "\n")
        return event

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[TraceEvent]:
        return iter(self.events)

    def text(self) -> str:
        return dump_lines(self.events)

    def digest(self) -> str:
        """SHA-256 over the exact trace text."""
        return hashlib.sha256(self.text().encode("utf-8")).hexdigest()


def dump_lines(events: Iterable[TraceEvent]) -> str:
    return "".join(e.to_line() + "\n" for e in events)


def write_trace(events: Iterable[TraceEvent], path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_lines(events), encoding="utf-8")


def parse_trace(text: str) -> list[TraceEvent]:
    """Parse trace text. A final line without newline counts as truncated."""
    if text and not text.endswith("\n"):
        line_no = text.count("\n") + 1
        raise TraceFormatError("truncated final record", line_no)
    events = []
    for line_no, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        events.append(TraceEvent.from_line(line, line_no))
    return events


def read_trace(path: Path | str) -> list[TraceEvent]:
    return parse_trace(Path(path).read_text(encoding="utf-8"))


__all__ = [
    "TraceEvent",
    "TraceFormatError",
    "TraceRecorder",
    "dump_lines",
    "parse_trace",
    "read_trace",
    "write_trace",
]
