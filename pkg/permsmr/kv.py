"""
Toy replicated key-value application.

Payloads are UTF-8 text, ``P|op_id|key|value`` for a put and ``G|op_id|key`` for a get.
Each op id is applied once; a duplicate in the log is answered from the result cache.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

logger = logging.getLogger(__name__)


class OpKind(str, Enum):
    PUT = "put"
    GET = "get"


@dataclass(frozen=True)
class ClientOp:
    """One client request."""
    op_id: int
    kind: OpKind
    key: str
    value: str = ""

    @property
    def payload(self) -> bytes:
        if self.kind is OpKind.PUT:
            return f"P|{self.op_id}|{self.key}|{self.value}".encode("utf-8")
        return f"G|{self.op_id}|{self.key}".encode("utf-8")

    def to_dict(self) -> dict:
        return {"op_id": self.op_id, "kind": self.kind.value, "key": self.key, "value": self.value}


@dataclass(frozen=True)
class KVResponse:
    """
    Result of applying one payload.

    PUT reports the previous value, GET the current one; ``found`` is False when the key was
    absent. ``error`` is set for payloads that do not parse.
    """
    op_id: int | None
    kind: OpKind | None
    key: str = ""
    value: str = ""
    found: bool = False
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "op_id": self.op_id,
            "kind": self.kind.value if self.kind else None,
            "key": self.key,
            "value": self.value,
            "found": self.found,
            "error": self.error,
        }


def parse_payload(payload: bytes) -> ClientOp | None:
    """Decode a log payload into a ClientOp; None when malformed."""
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError:
        return None
    parts = text.split("|")
    try:
        if parts[0] == "P" and len(parts) == 4:
            return ClientOp(int(parts[1]), OpKind.PUT, parts[2], parts[3])
        if parts[0] == "G" and len(parts) == 3:
            return ClientOp(int(parts[1]), OpKind.GET, parts[2])
    except ValueError:
        return None
    return None


@dataclass
class KVStore:
    """Deterministic state machine driven by committed log entries."""
    data: dict[str, str] = field(default_factory=dict)
    results: dict[int, KVResponse] = field(default_factory=dict)
    applied: list[tuple[int, bytes]] = field(default_factory=list)

    def apply(self, index: int, payload: bytes) -> KVResponse:
        self.applied.append((index, payload))
        op = parse_payload(payload)
        if op is None:
            logger.debug("malformed payload at index %d", index)
            return KVResponse(None, None, error="malformed payload")
        if op.op_id in self.results:
            return self.results[op.op_id]

        previous = self.data.get(op.key)
        if op.kind is OpKind.PUT:
            self.data[op.key] = op.value
        response = KVResponse(
            op_id=op.op_id,
            kind=op.kind,
            key=op.key,
            value=previous or "",
            found=previous is not None,
        )
        self.results[op.op_id] = response
        return response

    def snapshot(self) -> dict[str, str]:
        return dict(sorted(self.data.items()))


def kv_apply(store: KVStore, payload: bytes, index: int = -1) -> KVResponse:
    return store.apply(index, payload)


__all__ = ["ClientOp", "KVResponse", "KVStore", "OpKind", "kv_apply", "parse_payload"]
