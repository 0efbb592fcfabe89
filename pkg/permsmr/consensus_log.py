"""
Consensus log layout and slot codec.

LogRegion byte layout (little-endian):

    header   minProposal: u64 | FUO: u64
    slots    capacity x [proposal: u64 | length: u16 | payload: value_size | canary: u8]

Logical index i lives in physical slot i mod capacity. An all-zero slot is the empty
entry; a non-zero canary (always 1) marks a fully written one. The canary is the last
byte of the slot, so a write applied left to right exposes it last. Recycling clears the
canaries of a range one slot at a time, lowest first, before zeroing the slot bodies.

BackgroundRegion byte layout:

    heartbeat: u64 | request array: n x u8 | ack array: n x u8 | logHead: u64 | recycledBelow: u64
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

HEADER = struct.Struct("<QQ")
U64 = struct.Struct("<Q")
SLOT_PREFIX = struct.Struct("<QH")
CANARY = 1


class SlotValueError(ValueError):
    """Value does not fit in a slot."""


@dataclass(frozen=True)
class Entry:
    """A decoded non-empty slot."""
    proposal: int
    value: bytes

    def to_dict(self) -> dict:
        return {"proposal": self.proposal, "value": self.value.hex()}


@dataclass(frozen=True)
class LogLayout:
    """Offset arithmetic for one-sided access to a LogRegion."""
    capacity: int
    value_size: int = 64

    header_size: int = HEADER.size
    min_proposal_offset: int = 0
    fuo_offset: int = 8

    @property
    def slot_width(self) -> int:
        return SLOT_PREFIX.size + self.value_size + 1

    @property
    def region_size(self) -> int:
        return self.header_size + self.capacity * self.slot_width

    def slot_span(self, index: int) -> tuple[int, int]:
        """(byte offset, length) of logical index ``index``."""
        return self.header_size + (index % self.capacity) * self.slot_width, self.slot_width

    def canary_offset(self, index: int) -> int:
        offset, width = self.slot_span(index)
        return offset + width - 1

    def spans(self, lo: int, hi: int) -> list[tuple[int, int, int]]:
        """
        Contiguous physical runs covering logical [lo, hi).

        Returns (first logical index, slot count, byte offset) per run; at most two runs
        since a range never exceeds capacity.
        """
        if hi - lo > self.capacity:
            raise ValueError(f"range [{lo}, {hi}) exceeds capacity {self.capacity}")
        runs = []
        index = lo
        while index < hi:
            physical = index % self.capacity
            count = min(hi - index, self.capacity - physical)
            runs.append((index, count, self.header_size + physical * self.slot_width))
            index += count
        return runs

    def encode_slot(self, proposal: int, value: bytes) -> bytes:
        if len(value) > self.value_size:
            raise SlotValueError(f"value of {len(value)} bytes exceeds slot payload {self.value_size}")
        if proposal <= 0:
            raise SlotValueError("proposal numbers start at 1; (0, empty) is the empty slot")
        return (
            SLOT_PREFIX.pack(proposal, len(value))
            + value.ljust(self.value_size, b"\x00")
            + bytes([CANARY])
        )

    def decode_slot(self, image: bytes) -> Entry | None:
        """Decode a slot image; None when the canary is unset."""
        if len(image) != self.slot_width or image[-1] == 0:
            return None
        proposal, length = SLOT_PREFIX.unpack_from(image, 0)
        length = min(length, self.value_size)
        start = SLOT_PREFIX.size
        return Entry(proposal, bytes(image[start:start + length]))

    def decode_run(self, data: bytes) -> list[Entry | None]:
        width = self.slot_width
        return [self.decode_slot(data[i:i + width]) for i in range(0, len(data) - width + 1, width)]


@dataclass(frozen=True)
class BackgroundLayout:
    """Offsets inside a BackgroundRegion for a cluster of n replicas."""
    n: int

    heartbeat_offset: int = 0

    def request_offset(self, requester: int) -> int:
        return 8 + requester

    def ack_offset(self, granter: int) -> int:
        return 8 + self.n + granter

    @property
    def log_head_offset(self) -> int:
        return 8 + 2 * self.n

    @property
    def recycled_offset(self) -> int:
        return self.log_head_offset + 8

    @property
    def region_size(self) -> int:
        return self.recycled_offset + 8


def encode_slot(layout: LogLayout, proposal: int, value: bytes) -> bytes:
    return layout.encode_slot(proposal, value)


def decode_slot(layout: LogLayout, image: bytes) -> Entry | None:
    return layout.decode_slot(image)


def slot_span(layout: LogLayout, index: int) -> tuple[int, int]:
    return layout.slot_span(index)


class ConsensusLog:
    """
    Read view over one replica's LogRegion and BackgroundRegion bytes.

    Writes go through the fabric so they are traced; this class only decodes.
    """

    def __init__(self, layout: LogLayout, bg_layout: BackgroundLayout, log_mem: bytearray, bg_mem: bytearray):
        self.layout = layout
        self.bg_layout = bg_layout
        self._log = log_mem
        self._bg = bg_mem

    @property
    def capacity(self) -> int:
        return self.layout.capacity

    @property
    def min_proposal(self) -> int:
        return HEADER.unpack_from(self._log, 0)[0]

    @property
    def fuo(self) -> int:
        return HEADER.unpack_from(self._log, 0)[1]

    @property
    def log_head(self) -> int:
        return U64.unpack_from(self._bg, self.bg_layout.log_head_offset)[0]

    @property
    def recycled_below(self) -> int:
        return U64.unpack_from(self._bg, self.bg_layout.recycled_offset)[0]

    @property
    def window_end(self) -> int:
        """First logical index whose physical slot may still hold a recycled entry."""
        return self.recycled_below + self.capacity - 1

    def slot(self, index: int) -> Entry | None:
        offset, width = self.layout.slot_span(index)
        return self.layout.decode_slot(bytes(self._log[offset:offset + width]))

    def raw_range(self, lo: int, hi: int) -> list[tuple[int, bytes]]:
        """Raw bytes per physical run of logical [lo, hi)."""
        out = []
        for first, count, offset in self.layout.spans(lo, hi):
            out.append((first, bytes(self._log[offset:offset + count * self.layout.slot_width])))
        return out

    def to_dict(self) -> dict:
        return {
            "min_proposal": self.min_proposal,
            "fuo": self.fuo,
            "log_head": self.log_head,
            "recycled_below": self.recycled_below,
            "capacity": self.capacity,
        }


def scan_highest_nonempty(log: ConsensusLog) -> int | None:
    """Highest logical index in the live window [logHead, ...) that decodes non-empty."""
    start = log.log_head
    end = min(start + log.capacity, log.window_end)
    for index in range(end - 1, start - 1, -1):
        if log.slot(index) is not None:
            return index
    return None


__all__ = [
    "BackgroundLayout",
    "ConsensusLog",
    "Entry",
    "LogLayout",
    "SlotValueError",
    "U64",
    "decode_slot",
    "encode_slot",
    "scan_highest_nonempty",
    "slot_span",
]
