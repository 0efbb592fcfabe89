"""Slot codec, offsets and the highest-entry scan."""

import pytest

from permsmr.consensus_log import (
    U64,
    BackgroundLayout,
    ConsensusLog,
    Entry,
    LogLayout,
    SlotValueError,
    scan_highest_nonempty,
)


def _log(capacity: int = 8, n: int = 3) -> ConsensusLog:
    layout = LogLayout(capacity, value_size=16)
    bg = BackgroundLayout(n)
    return ConsensusLog(layout, bg, bytearray(layout.region_size), bytearray(bg.region_size))


def _fill(log: ConsensusLog, index: int, value: bytes = b"v", proposal: int = 1) -> None:
    offset, width = log.layout.slot_span(index)
    log._log[offset:offset + width] = log.layout.encode_slot(proposal, value)


def test_encode_decode():
    layout = LogLayout(8, value_size=16)
    image = layout.encode_slot(7, b"ab")
    assert len(image) == layout.slot_width
    assert image[-1] == 1
    assert layout.decode_slot(image) == Entry(7, b"ab")


def test_full_width_value():
    layout = LogLayout(8, value_size=16)
    assert len(layout.encode_slot(3, b"x" * 16)) == layout.slot_width


def test_rejects_oversize_and_zero_proposal():
    layout = LogLayout(8, value_size=4)
    with pytest.raises(SlotValueError):
        layout.encode_slot(1, b"12345")
    with pytest.raises(SlotValueError):
        layout.encode_slot(0, b"")


def test_empty_and_torn_images_decode_empty():
    layout = LogLayout(8, value_size=16)
    assert layout.decode_slot(bytes(layout.slot_width)) is None
    torn = bytearray(layout.encode_slot(7, b"ab"))
    torn[-1] = 0
    assert layout.decode_slot(bytes(torn)) is None


def test_decode_tolerates_garbage_length():
    layout = LogLayout(8, value_size=4)
    image = bytearray(layout.slot_width)
    U64.pack_into(image, 0, 5)
    image[8:10] = b"\xff\xff"
    image[-1] = 1
    assert layout.decode_slot(bytes(image)).proposal == 5


def test_slot_span():
    layout = LogLayout(8, value_size=16)
    assert layout.slot_span(0) == (layout.header_size, layout.slot_width)
    assert layout.slot_span(8) == layout.slot_span(0)
    assert layout.slot_span(3)[0] == layout.header_size + 3 * layout.slot_width


def test_spans_split_at_the_wrap():
    layout = LogLayout(8, value_size=16)
    assert layout.spans(6, 10) == [
        (6, 2, layout.header_size + 6 * layout.slot_width),
        (8, 2, layout.header_size),
    ]
    with pytest.raises(ValueError):
        layout.spans(0, 9)


def test_background_offsets():
    bg = BackgroundLayout(3)
    assert bg.request_offset(2) == 10
    assert bg.ack_offset(0) == 11
    assert bg.log_head_offset == 14
    assert bg.region_size == 30


def test_scan_highest_nonempty():
    log = _log()
    assert scan_highest_nonempty(log) is None
    for index in range(3):
        _fill(log, index)
    assert scan_highest_nonempty(log) == 2


def test_scan_after_recycling():
    log = _log()
    for index in range(3, 6):
        _fill(log, index)
    U64.pack_into(log._bg, log.bg_layout.log_head_offset, 3)
    U64.pack_into(log._bg, log.bg_layout.recycled_offset, 3)
    assert log.window_end == 10
    assert scan_highest_nonempty(log) == 5
