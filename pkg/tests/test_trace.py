"""Trace line format."""

import io

import pytest

from permsmr.trace import TraceEvent, TraceFormatError, TraceRecorder, parse_trace


def test_record_and_parse_back():
    stream = io.StringIO()
    trace = TraceRecorder(stream)
    trace.record(3, 1, "deliver", req=4, data=b"\x01\xff", last=True, holder=None)
    (event,) = parse_trace(stream.getvalue())
    assert event == trace.events[0]
    assert event.get("data") == "01ff"
    assert event.get("last") == "1"
    assert event.number("holder") == -1
    assert event.number("req") == 4


def test_truncated_final_record():
    text = "0|0|meta|n=3\n5|1|commit|index=0"
    with pytest.raises(TraceFormatError) as info:
        parse_trace(text)
    assert info.value.line_no == 2


def test_bad_line():
    with pytest.raises(TraceFormatError) as info:
        parse_trace("0|0|meta|n=3\nx|0|commit\n")
    assert info.value.line_no == 2
    with pytest.raises(TraceFormatError):
        TraceEvent.from_line("1|0|commit|index")


def test_empty_trace():
    assert parse_trace("") == []


def test_digest_depends_on_content():
    a, b = TraceRecorder(), TraceRecorder()
    a.record(1, 0, "timer", tag="wake:heartbeat")
    b.record(1, 0, "timer", tag="wake:election")
    assert a.digest() != b.digest()
