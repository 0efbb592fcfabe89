"""Checker suite: clean runs pass, doctored traces fail the matching checker."""

import pytest

from permsmr.checkers import (
    Verdict,
    WindowTooLarge,
    check_agreement_validity,
    check_decided_committed,
    check_exclusivity_solo,
    check_linearizability,
    check_log_no_holes,
    doctor_trace,
    run_all,
)
from permsmr.config import ConfigurationError
from permsmr.trace import TraceEvent


def _invoke(op: int, kind: str, key: str, value: str = "") -> TraceEvent:
    return TraceEvent(0, 3, "invoke", {"op": str(op), "kind": kind, "key": key, "value": value, "payload": ""})


def _response(op: int, value: str = "", found: bool = False) -> TraceEvent:
    return TraceEvent(0, 0, "response", {"op": str(op), "value": value, "found": "1" if found else "0"})


def test_clean_run_passes_every_check(steady_run):
    events, _, verdicts = steady_run
    assert [v.name for v in verdicts] == [
        "agreement_validity", "decided_committed", "exclusivity_solo", "no_holes", "linearizability",
    ]
    assert all(v.passed for v in verdicts)


@pytest.mark.parametrize(
    "kind, check, name",
    [
        ("agreement", check_agreement_validity, "agreement_validity"),
        ("decided", check_decided_committed, "decided_committed"),
        ("exclusivity", check_exclusivity_solo, "exclusivity_solo"),
        ("solo", check_exclusivity_solo, "exclusivity_solo"),
        ("linearizability", check_linearizability, "linearizability"),
    ],
)
def test_doctored_trace_is_caught(steady_run, kind, check, name):
    events, _, _ = steady_run
    doctored = doctor_trace(events, kind)
    assert len(doctored) >= len(events)
    verdict = check(doctored)
    assert not verdict.passed
    assert verdict.name == name
    assert verdict.time is not None
    failed = [v.name for v in run_all(doctored) if not v.passed]
    assert name in failed


def test_doctoring_leaves_the_input_alone(steady_run):
    events, _, _ = steady_run
    before = list(events)
    doctor_trace(events, "linearizability")
    assert events == before


def test_doctor_needs_something_to_forge():
    with pytest.raises(ConfigurationError):
        doctor_trace([], "agreement")
    with pytest.raises(ConfigurationError):
        doctor_trace([], "bogus")


def test_empty_trace_passes_vacuously():
    assert all(v.passed for v in run_all([]))


def test_log_no_holes():
    assert check_log_no_holes([True, True, True, False]).passed
    verdict = check_log_no_holes([True, True, False, True])
    assert not verdict.passed
    assert verdict.witness == {"index": 3, "hole": 2}
    assert check_log_no_holes([True, False], floor=8).passed


def test_sequential_history_is_linearizable():
    events = [
        _invoke(1, "put", "a", "x"), _response(1),
        _invoke(2, "get", "a"), _response(2, "x", True),
        _invoke(3, "put", "a", "y"), _response(3, "x", True),
        _invoke(4, "get", "b"), _response(4),
    ]
    assert check_linearizability(events).passed


def test_stale_read_is_not_linearizable():
    events = [
        _invoke(1, "put", "a", "x"), _response(1),
        _invoke(2, "put", "a", "y"), _response(2, "x", True),
        _invoke(3, "get", "a"), _response(3, "x", True),
    ]
    verdict = check_linearizability(events)
    assert not verdict.passed
    assert verdict.witness["key"] == "a"


def test_concurrent_ops_may_take_either_order():
    events = [
        _invoke(1, "put", "a", "x"),
        _invoke(2, "get", "a"),
        _response(2),
        _response(1),
    ]
    assert check_linearizability(events).passed


def test_pending_put_may_or_may_not_take_effect():
    events = [
        _invoke(1, "put", "a", "x"),
        _invoke(2, "get", "a"), _response(2, "x", True),
    ]
    assert check_linearizability(events).passed


def test_window_cap_refuses():
    events = [_invoke(1, "put", "a", "x"), _invoke(2, "put", "a", "y"), _response(1), _response(2, "x", True)]
    with pytest.raises(WindowTooLarge):
        check_linearizability(events, max_window=1)
    linearizability = run_all(events, max_window=1)[-1]
    assert linearizability.refused and linearizability.passed


def test_completeness_only_when_asked():
    events = [_invoke(1, "put", "a", "x")]
    assert [v.name for v in run_all(events)][-1] == "linearizability"
    completeness = run_all(events, require_completion=True)[-1]
    assert completeness.name == "client_completeness"
    assert not completeness.passed


def test_verdict_line_is_a_trace_record():
    line = Verdict.fail("x", 12, "a|b=c", index=4).to_line()
    event = TraceEvent.from_line(line)
    assert event.kind == "verdict"
    assert event.time == 12
    assert event.get("passed") == "0"
    assert event.get("index") == "4"
