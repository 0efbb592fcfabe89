"""Fabric: one-sided access, FIFO pairs, permissions, event ordering."""

import pytest

from conftest import drain, make_fabric, make_settings

from permsmr.config import ConfigurationError
from permsmr.fabric import (
    EventKind,
    Fabric,
    PairStatus,
    PermissionAction,
    PermissionOutcome,
    Plane,
    RegionKind,
    SimulationComplete,
    Status,
)


def _grant(fabric: Fabric, target: int, requester: int) -> None:
    """Mint a token with a permission request, then grant and let it land."""
    fabric.post_write(requester, target, RegionKind.BACKGROUND, 8, b"\x01", request_permission=True)
    drain(fabric)
    assert fabric.set_write_permission(target, PermissionAction.grant(requester)).ok
    drain(fabric)


def test_register_region_zeroed():
    fabric = Fabric(make_settings())
    region = fabric.register_region(0, RegionKind.LOG, 4096)
    assert region.owner == 0 and region.kind is RegionKind.LOG
    assert fabric.memory(0, RegionKind.LOG) == bytearray(4096)


def test_register_region_twice_fails():
    fabric = Fabric(make_settings())
    fabric.register_region(0, RegionKind.LOG, 4096)
    with pytest.raises(ConfigurationError):
        fabric.register_region(0, RegionKind.LOG, 4096)


def test_background_write_then_read():
    fabric = make_fabric()
    fabric.post_write(1, 0, RegionKind.BACKGROUND, 0, b"\x01\x02\x03")
    drain(fabric)
    fabric.post_read(2, 0, RegionKind.BACKGROUND, 0, 3)
    drain(fabric)
    assert [wc.status for wc in fabric.poll_completions(1)] == [Status.OK]
    (read,) = fabric.poll_completions(2)
    assert read.payload == b"\x01\x02\x03"


def test_read_of_zeroed_region():
    fabric = make_fabric()
    fabric.post_read(1, 0, RegionKind.LOG, 16, 8)
    drain(fabric)
    assert fabric.poll_completions(1)[0].payload == bytes(8)


def test_poll_with_nothing_completed():
    fabric = make_fabric()
    assert fabric.poll_completions(0) == []


def test_log_write_without_permission_is_denied():
    fabric = make_fabric()
    fabric.post_write(2, 0, RegionKind.LOG, 16, b"\x07")
    drain(fabric)
    (wc,) = fabric.poll_completions(2)
    assert wc.status is Status.PERMISSION_DENIED
    assert fabric.pair(2, 0, Plane.REPLICATION).status is PairStatus.ERROR
    assert fabric.memory(0, RegionKind.LOG)[16] == 0


def test_errored_pair_drains_in_fifo_order():
    fabric = make_fabric()
    ids = [fabric.post_write(1, 0, RegionKind.LOG, 16 + i, b"\x01") for i in range(3)]
    drain(fabric)
    completions = fabric.poll_completions(1)
    assert [wc.request_id for wc in completions] == ids
    assert all(wc.status is Status.PERMISSION_DENIED for wc in completions)


def test_fifo_order_on_one_pair():
    fabric = make_fabric(repl_jitter=0)
    _grant(fabric, 0, 1)
    fabric.post_write(1, 0, RegionKind.LOG, 16, b"\x01")
    fabric.post_write(1, 0, RegionKind.LOG, 16, b"\x02")
    drain(fabric)
    assert fabric.memory(0, RegionKind.LOG)[16] == 2


def test_revoke_then_grant_moves_the_holder():
    fabric = make_fabric()
    _grant(fabric, 0, 1)
    assert fabric.holder(0) == 1
    revoke = fabric.set_write_permission(0, PermissionAction.revoke())
    drain(fabric)
    assert revoke.ok and fabric.holder(0) is None
    _grant(fabric, 0, 2)
    assert fabric.holder(0) == 2

    fabric.poll_completions(1)
    fabric.post_write(1, 0, RegionKind.LOG, 16, b"\x09")
    drain(fabric)
    assert fabric.poll_completions(1)[0].status is Status.PERMISSION_DENIED


def test_grant_consumes_the_token():
    fabric = make_fabric()
    _grant(fabric, 0, 2)
    assert fabric.tokens(0, 2) == 0
    second = fabric.set_write_permission(0, PermissionAction.grant(2))
    assert second.outcome is PermissionOutcome.VIOLATION
    assert any(e.kind == "violation" for e in fabric.trace.events)


def test_grant_without_request_is_a_violation():
    fabric = make_fabric()
    assert fabric.set_write_permission(0, PermissionAction.grant(1)).outcome is PermissionOutcome.VIOLATION
    assert fabric.holder(0) is None


def test_revoke_with_no_holder():
    fabric = make_fabric()
    assert fabric.set_write_permission(0, PermissionAction.revoke()).ok
    drain(fabric)
    assert fabric.holder(0) is None


def test_permission_change_takes_l_perm():
    fabric = make_fabric(perm_preset="slow")
    result = fabric.set_write_permission(0, PermissionAction.revoke())
    (event,) = drain(fabric)
    assert event.kind is EventKind.PERMISSION
    assert event.change.id == result.change_id
    assert event.time == 50


def test_completions_ordered_by_time():
    fabric = make_fabric(n=4, bg_jitter=0)
    fabric.add_delay(0, 1, 3)
    fabric.add_delay(0, 3, 7)
    for target in (1, 2, 3):
        fabric.post_write(0, target, RegionKind.BACKGROUND, 0, b"\x01")
    times = [event.time for event in drain(fabric)]
    assert times == [2, 5, 9]
    assert [wc.target for wc in fabric.poll_completions(0)] == [2, 1, 3]


def test_crashed_target():
    fabric = make_fabric()
    fabric.crash(1)
    fabric.post_read(0, 1, RegionKind.BACKGROUND, 0, 8)
    (event,) = drain(fabric)
    assert event.time == fabric.settings.t_conn
    assert event.completion.status is Status.TARGET_CRASHED


def test_torn_write_applies_in_chunks():
    fabric = make_fabric(torn_writes=True, chunk_size=8, bg_jitter=0)
    payload = bytes(range(1, 17))
    fabric.post_write(1, 0, RegionKind.BACKGROUND, 0, payload)
    first = fabric.advance()
    assert first.completion is None
    memory = fabric.memory(0, RegionKind.BACKGROUND)
    assert memory[:8] == payload[:8]
    assert memory[15] == 0
    second = fabric.advance()
    assert second.completion.ok
    assert memory[:16] == payload


def test_equal_time_ties_by_replica_then_kind():
    fabric = make_fabric(bg_jitter=0)
    fabric.schedule_timer(2, 1, "late")
    fabric.schedule_timer(2, 0, "timer")
    fabric.post_write(0, 2, RegionKind.BACKGROUND, 0, b"\x01")
    events = drain(fabric)
    assert [(e.replica, e.kind) for e in events] == [
        (0, EventKind.DELIVERY),
        (0, EventKind.TIMER),
        (1, EventKind.TIMER),
    ]


def test_advance_with_nothing_pending():
    fabric = make_fabric()
    with pytest.raises(SimulationComplete):
        fabric.advance()


def test_advance_stops_at_horizon():
    fabric = make_fabric()
    fabric.schedule_timer(20, 0, "later")
    with pytest.raises(SimulationComplete):
        fabric.advance(until=10)
    assert fabric.pending_events == 1
    assert fabric.advance().time == 20


def test_same_seed_same_trace():
    def run(seed: int) -> str:
        fabric = make_fabric(seed=seed)
        for target in range(3):
            fabric.post_write(0, target, RegionKind.BACKGROUND, 0, b"\x05")
            fabric.post_read(1, target, RegionKind.BACKGROUND, 0, 1)
        drain(fabric)
        return fabric.trace.text()

    assert run(3) == run(3)
