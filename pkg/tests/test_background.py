"""Pull-score failure detection, leader election and the permission worker."""

import pytest
from conftest import drain, make_cluster, make_settings, run_task, step, steady_scenario

from permsmr.background import PeerStatus, ScoreEntry, update_score
from permsmr.checkers import all_passed, check_exclusivity_solo
from permsmr.fabric import Fabric, RegionKind
from permsmr.harness import Fault, FaultAction, check_run
from permsmr.replica import Replica


@pytest.mark.parametrize(
    "entry, read, score, status",
    [
        (ScoreEntry(0, 15, 3), 4, 15, PeerStatus.ALIVE),
        (ScoreEntry(0, 15, 3), 3, 14, PeerStatus.ALIVE),
        (ScoreEntry(0, 2, 3), 3, 1, PeerStatus.SUSPECTED),
        (ScoreEntry(0, 6, 3, PeerStatus.SUSPECTED), 4, 7, PeerStatus.ALIVE),
        (ScoreEntry(0, 5, 3, PeerStatus.SUSPECTED), 4, 6, PeerStatus.SUSPECTED),
        (ScoreEntry(0, 0, 3, PeerStatus.SUSPECTED), None, 0, PeerStatus.SUSPECTED),
    ],
)
def test_update_score(entry, read, score, status):
    after = update_score(entry, read, make_settings())
    assert after.score == score
    assert after.status is status


def test_failed_read_keeps_last_counter():
    after = update_score(ScoreEntry(1, 10, 42), None, make_settings())
    assert after.score == 9
    assert after.last_counter == 42


def test_detection_takes_score_drop_reads():
    settings = make_settings()
    entry = ScoreEntry(0, settings.initial_score, 1)
    reads = 0
    while entry.alive:
        entry = update_score(entry, 1, settings)
        reads += 1
    assert reads == settings.initial_score - settings.fail_threshold + 1
    assert reads * settings.t_scan <= settings.detection_bound


def test_leader_is_lowest_live_id():
    settings = make_settings(n=3)
    replica = Replica(2, settings, Fabric(settings))
    plane = replica.background
    assert plane.current_leader() == 0
    plane.scores[0] = ScoreEntry(0, 0, None, PeerStatus.SUSPECTED)
    assert plane.current_leader() == 1
    plane.scores[1] = ScoreEntry(1, 0, None, PeerStatus.SUSPECTED)
    assert plane.current_leader() == 2


def test_heartbeat_counter_increments():
    settings = make_settings(n=3)
    replica = Replica(1, settings, Fabric(settings))
    assert replica.background.counter == 0
    replica.background.heartbeat_tick()
    assert replica.background.heartbeat_tick() == 2


def test_paused_leader_is_replaced():
    scenario = steady_scenario()
    scenario.faults.append(Fault(200, FaultAction.PAUSE, 0, duration=300))
    events, stats, verdicts = check_run(scenario)
    after = [e for e in events if e.time >= 200]
    assert any(e.kind == "suspect" and e.replica == 1 and e.number("peer") == 0 for e in after)
    assert any(e.kind == "role" and e.replica == 1 and e.get("role") == "leader" for e in after)
    assert stats.leader_changes >= 1
    assert all_passed(verdicts), [v for v in verdicts if not v.passed]


def test_new_leader_takes_every_follower_log():
    scenario = steady_scenario()
    scenario.faults.append(Fault(200, FaultAction.CRASH, 0))
    events, _, verdicts = check_run(scenario)
    grants = {(e.number("target"), e.number("requester")) for e in events if e.kind == "perm" and e.get("action") == "grant"}
    assert (2, 1) in grants
    assert all_passed(verdicts)


def test_pending_requests_lists_raised_flags():
    settings = make_settings(n=3)
    replica = Replica(0, settings, Fabric(settings))
    layout = replica.bg_layout
    replica.fabric.local_write(0, RegionKind.BACKGROUND, layout.request_offset(2), b"\x01")
    assert replica.background.pending_requests() == [2]


def test_update_score_needs_settings():
    with pytest.raises(TypeError):
        update_score(ScoreEntry(0, 15, 3), 4)


def _request(replicas, requester: int, target: int) -> None:
    layout = replicas[0].bg_layout
    replicas[0].fabric.post_write(
        requester, target, RegionKind.BACKGROUND, layout.request_offset(requester), b"\x01", request_permission=True,
    )


def test_worker_serves_the_lowest_requester_first():
    replicas = make_cluster(3)
    _request(replicas, 2, 0)
    _request(replicas, 1, 0)
    drain(replicas[0].fabric)
    worker = replicas[0].background
    assert worker.pending_requests() == [1, 2]

    served = run_task(replicas, worker.permission_worker_step())
    assert [q for q, _ in served] == [1]
    assert replicas[0].fabric.holder(0) == 1
    assert worker.pending_requests() == [2]

    served = run_task(replicas, worker.permission_worker_step())
    assert [q for q, _ in served] == [2]
    assert replicas[0].fabric.holder(0) == 2


def test_repeated_request_during_a_revoke_is_granted_again():
    replicas = make_cluster(3, perm_preset="slow")
    fabric = replicas[0].fabric
    _request(replicas, 1, 0)
    drain(fabric)
    worker = replicas[0].background
    process = fabric.env.process(worker.permission_worker_step())
    fabric.settle()
    assert worker.pending_requests() == []
    _request(replicas, 1, 0)
    while process.is_alive:
        step(replicas)
    assert fabric.tokens(0, 1) == 1
    assert worker.pending_requests() == [1]

    run_task(replicas, worker.permission_worker_step())
    assert fabric.tokens(0, 1) == 0
    assert fabric.holder(0) == 1
    events = fabric.trace.events
    assert not any(e.kind == "violation" for e in events)
    assert check_exclusivity_solo(events).passed


def test_short_pause_keeps_the_leader():
    settings = make_settings()
    scenario = steady_scenario()
    scenario.faults.append(Fault(200, FaultAction.PAUSE, 0, duration=settings.detection_bound // 3))
    events, stats, verdicts = check_run(scenario)
    assert not any(e.kind == "suspect" for e in events)
    assert stats.leader_changes == 0
    assert stats.ops_completed == stats.ops_invoked
    assert all_passed(verdicts)


def test_delay_spike_raises_no_suspicion():
    scenario = steady_scenario()
    scenario.faults.append(Fault(200, FaultAction.DELAY, 1, duration=80, amount=20, peer=0))
    scenario.faults.append(Fault(200, FaultAction.DELAY, 2, duration=80, amount=20, peer=0))
    events, stats, verdicts = check_run(scenario)
    assert not any(e.kind == "suspect" for e in events)
    assert stats.leader_changes == 0
    assert all_passed(verdicts)
