"""Shared builders for the permsmr tests."""

from __future__ import annotations

import pytest

from permsmr.config import Settings
from permsmr.fabric import EventKind, Fabric, FabricEvent, PermissionAction, RegionKind, SimulationComplete
from permsmr.harness import Scenario, WorkloadOp, check_run
from permsmr.kv import ClientOp, OpKind
from permsmr.replica import Replica, TaskGen


def make_settings(**overrides) -> Settings:
    """Defaults without reading the environment or a .env file."""
    return Settings(_env_file=None).with_overrides(**overrides)


def make_fabric(n: int = 3, log_size: int = 256, bg_size: int = 64, **overrides) -> Fabric:
    fabric = Fabric(make_settings(n=n, **overrides))
    for replica in range(n):
        fabric.register_region(replica, RegionKind.LOG, log_size)
        fabric.register_region(replica, RegionKind.BACKGROUND, bg_size)
    return fabric


def drain(fabric: Fabric, until: int | None = None) -> list:
    """Advance until nothing is left; returns the processed events."""
    events = []
    while True:
        try:
            events.append(fabric.advance(until=until))
        except SimulationComplete:
            return events


def make_cluster(n: int = 3, **overrides) -> list[Replica]:
    """Replicas sharing one fabric, with no tasks running."""
    settings = make_settings(n=n, **overrides)
    fabric = Fabric(settings)
    return [Replica(i, settings, fabric) for i in range(n)]


def grant_all(replicas: list[Replica], leader: int) -> None:
    """Make ``leader`` the write-permission holder of every log through real requests."""
    fabric = replicas[0].fabric
    layout = replicas[0].bg_layout
    for q in range(len(replicas)):
        fabric.post_write(leader, q, RegionKind.BACKGROUND, layout.request_offset(leader), b"\x01", request_permission=True)
    drain(fabric)
    for q in range(len(replicas)):
        fabric.local_write(q, RegionKind.BACKGROUND, layout.request_offset(leader), b"\x00")
        assert fabric.set_write_permission(q, PermissionAction.grant(leader)).ok
    drain(fabric)
    fabric.poll_completions(leader)


def step(replicas: list[Replica]) -> FabricEvent:
    """One harness step: the next fabric event, its replica's dispatch, then the wake-ups."""
    fabric = replicas[0].fabric
    event = fabric.advance()
    if event.replica < len(replicas) and (event.kind is not EventKind.DELIVERY or event.completion is not None):
        replicas[event.replica].handle(event)
    fabric.settle()
    return event


def run_task(replicas: list[Replica], gen: TaskGen):
    """Run one protocol generator to completion and return its value."""
    fabric = replicas[0].fabric
    process = fabric.env.process(gen)
    fabric.settle()
    while process.is_alive:
        step(replicas)
    return process.value


def fill(replica: Replica, index: int, value: bytes | None = None, proposal: int = 1) -> bytes:
    """Write a decided-looking slot straight into a replica's log."""
    if value is None:
        value = ClientOp(index + 1, OpKind.PUT, "k", str(index)).payload
    offset, _ = replica.layout.slot_span(index)
    replica.fabric.local_write(replica.id, RegionKind.LOG, offset, replica.layout.encode_slot(proposal, value))
    return value


def puts(start: int, stop: int, step: int, keys: str = "ab") -> list[WorkloadOp]:
    return [
        WorkloadOp(t, OpKind.PUT, keys[i % len(keys)], f"v{i}")
        for i, t in enumerate(range(start, stop, step))
    ]


def steady_scenario(**overrides) -> Scenario:
    """Fault-free three-replica run with a steady trickle of puts and a few gets."""
    settings = make_settings(**{"n": 3, "seed": 7, "horizon": 700, "perm_preset": "fast", **overrides})
    workload = puts(40, 500, 6)
    workload += [WorkloadOp(t, OpKind.GET, "a") for t in range(43, 500, 30)]
    return Scenario(name="steady", settings=settings, workload=sorted(workload, key=lambda op: op.time))


@pytest.fixture
def settings() -> Settings:
    return make_settings()


@pytest.fixture(scope="session")
def steady_run():
    """(events, stats, verdicts) of one fault-free run, shared by the checker tests."""
    return check_run(steady_scenario())
