"""
Scenario runner.

Builds a cluster on the simulated fabric, drives it one event at a time, injects faults,
plays the client workload and records the trace. Also holds the scenario file format, random
scenario generators for seed sweeps and the fail-over analysis.

Scenario file (one item per line, ``#`` starts a comment):

    n = 3                        any Settings field
    fault = 120,crash,0
    fault = 200,pause,1,60
    fault = 50,delay,0-2,15[,duration]
    fault = 80,perm,1,40[,duration]
    op = 10,put,a,1
    op = 12,get,a
    doctor = agreement           negative control, see checkers.doctor_trace
"""

from __future__ import annotations

import logging
import random
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import IO, Any

from pydantic import BaseModel, ConfigDict, Field

from .checkers import DOCTOR_KINDS, Verdict, doctor_trace, measure_round_complexity, run_all
from .config import ConfigurationError, PermissionPreset, Settings, get_settings
from .consensus_log import LogLayout
from .fabric import EventKind, Fabric, FabricEvent, SimulationComplete
from .kv import ClientOp, KVResponse, OpKind
from .replica import Replica
from .trace import TraceEvent, TraceRecorder

logger = logging.getLogger(__name__)


class ScenarioError(ConfigurationError):
    """Malformed scenario file or plan."""
    def __init__(self, message: str, line_no: int | None = None, field: str | None = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message, field)


class RunComplete(Exception):
    """The run reached its horizon."""
    def __init__(self, message: str = "horizon reached"):
        self.message = message
        super().__init__(message)


class FaultAction(str, Enum):
    CRASH = "crash"
    PAUSE = "pause"
    RESUME = "resume"
    DELAY = "delay"
    PERM = "perm"


@dataclass(frozen=True)
class Fault:
    """
    A scheduled fault.

    ``pause`` uses ``duration``; ``delay`` adds ``amount`` ticks to the target->peer pair and
    ``perm`` adds ``amount`` ticks to permission changes on the target, both for ``duration``
    ticks when it is non-zero.
    """
    time: int
    action: FaultAction
    target: int
    duration: int = 0
    amount: int = 0
    peer: int | None = None

    def to_line(self) -> str:
        target = f"{self.target}-{self.peer}" if self.action is FaultAction.DELAY else str(self.target)
        parts = [str(self.time), self.action.value, target]
        if self.action is FaultAction.PAUSE:
            parts.append(str(self.duration))
        elif self.action in (FaultAction.DELAY, FaultAction.PERM):
            parts.append(str(self.amount))
            if self.duration:
                parts.append(str(self.duration))
        return ",".join(parts)

    def to_dict(self) -> dict:
        return {
            "time": self.time,
            "action": self.action.value,
            "target": self.target,
            "duration": self.duration,
            "amount": self.amount,
            "peer": self.peer,
        }


@dataclass(frozen=True)
class WorkloadOp:
    time: int
    kind: OpKind
    key: str
    value: str = ""

    def to_line(self) -> str:
        parts = [str(self.time), self.kind.value, self.key]
        if self.kind is OpKind.PUT:
            parts.append(self.value)
        return ",".join(parts)


class Scenario(BaseModel):
    """Settings plus fault plan plus client workload."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    name: str = "scenario"
    settings: Settings = Field(default_factory=get_settings)
    faults: list[Fault] = Field(default_factory=list)
    workload: list[WorkloadOp] = Field(default_factory=list)
    doctor: str | None = None

    def check(self) -> None:
        s = self.settings
        for f in self.faults:
            if not 0 <= f.time <= s.horizon:
                raise ScenarioError(f"fault at {f.time} outside [0, {s.horizon}]", field="fault")
            for target in (f.target, f.peer):
                if target is not None and not 0 <= target < s.n:
                    raise ScenarioError(f"unknown fault target {target} for n={s.n}", field="fault")
            if f.action is FaultAction.PAUSE and f.duration <= 0:
                raise ScenarioError("pause needs a positive duration", field="fault")
        widest = len(str(len(self.workload) + 1))
        for op in self.workload:
            if op.time < 0:
                raise ScenarioError(f"op at negative time {op.time}", field="op")
            if "|" in op.key or "|" in op.value or "," in op.key:
                raise ScenarioError(f"op key/value may not contain '|' or ',': {op.key!r}", field="op")
            size = len(ClientOp(10 ** widest, op.kind, op.key, op.value).payload)
            if size > s.value_size:
                raise ScenarioError(f"op payload of {size} bytes exceeds value_size {s.value_size}", field="op")
        if self.doctor is not None and self.doctor not in DOCTOR_KINDS:
            raise ScenarioError(f"unknown doctor {self.doctor!r}; expected one of {sorted(DOCTOR_KINDS)}", field="doctor")

    def to_text(self) -> str:
        defaults = Settings.model_construct()
        lines = [f"name = {self.name}"]
        for key, value in self.settings.model_dump().items():
            if value != getattr(defaults, key, None) or key in ("n", "seed"):
                lines.append(f"{key} = {value.value if isinstance(value, Enum) else value}")
        lines.extend(f"fault = {f.to_line()}" for f in self.faults)
        lines.extend(f"op = {op.to_line()}" for op in self.workload)
        if self.doctor:
            lines.append(f"doctor = {self.doctor}")
        return "\n".join(lines) + "\n"


def _parse_fault(value: str, line_no: int) -> Fault:
    parts = [p.strip() for p in value.split(",")]
    if len(parts) < 3:
        raise ScenarioError("fault needs time,action,target", line_no)
    try:
        time = int(parts[0])
        action = FaultAction(parts[1])
    except ValueError as e:
        raise ScenarioError(f"bad fault {value!r}: {e}", line_no) from e
    try:
        args = [int(p) for p in parts[3:]]
        if action is FaultAction.DELAY:
            issuer, _, peer = parts[2].partition("-")
            if not peer or not args:
                raise ScenarioError("delay needs time,delay,i-j,amount[,duration]", line_no)
            return Fault(time, action, int(issuer), duration=args[1] if len(args) > 1 else 0, amount=args[0], peer=int(peer))
        target = int(parts[2])
    except ValueError as e:
        raise ScenarioError(f"bad fault {value!r}: {e}", line_no) from e
    if action is FaultAction.PAUSE:
        if len(args) != 1:
            raise ScenarioError("pause needs time,pause,target,duration", line_no)
        return Fault(time, action, target, duration=args[0])
    if action is FaultAction.PERM:
        if not args:
            raise ScenarioError("perm needs time,perm,target,amount[,duration]", line_no)
        return Fault(time, action, target, duration=args[1] if len(args) > 1 else 0, amount=args[0])
    if args:
        raise ScenarioError(f"{action.value} takes no arguments", line_no)
    return Fault(time, action, target)


def _parse_op(value: str, line_no: int) -> WorkloadOp:
    parts = [p.strip() for p in value.split(",")]
    try:
        time = int(parts[0])
        kind = OpKind(parts[1])
    except (ValueError, IndexError) as e:
        raise ScenarioError(f"bad op {value!r}: expected time,kind,key[,value]", line_no) from e
    if len(parts) < 3 or not parts[2]:
        raise ScenarioError("op needs a key", line_no)
    if kind is OpKind.PUT and len(parts) != 4:
        raise ScenarioError("put needs time,put,key,value", line_no)
    if kind is OpKind.GET and len(parts) != 3:
        raise ScenarioError("get takes time,get,key", line_no)
    return WorkloadOp(time, kind, parts[2], parts[3] if kind is OpKind.PUT else "")


def parse_scenario(text: str, base: Settings | None = None, name: str = "scenario") -> Scenario:
    """Parse scenario text. Settings keys override ``base`` with full validation."""
    base = base or get_settings()
    overrides: dict[str, str] = {}
    faults: list[Fault] = []
    workload: list[WorkloadOp] = []
    doctor = None
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ScenarioError(f"expected 'key = value', got {line!r}", line_no)
        key, value = key.strip(), value.strip()
        if key == "fault":
            faults.append(_parse_fault(value, line_no))
        elif key == "op":
            workload.append(_parse_op(value, line_no))
        elif key == "doctor":
            doctor = value
        elif key == "name":
            name = value
        elif key in Settings.model_fields:
            overrides[key] = value
        else:
            raise ScenarioError(f"unknown key {key!r}", line_no, field=key)
    try:
        settings = base.with_overrides(**overrides)
    except ConfigurationError as e:
        raise ScenarioError(e.message, field=e.field) from e
    scenario = Scenario(name=name, settings=settings, faults=faults, workload=workload, doctor=doctor)
    scenario.check()
    return scenario


def load_scenario(path: Path | str, base: Settings | None = None) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ScenarioError(f"cannot read {path}: {e}") from e
    return parse_scenario(text, base, name=path.stem)


# ── run results ──────────────────────────────────────────────


@dataclass
class ClientRecord:
    op: ClientOp
    invoked_at: int
    target: int
    attempt: int = 0
    response: KVResponse | None = None
    responded_at: int | None = None


@dataclass
class FailoverRecord:
    """
    One leader failure and how long the cluster took to commit again.

    detection: fault until the successor suspects the failed leader.
    switch: suspicion until the successor holds write permission on a confirmed majority.
    takeover: from there to the successor's first committed propose.
    """
    fault_time: int
    failed: int
    action: str
    successor: int
    suspected_at: int
    switched_at: int
    first_commit_at: int

    @property
    def detection(self) -> int:
        return self.suspected_at - self.fault_time

    @property
    def switch(self) -> int:
        return self.switched_at - self.suspected_at

    @property
    def takeover(self) -> int:
        return self.first_commit_at - self.switched_at

    @property
    def total(self) -> int:
        return self.first_commit_at - self.fault_time

    @property
    def switch_share(self) -> float:
        return self.switch / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {
            "fault_time": self.fault_time,
            "failed": self.failed,
            "action": self.action,
            "successor": self.successor,
            "suspected_at": self.suspected_at,
            "switched_at": self.switched_at,
            "first_commit_at": self.first_commit_at,
            "detection": self.detection,
            "switch": self.switch,
            "takeover": self.takeover,
            "total": self.total,
        }


@dataclass
class RunStats:
    """Summary of one run."""
    name: str
    seed: int
    n: int
    horizon: int
    steps: int = 0
    trace_digest: str = ""
    proposals: list[dict] = field(default_factory=list)
    commit_latencies: dict[int, int] = field(default_factory=dict)
    failovers: list[FailoverRecord] = field(default_factory=list)
    leader_changes: int = 0
    ops_invoked: int = 0
    ops_completed: int = 0
    final_logs: dict[int, list[tuple[int, str]]] = field(default_factory=dict)
    kv: dict[int, dict[str, str]] = field(default_factory=dict)
    crashed: list[int] = field(default_factory=list)

    @property
    def commits(self) -> int:
        return sum(1 for p in self.proposals if p["result"] == "committed")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "n": self.n,
            "horizon": self.horizon,
            "steps": self.steps,
            "trace_digest": self.trace_digest,
            "proposals": self.proposals,
            "commit_latencies": self.commit_latencies,
            "failovers": [f.to_dict() for f in self.failovers],
            "leader_changes": self.leader_changes,
            "ops_invoked": self.ops_invoked,
            "ops_completed": self.ops_completed,
            "final_logs": self.final_logs,
            "kv": self.kv,
            "crashed": self.crashed,
        }


# ── simulation ───────────────────────────────────────────────


def _tag_name(tag: Any) -> str:
    kind = tag[0]
    if kind == "wake":
        return f"wake:{tag[1].name}"
    if kind == "fault":
        return f"fault:{tag[1].action.value}"
    if kind == "invoke":
        return f"invoke:{tag[1].op_id}"
    return f"{kind}:{tag[1]}"


class Simulation:
    """
    One deterministic run of a scenario.

    Example:
        >>> sim = Simulation(parse_scenario("op = 5,put,a,1"))
        >>> stats = sim.run()
        >>> stats.ops_completed
        1
    """

    def __init__(self, scenario: Scenario, stream: IO[str] | None = None):
        scenario.check()
        self.scenario = scenario
        self.settings = s = scenario.settings
        self.trace = TraceRecorder(stream)
        self.fabric = Fabric(s, self.trace)
        self.client_id = s.n
        self.trace.record(
            0, 0, "meta",
            n=s.n, capacity=s.capacity, value_size=s.value_size, seed=s.seed, l_perm=s.permission_latency,
        )
        self.replicas = [Replica(i, s, self.fabric, clients=self) for i in range(s.n)]
        self.clients: dict[int, ClientRecord] = {}
        self.steps = 0
        self._hint = 0
        self._fuo_seen = [0] * s.n
        self._started = False
        for fault in scenario.faults:
            self.inject_fault(fault)
        for op_id, op in enumerate(scenario.workload, 1):
            client_op = ClientOp(op_id, op.kind, op.key, op.value)
            self.fabric.schedule_timer(op.time, self.client_id, ("invoke", client_op))

    @property
    def now(self) -> int:
        return self.fabric.now

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        for replica in self.replicas:
            replica.start()
        self.fabric.settle()

    # ── faults ───────────────────────────────────────────────

    def inject_fault(self, fault: Fault) -> None:
        """Schedule ``fault``; targets are checked now."""
        for target in (fault.target, fault.peer):
            if target is not None and not 0 <= target < self.settings.n:
                raise ConfigurationError(f"unknown fault target {target}", "fault")
        if fault.time < self.now:
            raise ConfigurationError(f"fault at {fault.time} is in the past (now {self.now})", "fault")
        self.fabric.schedule_timer(fault.time, fault.target, ("fault", fault))

    def _apply_fault(self, fault: Fault) -> None:
        replica = self.replicas[fault.target]
        self.trace.record(
            self.now, fault.target, "fault",
            action=fault.action.value, target=fault.target, duration=fault.duration, amount=fault.amount,
            peer=fault.peer,
        )
        logger.info("t=%d fault %s on %d", self.now, fault.action.value, fault.target)
        if fault.action is FaultAction.CRASH:
            replica.crash()
        elif fault.action is FaultAction.PAUSE:
            replica.pause()
            self.inject_fault(Fault(self.now + fault.duration, FaultAction.RESUME, fault.target))
        elif fault.action is FaultAction.RESUME:
            replica.resume()
        elif fault.action is FaultAction.DELAY:
            self.fabric.add_delay(fault.target, fault.peer, fault.amount)
            if fault.duration:
                self.inject_fault(Fault(self.now + fault.duration, FaultAction.DELAY, fault.target, amount=-fault.amount, peer=fault.peer))
        elif fault.action is FaultAction.PERM:
            self.fabric.add_permission_delay(fault.target, fault.amount)
            if fault.duration:
                self.inject_fault(Fault(self.now + fault.duration, FaultAction.PERM, fault.target, amount=-fault.amount))

    # ── clients ──────────────────────────────────────────────

    def _invoke(self, op: ClientOp) -> None:
        record = ClientRecord(op, self.now, self._hint)
        self.clients[op.op_id] = record
        self.trace.record(
            self.now, self.client_id, "invoke",
            op=op.op_id, kind=op.kind.value, key=op.key, value=op.value, payload=op.payload,
        )
        self._send(record)

    def _send(self, record: ClientRecord) -> None:
        record.attempt += 1
        self.fabric.schedule_timer(
            self.now + self.settings.client_timeout, self.client_id, ("timeout", record.op.op_id, record.attempt),
        )
        self.replicas[record.target].submit(record.op)

    def bounce(self, replica: int, op: ClientOp, hint: int) -> None:
        record = self.clients.get(op.op_id)
        if record is None or record.response is not None:
            return
        record.target = hint if hint != replica else (replica + 1) % self.settings.n
        self.fabric.schedule_timer(self.now + self.settings.client_retry, self.client_id, ("retry", op.op_id, record.attempt))

    def respond(self, replica: int, op_id: int, response: KVResponse) -> None:
        record = self.clients.get(op_id)
        if record is None or record.response is not None:
            return
        record.response = response
        record.responded_at = self.now
        self._hint = replica
        self.trace.record(
            self.now, replica, "response",
            op=op_id, kind=response.kind.value if response.kind else "", key=response.key,
            value=response.value, found=response.found,
        )

    def _client_timer(self, kind: str, op_id: int, attempt: int) -> None:
        record = self.clients[op_id]
        if record.response is not None or attempt != record.attempt:
            return
        if kind == "timeout":
            record.target = (record.target + 1) % self.settings.n
        self._send(record)

    # ── stepping ─────────────────────────────────────────────

    def schedule_step(self) -> TraceEvent:
        """Process the next event and return the trace event it produced."""
        self.start()
        mark = len(self.trace)
        try:
            event = self.fabric.advance(until=self.settings.horizon)
        except SimulationComplete as e:
            raise RunComplete(e.message) from e
        self.steps += 1
        if event.kind is EventKind.TIMER:
            self.trace.record(event.time, event.replica, "timer", tag=_tag_name(event.tag))
            self._on_timer(event)
        elif event.kind is EventKind.DELIVERY:
            if event.completion is not None and event.replica < self.settings.n:
                self.replicas[event.replica].handle(event)
        else:
            self.replicas[event.replica].handle(event)
        self.fabric.settle()
        self._watch_commits()
        return self.trace.events[mark]

    def _on_timer(self, event: FabricEvent) -> None:
        kind = event.tag[0]
        if kind == "wake":
            self.replicas[event.replica].handle(event)
        elif kind == "fault":
            self._apply_fault(event.tag[1])
        elif kind == "invoke":
            self._invoke(event.tag[1])
        elif kind in ("retry", "timeout"):
            self._client_timer(kind, event.tag[1], event.tag[2])

    def _watch_commits(self) -> None:
        for replica in self.replicas:
            if replica.crashed:
                continue
            fuo = replica.log.fuo
            seen = self._fuo_seen[replica.id]
            if fuo <= seen:
                continue
            for index in range(seen, fuo):
                entry = replica.log.slot(index)
                self.trace.record(self.now, replica.id, "commit", index=index, value=entry.value if entry else b"")
            self._fuo_seen[replica.id] = fuo

    def run(self) -> RunStats:
        while True:
            try:
                self.schedule_step()
            except RunComplete:
                break
        return self.stats()

    def stats(self) -> RunStats:
        s = self.settings
        events = self.trace.events
        completed = {op_id: r for op_id, r in self.clients.items() if r.response is not None}
        return RunStats(
            name=self.scenario.name,
            seed=s.seed,
            n=s.n,
            horizon=s.horizon,
            steps=self.steps,
            trace_digest=self.trace.digest(),
            proposals=[call.to_dict() for call in measure_round_complexity(events)],
            commit_latencies={op_id: r.responded_at - r.invoked_at for op_id, r in sorted(completed.items())},
            failovers=analyze_failovers(events, s),
            leader_changes=count_leader_changes(events, s.n),
            ops_invoked=len(self.clients),
            ops_completed=len(completed),
            final_logs={r.id: [(i, v.hex()) for i, v in r.decoded_log()] for r in self.replicas},
            kv={r.id: r.app.snapshot() for r in self.replicas},
            crashed=[r.id for r in self.replicas if r.crashed],
        )


def run_scenario(scenario: Scenario, stream: IO[str] | None = None) -> tuple[TraceRecorder, RunStats]:
    sim = Simulation(scenario, stream)
    stats = sim.run()
    return sim.trace, stats


def check_run(
    scenario: Scenario,
    stream: IO[str] | None = None,
    require_completion: bool = False,
) -> tuple[list[TraceEvent], RunStats, list[Verdict]]:
    """Run ``scenario`` and the checker suite over its trace, doctored when the scenario asks."""
    trace, stats = run_scenario(scenario, stream)
    events = trace.events
    if scenario.doctor:
        events = doctor_trace(events, scenario.doctor)
    s = scenario.settings
    verdicts = run_all(events, s.max_window, require_completion=require_completion, no_holes=s.update_followers)
    return events, stats, verdicts


# ── trace analysis ───────────────────────────────────────────


def _agreed_leaders(events: list[TraceEvent], n: int):
    """Yield (event, leader agreed by a majority of live replicas or None) after each role/crash."""
    estimates = {i: 0 for i in range(n)}
    live = set(range(n))
    for e in events:
        if e.kind == "role":
            estimates[e.replica] = e.number("leader")
        elif e.kind == "fault" and e.get("action") == FaultAction.CRASH.value:
            live.discard(e.number("target"))
        else:
            yield e, None, False
            continue
        counts = Counter(estimates[i] for i in live)
        leader, votes = min(counts.items(), key=lambda kv: (-kv[1], kv[0])) if counts else (None, 0)
        yield e, (leader if votes >= n // 2 + 1 else None), True


def count_leader_changes(events: list[TraceEvent], n: int) -> int:
    """How often the leader agreed by a majority of live replicas changed."""
    current, changes = 0, 0
    for _, leader, changed in _agreed_leaders(events, n):
        if changed and leader is not None and leader != current:
            changes += 1
            current = leader
    return changes


def analyze_failovers(events: list[TraceEvent], settings: Settings) -> list[FailoverRecord]:
    """
    Measure every crash or pause of the agreed leader.

    detection = first suspicion of the failed leader by its successor - fault time;
    switch = successor's first confirmed-followers record after that suspicion - the suspicion;
    takeover = successor's first committed propose after that - the confirmation.
    """
    failures = []
    current = 0
    for e, leader, changed in _agreed_leaders(events, settings.n):
        if changed and leader is not None:
            current = leader
        if (
            e.kind == "fault"
            and e.get("action") in (FaultAction.CRASH.value, FaultAction.PAUSE.value)
            and e.number("target") == current
        ):
            failures.append((e.time, current, e.get("action")))

    records = []
    for fault_time, failed, action in failures:
        later = [e for e in events if e.time >= fault_time]
        successor = next(
            (e.replica for e in later if e.kind == "role" and e.get("role") == "leader" and e.replica != failed),
            None,
        )
        if successor is None:
            continue
        suspected = next(
            (e.time for e in later if e.kind == "suspect" and e.replica == successor and e.number("peer") == failed),
            None,
        )
        if suspected is None:
            continue
        switched = next(
            (e.time for e in later if e.kind == "confirmed" and e.replica == successor and e.time >= suspected),
            None,
        )
        if switched is None:
            continue
        committed = next(
            (
                e.time for e in later
                if e.kind == "propose_end" and e.replica == successor and e.get("result") == "committed"
                and e.time >= switched
            ),
            None,
        )
        if committed is None:
            continue
        records.append(FailoverRecord(fault_time, failed, action, successor, suspected, switched, committed))
    return records


# ── generated scenarios ──────────────────────────────────────


class SweepProfile(str, Enum):
    SAFETY = "safety"
    TERMINATION = "termination"
    RECYCLING = "recycling"


def _workload(
    rng: random.Random,
    start: int,
    stop: int,
    gap: tuple[int, int],
    keys: str = "abcdefgh",
    spread: int = 4,
) -> list[WorkloadOp]:
    """Puts and gets ``gap`` ticks apart; a key comes back only after ``spread`` other ops."""
    ops = []
    recent: deque[str] = deque(maxlen=spread)
    t = start
    while t < stop:
        key = rng.choice([k for k in keys if k not in recent])
        recent.append(key)
        if rng.random() < 0.7:
            ops.append(WorkloadOp(t, OpKind.PUT, key, f"v{len(ops)}"))
        else:
            ops.append(WorkloadOp(t, OpKind.GET, key))
        t += rng.randint(*gap)
    return ops


def _random_faults(rng: random.Random, n: int, start: int, stop: int, count: int) -> list[Fault]:
    faults = []
    crashes = 0
    for _ in range(count):
        time = rng.randint(start, stop)
        roll = rng.random()
        if roll < 0.3 and crashes < (n - 1) // 2:
            crashes += 1
            faults.append(Fault(time, FaultAction.CRASH, rng.randrange(n)))
        elif roll < 0.7:
            target = 0 if rng.random() < 0.6 else rng.randrange(n)
            faults.append(Fault(time, FaultAction.PAUSE, target, duration=rng.randint(10, min(150, max(10, stop - time)))))
        elif roll < 0.9:
            issuer = rng.randrange(n)
            peer = rng.choice([p for p in range(n) if p != issuer])
            faults.append(Fault(time, FaultAction.DELAY, issuer, duration=rng.randint(20, 100), amount=rng.randint(1, 20), peer=peer))
        else:
            faults.append(Fault(time, FaultAction.PERM, rng.randrange(n), duration=rng.randint(20, 100), amount=rng.randint(10, 60)))
    return sorted(faults, key=lambda f: (f.time, f.target))


def torn_write_cost(settings: Settings) -> int:
    """Extra ticks a slot write spends landing chunk by chunk; 0 without torn writes."""
    if not settings.torn_writes:
        return 0
    slot = LogLayout(settings.capacity, settings.value_size).slot_width
    return -(-slot // settings.chunk_size)


def generate_scenario(profile: SweepProfile | str, seed: int, base: Settings | None = None) -> Scenario:
    """
    Random scenario for one sweep seed.

    Op gaps grow with the torn-write cost so the leader keeps up with its clients; recycling
    pays that cost twice per entry (the slot write and its zeroing).
    """
    profile = SweepProfile(profile)
    rng = random.Random(seed)
    base = base or get_settings()

    if profile is SweepProfile.SAFETY:
        n = rng.choice([3, 3, 5])
        settings = base.with_overrides(
            n=n, seed=seed, horizon=700, client_timeout=30,
            perm_preset=rng.choice(list(PermissionPreset)), torn_writes=rng.random() < 0.3,
        )
        cost = torn_write_cost(settings)
        workload = _workload(rng, 5, 550, (2 + cost, 8 + 2 * cost))
        faults = _random_faults(rng, n, 20, 500, rng.randint(0, 3))
    elif profile is SweepProfile.TERMINATION:
        n = rng.choice([3, 5])
        settings = base.with_overrides(
            n=n, seed=seed, horizon=1600, client_timeout=30,
            perm_preset=rng.choice(list(PermissionPreset)), torn_writes=rng.random() < 0.3,
        )
        cost = torn_write_cost(settings)
        workload = _workload(rng, 5, 900, (3 + cost, 9 + 2 * cost))
        faults = [f for f in _random_faults(rng, n, 20, 200, rng.randint(0, 3)) if f.time + f.duration <= 300]
    else:
        settings = base.with_overrides(
            n=3, seed=seed, horizon=1200, capacity=8, t_recycle=10,
            perm_preset=PermissionPreset.FAST, torn_writes=rng.random() < 0.3,
        )
        cost = torn_write_cost(settings)
        workload = _workload(rng, 5, 1000, (3 + 2 * cost, 5 + 3 * cost))
        faults = []
    return Scenario(name=f"{profile.value}-{seed}", settings=settings, faults=faults, workload=workload)


def failover_scenario(seed: int, base: Settings | None = None) -> Scenario:
    """Steady workload on three replicas with the initial leader crashing once."""
    rng = random.Random(seed)
    base = base or get_settings()
    settings = base.with_overrides(n=3, seed=seed, horizon=700, client_timeout=10)
    workload = [WorkloadOp(t, OpKind.PUT, rng.choice("ab"), f"v{t}") for t in range(5, 650, 3)]
    faults = [Fault(rng.randint(200, 300), FaultAction.CRASH, 0)]
    return Scenario(name=f"failover-{seed}", settings=settings, faults=faults, workload=workload)


def failover_benchmark(runs: int, seed: int, base: Settings | None = None) -> list[FailoverRecord]:
    records = []
    for k in range(runs):
        _, stats = run_scenario(failover_scenario(seed + k, base))
        records.extend(stats.failovers)
    return records


__all__ = [
    "ClientRecord",
    "FailoverRecord",
    "Fault",
    "FaultAction",
    "RunComplete",
    "RunStats",
    "Scenario",
    "ScenarioError",
    "Simulation",
    "SweepProfile",
    "WorkloadOp",
    "analyze_failovers",
    "check_run",
    "count_leader_changes",
    "failover_benchmark",
    "failover_scenario",
    "generate_scenario",
    "torn_write_cost",
    "load_scenario",
    "parse_scenario",
    "run_scenario",
]
