"""Command-line entry points and their exit codes."""

import json

import pytest
from typer.testing import CliRunner

from permsmr.cli import _histogram, app

runner = CliRunner()

SCENARIO = """
n = 3
seed = 5
horizon = 300
perm_preset = fast
op = 20,put,a,1
op = 26,put,b,2
op = 40,get,a
op = 60,put,a,3
"""


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "small.scn"
    path.write_text(SCENARIO, encoding="utf-8")
    return path


def test_run_writes_trace_and_passes(tmp_path, scenario_file):
    trace = tmp_path / "out" / "small.trace"
    stats = tmp_path / "out" / "small.json"
    result = runner.invoke(app, ["run", "-s", str(scenario_file), "-t", str(trace), "--stats", str(stats)])
    assert result.exit_code == 0, result.output
    assert trace.read_text(encoding="utf-8").startswith("0|")
    report = json.loads(stats.read_text(encoding="utf-8"))
    assert report["ops_completed"] == 4
    assert all(v["passed"] for v in report["verdicts"])


def test_run_missing_scenario(tmp_path):
    result = runner.invoke(app, ["run", "-s", str(tmp_path / "nope.scn")])
    assert result.exit_code == 2


def test_run_bad_scenario(tmp_path):
    path = tmp_path / "bad.scn"
    path.write_text("n = 3\nfault = 10,crash,7\n", encoding="utf-8")
    trace = tmp_path / "bad.trace"
    result = runner.invoke(app, ["run", "-s", str(path), "-t", str(trace)])
    assert result.exit_code == 2
    assert not trace.exists()


def test_check_saved_trace(tmp_path, scenario_file):
    trace = tmp_path / "small.trace"
    runner.invoke(app, ["run", "-s", str(scenario_file), "-t", str(trace)])
    result = runner.invoke(app, ["check", "-t", str(trace), "--json"])
    assert result.exit_code == 0, result.output
    report = json.loads(result.output)
    assert report["events"] > 0
    assert {v["name"] for v in report["verdicts"]} >= {"agreement_validity", "linearizability"}


def test_check_truncated_trace(tmp_path, scenario_file):
    trace = tmp_path / "small.trace"
    runner.invoke(app, ["run", "-s", str(scenario_file), "-t", str(trace)])
    lines = trace.read_text(encoding="utf-8").splitlines()
    trace.write_text("\n".join(lines[:5]) + "\n" + lines[5][:3] + "\n", encoding="utf-8")
    result = runner.invoke(app, ["check", "-t", str(trace)])
    assert result.exit_code == 2
    assert "error" in result.output


def test_check_empty_trace(tmp_path):
    trace = tmp_path / "empty.trace"
    trace.write_text("", encoding="utf-8")
    result = runner.invoke(app, ["check", "-t", str(trace)])
    assert result.exit_code == 0
    assert "vacuously" in result.output


def test_check_missing_trace(tmp_path):
    result = runner.invoke(app, ["check", "-t", str(tmp_path / "missing.trace")])
    assert result.exit_code == 2


def test_doctored_run_fails_and_check_agrees(tmp_path):
    path = tmp_path / "doctored.scn"
    path.write_text(SCENARIO + "doctor = agreement\n", encoding="utf-8")
    trace = tmp_path / "doctored.trace"
    result = runner.invoke(app, ["run", "-s", str(path), "-t", str(trace)])
    assert result.exit_code == 1
    result = runner.invoke(app, ["check", "-t", str(trace)])
    assert result.exit_code == 1
    assert "name=agreement_validity|passed=0" in result.output


def test_sweep_json():
    result = runner.invoke(app, ["sweep", "--runs", "2", "--profile", "safety", "--json"])
    assert result.exit_code == 0, result.output
    report = json.loads(result.stdout)
    assert report["runs"] == 2
    assert report["failures"] == []


def test_sweep_rejects_zero_runs():
    assert runner.invoke(app, ["sweep", "--runs", "0"]).exit_code == 2


def test_failover_bench_histogram(tmp_path):
    out = tmp_path / "failover.hist"
    result = runner.invoke(app, ["failover-bench", "--runs", "2", "--out", str(out), "--json"])
    assert result.exit_code == 0, result.output
    header, *rows = out.read_text(encoding="utf-8").splitlines()
    assert header.split() == ["#", "upper", "detection", "switch", "takeover", "total"]
    columns = list(zip(*(map(int, line.split()) for line in rows)))
    assert len(columns) == 5
    assert all(sum(counts) == 2 for counts in columns[1:])
    report = json.loads(result.stdout)
    assert report["over_bound"] == 0
    assert set(report["histograms"]) == {"detection", "switch", "takeover", "total"}
    assert 0 < report["switch_share"] < 1


def test_failover_bench_measured_preset():
    result = runner.invoke(app, ["failover-bench", "--runs", "2", "--preset", "measured", "--json"])
    assert result.exit_code == 0, result.output
    report = json.loads(result.stdout)
    assert all(r["switch"] < r["detection"] for r in report["records"])


def test_histogram_buckets():
    assert _histogram([], 10) == []
    assert _histogram([3, 12, 15, 31], 10) == [(10, 1), (20, 2), (30, 0), (40, 1)]
