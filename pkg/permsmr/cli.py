"""
Command-line interface for permsmr.

Usage:
    permsmr run --scenario steady.scn --trace out/steady.trace --stats out/steady.json
    permsmr sweep --profile safety --runs 1000 --jobs 4
    permsmr failover-bench --runs 1000 --preset measured --out out/failover.hist
    permsmr check --trace out/steady.trace

Exit codes: 0 all checks pass, 1 a check failed, 2 usage or input error.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from statistics import mean
from typing import Optional

import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from .checkers import Verdict, all_passed, run_all
from .config import ConfigurationError, PermissionPreset, get_settings
from .harness import (
    FailoverRecord,
    ScenarioError,
    SweepProfile,
    check_run,
    failover_benchmark,
    generate_scenario,
    load_scenario,
)
from .trace import TraceFormatError, read_trace, write_trace

EXIT_PASS = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2

app = typer.Typer(
    name="permsmr",
    help="Permission-based single-round-trip SMR on a simulated one-sided fabric",
    add_completion=False,
)
console = Console()


def _print(msg: str, style: str | None = None):
    console.print(msg, style=style, highlight=False)


def _print_json(data: dict):
    print(json.dumps(data, indent=2))


def _setup_logging(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(message)s",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


def _usage_error(msg: str) -> typer.Exit:
    _print(f"error: {msg}", "bold red")
    return typer.Exit(EXIT_USAGE)


def _verdict_table(verdicts: list[Verdict]) -> Table:
    table = Table(title="Checkers")
    table.add_column("Checker")
    table.add_column("Result")
    table.add_column("Details")
    for v in verdicts:
        if v.refused:
            result = "[yellow]refused[/yellow]"
        elif v.passed:
            result = "[green]pass[/green]"
        else:
            result = f"[red]FAIL[/red] t={v.time}"
        table.add_row(v.name, result, v.details)
    return table


def _histogram(values: list[int], bucket: int) -> list[tuple[int, int]]:
    """(bucket upper tick, count) for every bucket up to the largest value."""
    if not values:
        return []
    top = max(values)
    counts = [0] * (top // bucket + 1)
    for value in values:
        counts[value // bucket] += 1
    return [((i + 1) * bucket, count) for i, count in enumerate(counts)]


COMPONENTS = ("detection", "switch", "takeover", "total")


def _histogram_text(records: list[FailoverRecord], bucket: int) -> tuple[dict[str, list[tuple[int, int]]], str]:
    """Per-component histograms and their text form: one row per bucket, one count column per component."""
    hists = {name: _histogram([getattr(r, name) for r in records], bucket) for name in COMPONENTS}
    rows = max((len(h) for h in hists.values()), default=0)
    lines = ["# upper " + " ".join(COMPONENTS)]
    for i in range(rows):
        counts = [str(h[i][1]) if i < len(h) else "0" for h in hists.values()]
        lines.append(f"{(i + 1) * bucket} " + " ".join(counts))
    return hists, "\n".join(lines) + "\n"


# ─────────────────────────────────────────────────────────────
# Commands
# ─────────────────────────────────────────────────────────────


@app.command()
def run(
    scenario: Path = typer.Option(..., "--scenario", "-s", help="Scenario file"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override the scenario seed"),
    trace: Optional[Path] = typer.Option(None, "--trace", "-t", help="Write the trace here"),
    stats: Optional[Path] = typer.Option(None, "--stats", help="Write run statistics (JSON) here"),
    as_json: bool = typer.Option(False, "--json", help="Output as JSON"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging"),
):
    """
    Run one scenario, write its trace and check it.
    """
    _setup_logging(verbose)
    try:
        loaded = load_scenario(scenario)
        if seed is not None:
            loaded = loaded.model_copy(update={"settings": loaded.settings.with_overrides(seed=seed)})
    except ConfigurationError as e:
        raise _usage_error(e.message)

    try:
        if trace is not None:
            trace.parent.mkdir(parents=True, exist_ok=True)
            with trace.open("w", encoding="utf-8") as stream:
                events, run_stats, verdicts = check_run(loaded, stream)
            if loaded.doctor:
                write_trace(events, trace)
        else:
            events, run_stats, verdicts = check_run(loaded)
    except ConfigurationError as e:
        raise _usage_error(e.message)

    report = {**run_stats.to_dict(), "verdicts": [v.to_dict() for v in verdicts]}
    if stats is not None:
        stats.parent.mkdir(parents=True, exist_ok=True)
        stats.write_text(json.dumps(report, indent=2), encoding="utf-8")

    if as_json:
        _print_json(report)
    else:
        common = [p for p in run_stats.proposals if p["result"] == "committed" and not p["recovery"]]
        shapes = sorted({(p["writes"], p["reads"]) for p in common})
        _print(f"{loaded.name}: n={run_stats.n} seed={run_stats.seed} steps={run_stats.steps}", "bold")
        _print(f"   Commits: {run_stats.commits}  common-case rounds (writes, reads): {shapes}")
        _print(f"   Client ops: {run_stats.ops_completed}/{run_stats.ops_invoked} answered")
        _print(f"   Leader changes: {run_stats.leader_changes}")
        _print(f"   Trace digest: {run_stats.trace_digest[:16]}")
        console.print(_verdict_table(verdicts))

    raise typer.Exit(EXIT_PASS if all_passed(verdicts) else EXIT_CHECK_FAILED)


def _sweep_one(profile: str, seed: int, fail_dir: str | None) -> dict:
    scenario = generate_scenario(profile, seed)
    require = SweepProfile(profile) is SweepProfile.TERMINATION
    events, stats, verdicts = check_run(scenario, require_completion=require)
    failed = [v.name for v in verdicts if not v.passed]
    if failed and fail_dir:
        out = Path(fail_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{scenario.name}.scn").write_text(scenario.to_text(), encoding="utf-8")
        write_trace(events, out / f"{scenario.name}.trace")
    return {
        "seed": seed,
        "failed": failed,
        "refused": [v.name for v in verdicts if v.refused],
        "commits": stats.commits,
        "ops": stats.ops_invoked,
    }


@app.command()
def sweep(
    runs: int = typer.Option(100, "--runs", "-n", help="Number of seeds"),
    seed: int = typer.Option(0, "--seed", help="First seed"),
    jobs: int = typer.Option(1, "--jobs", "-j", help="Parallel runs"),
    profile: SweepProfile = typer.Option(SweepProfile.SAFETY, "--profile", "-p", help="Scenario profile"),
    fail_dir: Optional[Path] = typer.Option(None, "--fail-dir", help="Save failing scenarios and traces here"),
    as_json: bool = typer.Option(False, "--json", help="Output as JSON"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging"),
):
    """
    Run randomized scenarios over consecutive seeds and check every trace.
    """
    _setup_logging(verbose)
    if runs < 1 or jobs < 1:
        raise _usage_error("--runs and --jobs must be at least 1")
    seeds = range(seed, seed + runs)
    fail_arg = str(fail_dir) if fail_dir else None
    if jobs == 1:
        results = [_sweep_one(profile.value, s, fail_arg) for s in seeds]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_one, [profile.value] * runs, seeds, [fail_arg] * runs))

    failures = [r for r in results if r["failed"]]
    refused = sum(1 for r in results if r["refused"])
    if as_json:
        _print_json({"profile": profile.value, "runs": runs, "failures": failures, "refused": refused})
    else:
        table = Table(title=f"Sweep: {profile.value}, seeds {seed}..{seed + runs - 1}")
        table.add_column("Runs", justify="right")
        table.add_column("Failed", justify="right")
        table.add_column("Refused", justify="right")
        table.add_column("Commits", justify="right")
        table.add_column("Client ops", justify="right")
        table.add_row(
            str(runs), str(len(failures)), str(refused),
            str(sum(r["commits"] for r in results)), str(sum(r["ops"] for r in results)),
        )
        console.print(table)
        for r in failures[:20]:
            _print(f"   seed {r['seed']}: {', '.join(r['failed'])}", "red")

    raise typer.Exit(EXIT_CHECK_FAILED if failures else EXIT_PASS)


@app.command("failover-bench")
def failover_bench(
    runs: int = typer.Option(100, "--runs", "-n", help="Leader crashes to simulate"),
    seed: int = typer.Option(0, "--seed", help="First seed"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Write the per-component histograms here"),
    bucket: int = typer.Option(10, "--bucket", help="Histogram bucket width in ticks"),
    preset: Optional[PermissionPreset] = typer.Option(None, "--preset", help="Permission latency preset"),
    as_json: bool = typer.Option(False, "--json", help="Output as JSON"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging"),
):
    """
    Crash the leader repeatedly and measure fail-over time in simulated ticks.
    """
    _setup_logging(verbose)
    if runs < 1 or bucket < 1:
        raise _usage_error("--runs and --bucket must be at least 1")
    settings = get_settings()
    if preset is not None:
        settings = settings.with_overrides(perm_preset=preset, l_perm=None)
    records: list[FailoverRecord] = failover_benchmark(runs, seed, settings)
    hists, text = _histogram_text(records, bucket)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")

    bound = settings.failover_bound
    over = [r for r in records if r.total > bound or r.detection > settings.detection_bound]
    if as_json:
        _print_json({
            "runs": runs,
            "measured": len(records),
            "bound": bound,
            "detection_bound": settings.detection_bound,
            "over_bound": len(over),
            "histograms": hists,
            "switch_share": mean(r.switch_share for r in records) if records else 0.0,
            "records": [r.to_dict() for r in records],
        })
    elif records:
        total = sum(r.total for r in records) or 1
        table = Table(title=f"Fail-over over {len(records)} leader crashes (ticks)")
        table.add_column("Component")
        table.add_column("Mean", justify="right")
        table.add_column("Max", justify="right")
        table.add_column("Share", justify="right")
        for label, values in (
            ("detection", [r.detection for r in records]),
            ("permission switch", [r.switch for r in records]),
            ("takeover", [r.takeover for r in records]),
            ("total", [r.total for r in records]),
        ):
            table.add_row(label, f"{mean(values):.1f}", str(max(values)), f"{100 * sum(values) / total:.0f}%")
        console.print(table)
        _print(f"   Bound: {bound} ticks, {len(over)} over")
        print(text, end="")
    else:
        _print("no fail-over measured", "yellow")

    raise typer.Exit(EXIT_CHECK_FAILED if over or len(records) < runs else EXIT_PASS)


@app.command()
def check(
    trace: Path = typer.Option(..., "--trace", "-t", help="Trace file to check"),
    max_window: int = typer.Option(12, "--max-window", help="Linearizability window cap"),
    as_json: bool = typer.Option(False, "--json", help="Output as JSON"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging"),
):
    """
    Run the checker suite over a saved trace.
    """
    _setup_logging(verbose)
    try:
        events = read_trace(trace)
    except OSError as e:
        raise _usage_error(f"cannot read {trace}: {e}")
    except TraceFormatError as e:
        raise _usage_error(f"{trace}:{e.line_no}: {e.message}")

    verdicts = run_all(events, max_window)
    if as_json:
        _print_json({"events": len(events), "verdicts": [v.to_dict() for v in verdicts]})
    else:
        if not events:
            _print("empty trace: every check passes vacuously", "yellow")
        for v in verdicts:
            print(v.to_line())
        console.print(_verdict_table(verdicts))

    raise typer.Exit(EXIT_PASS if all_passed(verdicts) else EXIT_CHECK_FAILED)


def main():
    """Entry point for CLI."""
    app()


if __name__ == "__main__":
    main()
