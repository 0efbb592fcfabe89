"""
permsmr - permission-based single-round-trip state machine replication

A deterministic simulation of a replicated log driven by one-sided reads and writes over a
simulated fabric, with a fault-injecting harness and trace checkers.

Example:
    >>> from permsmr import parse_scenario, check_run
    >>> scenario = parse_scenario("op = 5,put,a,1\nop = 9,get,a")
    >>> events, stats, verdicts = check_run(scenario)
    >>> stats.ops_completed
    2
"""

__version__ = "0.1.0"

from .config import ConfigurationError, Settings, get_settings, load_settings


# Lazy imports keep `import permsmr` cheap for config-only callers
def __getattr__(name: str):
    if name in ("Fabric", "RegionKind", "PermissionAction"):
        from . import fabric
        return getattr(fabric, name)
    elif name in ("ConsensusLog", "LogLayout", "BackgroundLayout"):
        from . import consensus_log
        return getattr(consensus_log, name)
    elif name == "Replica":
        from .replica import Replica
        return Replica
    elif name in ("Scenario", "Simulation", "parse_scenario", "load_scenario", "run_scenario", "check_run"):
        from . import harness
        return getattr(harness, name)
    elif name in ("Verdict", "run_all", "doctor_trace", "measure_round_complexity"):
        from . import checkers
        return getattr(checkers, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


__all__ = [
    # Config
    "ConfigurationError",
    "Settings",
    "get_settings",
    "load_settings",
    # Modules (lazy loaded)
    "BackgroundLayout",
    "ConsensusLog",
    "Fabric",
    "LogLayout",
    "PermissionAction",
    "RegionKind",
    "Replica",
    "Scenario",
    "Simulation",
    "Verdict",
    "check_run",
    "doctor_trace",
    "load_scenario",
    "measure_round_complexity",
    "parse_scenario",
    "run_all",
    "run_scenario",
    # Version
    "__version__",
]
