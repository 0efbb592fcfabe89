"""
Configuration management for permsmr.

Loads simulation settings from environment variables (PERMSMR_*) or a .env file.
Scenario files override individual fields per run.
"""

from __future__ import annotations

from enum import Enum
from pathlib import Path
from typing import Any

from pydantic import Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class ConfigurationError(Exception):
    """Invalid settings, topology or scenario."""
    def __init__(self, message: str, field: str | None = None):
        self.message = message
        self.field = field
        super().__init__(message)


class PermissionPreset(str, Enum):
    """
    Permission-change latency presets.

    slow: queue-pair state change. fast: access flags. measured: puts the permission switch
    at about 30% of a leader fail-over with the default detector, the hardware proportion.
    """
    SLOW = "slow"
    FAST = "fast"
    MEASURED = "measured"


PRESET_L_PERM = {
    PermissionPreset.SLOW: 50,
    PermissionPreset.FAST: 4,
    PermissionPreset.MEASURED: 3,
}


class Settings(BaseSettings):
    """Simulation settings. All times are integer ticks."""

    model_config = SettingsConfigDict(
        env_prefix="PERMSMR_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # Topology
    n: int = Field(default=3, description="Replica count")
    seed: int = Field(default=0, description="Scheduler / delay-model seed")
    capacity: int = Field(default=256, description="Log slots per replica")
    value_size: int = Field(default=64, description="Maximum slot payload in bytes")

    # Delay model
    repl_base: int = Field(default=2, description="Replication-plane base latency")
    repl_jitter: int = Field(default=1, description="Replication-plane uniform jitter (+/-)")
    bg_base: int = Field(default=2, description="Background-plane base latency")
    bg_jitter: int = Field(default=1, description="Background-plane uniform jitter (+/-)")
    t_conn: int = Field(default=1, description="Connection timeout before TargetCrashed")
    perm_preset: PermissionPreset = Field(default=PermissionPreset.SLOW, description="Permission latency preset")
    l_perm: int | None = Field(default=None, description="Permission-change latency (overrides preset)")
    torn_writes: bool = Field(default=False, description="Apply writes as chunked prefixes")
    chunk_size: int = Field(default=8, description="Bytes per torn-write chunk")

    # Background plane
    t_hb: int = Field(default=1, description="Heartbeat increment period")
    t_scan: int = Field(default=2, description="Election scan period")
    score_min: int = Field(default=0, description="Score floor")
    score_max: int = Field(default=15, description="Score cap")
    fail_threshold: int = Field(default=2, description="Suspect when score drops below")
    recover_threshold: int = Field(default=6, description="Trust again when score rises above")
    initial_score: int = Field(default=15, description="Score every peer starts with")
    t_perm_poll: int = Field(default=1, description="Permission worker polling period")
    t_recycle: int = Field(default=20, description="Leader log-recycling period")

    # Replication plane
    t_replay: int = Field(default=1, description="Replayer period")
    t_ack_poll: int = Field(default=1, description="Leader ack-array polling period")
    grace_window: int = Field(default=4, description="Wait for stragglers after a majority acked")
    t_flush: int = Field(default=3, description="Idle time before the leader flushes its FUO")
    omit_prepare: bool = Field(default=True, description="Skip prepare after all-empty reads")
    update_followers: bool = Field(default=True, description="Bring followers up to date on takeover")
    recycling: bool = Field(default=True, description="Recycle log slots below minHead")

    # Harness
    horizon: int = Field(default=1000, description="Simulated run length")
    client_retry: int = Field(default=5, description="Client delay before following a leader hint")
    client_timeout: int = Field(default=150, description="Client re-route after no response")
    commit_slack: int = Field(default=40, description="Slack added to the analytic fail-over bound")
    max_window: int = Field(default=12, description="Linearizability window cap")

    @field_validator("n")
    @classmethod
    def check_n(cls, v: int) -> int:
        if v < 1:
            raise ValueError("n must be positive")
        return v

    @field_validator(
        "capacity", "value_size", "t_hb", "t_scan", "t_conn", "chunk_size", "t_replay",
        "t_ack_poll", "t_perm_poll", "t_recycle", "t_flush", "horizon", "repl_base", "bg_base",
    )
    @classmethod
    def check_positive(cls, v: int) -> int:
        if v <= 0:
            raise ValueError("must be positive")
        return v

    @model_validator(mode="after")
    def check_scores(self) -> Settings:
        if not self.score_min <= self.fail_threshold <= self.recover_threshold <= self.score_max:
            raise ValueError("need score_min <= fail_threshold <= recover_threshold <= score_max")
        if not self.score_min <= self.initial_score <= self.score_max:
            raise ValueError("initial_score outside the score range")
        if self.capacity < 3:
            raise ValueError("capacity must hold at least 3 slots")
        if self.repl_jitter >= self.repl_base or self.bg_jitter >= self.bg_base:
            raise ValueError("jitter must stay below the base latency")
        return self

    @property
    def permission_latency(self) -> int:
        """L_perm in ticks."""
        if self.l_perm is not None:
            return self.l_perm
        return PRESET_L_PERM[self.perm_preset]

    @property
    def majority(self) -> int:
        return self.n // 2 + 1

    @property
    def detection_bound(self) -> int:
        """Worst-case ticks from a frozen counter to suspicion by every live peer."""
        return (self.initial_score - 1) * self.t_scan + self.t_scan

    @property
    def failover_bound(self) -> int:
        return self.detection_bound + 2 * self.permission_latency + self.commit_slack

    def with_overrides(self, **overrides: Any) -> Settings:
        """Return a validated copy with fields replaced."""
        data = self.model_dump()
        data.update(overrides)
        try:
            return Settings.model_validate(data)
        except ValidationError as e:
            first = e.errors()[0]
            field = ".".join(str(p) for p in first.get("loc", ())) or None
            raise ConfigurationError(f"{field}: {first['msg']}", field) from e


# Singleton instance
_settings: Settings | None = None


def get_settings() -> Settings:
    """Get or create the settings singleton."""
    global _settings
    if _settings is None:
        _settings = Settings()
    return _settings


def load_settings(env_file: str | Path | None = None) -> Settings:
    """Load settings from a specific env file."""
    global _settings
    if env_file:
        _settings = Settings(_env_file=env_file)
    else:
        _settings = Settings()
    return _settings


__all__ = [
    "ConfigurationError",
    "PermissionPreset",
    "Settings",
    "get_settings",
    "load_settings",
]
