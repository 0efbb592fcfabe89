"""Settings and derived bounds."""

import pytest
from pydantic import ValidationError

from conftest import make_settings

from permsmr.config import ConfigurationError, PermissionPreset, Settings


def test_defaults(settings):
    assert settings.n == 3
    assert settings.perm_preset is PermissionPreset.SLOW
    assert settings.permission_latency == 50
    assert settings.majority == 2


def test_presets_and_explicit_latency():
    assert make_settings(perm_preset="fast").permission_latency == 4
    assert make_settings(perm_preset="fast", l_perm=30).permission_latency == 30


def test_failover_bounds(settings):
    assert settings.detection_bound == 30
    assert settings.failover_bound == 30 + 2 * 50 + settings.commit_slack


def test_env_prefix(monkeypatch):
    monkeypatch.setenv("PERMSMR_N", "5")
    assert Settings(_env_file=None).n == 5


def test_invalid_values():
    with pytest.raises(ValidationError):
        Settings(_env_file=None, fail_threshold=9)
    with pytest.raises(ConfigurationError) as info:
        make_settings(n=0)
    assert info.value.field == "n"
    with pytest.raises(ConfigurationError):
        make_settings(capacity=2)
    with pytest.raises(ConfigurationError):
        make_settings(repl_jitter=2)
