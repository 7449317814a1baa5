"""Tests for run configuration files and process settings."""

from pathlib import Path

import pytest

from mixttt.config.run_config import RunConfig, parse_key_values
from mixttt.config.settings import Settings
from mixttt.utils.errors import ConfigurationError

DESK_CONF = Path(__file__).parent.parent / "configs" / "desk.conf"


def test_parse_comments_and_blank_lines():
    values = parse_key_values("# header\nalpha = 0.001  # rate\n\nsteps=5\n")
    assert values == {"alpha": "0.001", "steps": "5"}


@pytest.mark.parametrize("text", ["alpha 0.1", "alpha=1\nalpha=2", "=3"])
def test_parse_rejects_malformed_lines(text):
    with pytest.raises(ConfigurationError):
        parse_key_values(text)


def test_desk_config_loads():
    config = RunConfig.from_file(DESK_CONF)
    assert config.encoder_widths == [16, 32, 64]
    assert config.severities == [5]
    assert config.drift_checkpoints == [10, 20, 30]
    assert config.methods == ["baseline", "ttt", "mixttt"]


def test_unknown_key_is_named():
    with pytest.raises(ConfigurationError, match="Unknown config key 'alpah'"):
        RunConfig.from_mapping({"alpah": "0.1"})


def test_invalid_value_is_named():
    with pytest.raises(ConfigurationError, match="'severities'"):
        RunConfig.from_mapping({"severities": "9"})
    with pytest.raises(ConfigurationError, match="'steps'"):
        RunConfig.from_mapping({"steps": "0"})


def test_inconsistent_values_rejected():
    with pytest.raises(ConfigurationError):
        RunConfig.from_mapping({"encoder_widths": "8, 16", "encoder_strides": "1"})
    with pytest.raises(ConfigurationError):
        RunConfig.from_mapping({"ratio_low": "0.5"})
    with pytest.raises(ConfigurationError):
        RunConfig.from_mapping({"methods": "baseline, tent"})


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("seed = 1\noutput_dir = a\n", encoding="utf-8")
    config = RunConfig.from_file(path, {"seed": 7, "output_dir": None})
    assert config.seed == 7
    assert config.output_dir == "a"


def test_hash_ignores_output_dir():
    first = RunConfig.from_mapping({"output_dir": "x"})
    second = RunConfig.from_mapping({"output_dir": "y"})
    third = RunConfig.from_mapping({"alpha": "0.01"})
    assert first.config_hash() == second.config_hash()
    assert first.config_hash() != third.config_hash()
    assert len(first.config_hash()) == 16


def test_require_path(tmp_path):
    config = RunConfig.from_mapping({"train_path": str(tmp_path / "missing.mttt")})
    with pytest.raises(ConfigurationError):
        config.require_path("train_path")
    with pytest.raises(ConfigurationError, match="'test_path' is required"):
        config.require_path("test_path")


def test_presets_and_explicit_values():
    assert RunConfig().episode_config().alpha == 1e-3
    cifar100 = RunConfig.from_mapping({"preset": "cifar100"}).episode_config()
    assert (cifar100.alpha, cifar100.steps) == (1e-4, 5)
    explicit = RunConfig.from_mapping({"preset": "cifar100", "alpha": "0.5"}).episode_config()
    assert (explicit.alpha, explicit.steps) == (0.5, 5)


def test_task_specs_follow_config():
    config = RunConfig.from_mapping({"task": "entropy_min", "ratio_low": "0.8", "ratio_high": "0.9"})
    spec = config.aux_task_spec()
    assert spec.param_subset == "norm_affine_only"
    assert (spec.ratio_spec.low, spec.ratio_spec.high) == (0.8, 0.9)
    assert RunConfig().aux_task_spec().ratio_spec.low == 0.7


def test_suite_methods_order():
    methods = RunConfig.from_mapping({"methods": "mixttt, baseline"}).suite_methods()
    assert [m.name for m in methods] == ["mixttt", "baseline"]
    assert methods[0].episode.mix_enabled
    assert methods[1].episode is None


def test_external_corruptions_are_not_generated():
    config = RunConfig.from_mapping({"corruptions": "fog, brightness", "severities": "3, 5"})
    assert [(s.kind, s.severity) for s in config.corruption_specs()] == [("brightness", 3), ("brightness", 5)]
    assert config.corruption_pairs() == [("fog", 3), ("fog", 5), ("brightness", 3), ("brightness", 5)]


def test_network_spec_from_config():
    spec = RunConfig.from_mapping({"encoder_widths": "4, 8", "encoder_strides": "1, 2"}).network_spec((3, 8, 8))
    assert [layer.width for layer in spec.encoder_layers] == [4, 8]
    assert spec.aux_classes == 4


def test_settings_from_environment(monkeypatch):
    monkeypatch.setenv("MIXTTT_THREADS", "0")
    monkeypatch.setenv("MIXTTT_LOG_LEVEL", "DEBUG")
    settings = Settings()
    assert settings.thread_cap == 1
    assert settings.log_level == "DEBUG"
