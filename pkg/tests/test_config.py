from __future__ import annotations

import logging
import sys
from pathlib import Path

import pytest

from nodulefpr.config import (
    DEFAULT_WORKERS,
    config_hash,
    configure_logging,
    get_settings,
    load_pipeline_config,
    stage_seed,
)
from nodulefpr.errors import NoduleFprError
from nodulefpr.models import PipelineConfig


# Expected behavior: unset environment should fall back to INFO logging and the default worker count.
def test_get_settings_defaults(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv("NFPR_LOG_LEVEL", raising=False)
    monkeypatch.delenv("NFPR_WORKERS", raising=False)
    settings = get_settings()
    assert settings.log_level == logging.INFO
    assert settings.workers == DEFAULT_WORKERS


# Expected behavior: log level names are case-insensitive.
def test_get_settings_reads_level_and_workers(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("NFPR_LOG_LEVEL", "debug")
    monkeypatch.setenv("NFPR_WORKERS", "2")
    settings = get_settings()
    assert settings.log_level == logging.DEBUG
    assert settings.workers == 2


# Expected behavior: a non-integer worker count is a configuration error.
def test_get_settings_rejects_bad_workers(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("NFPR_WORKERS", "many")
    with pytest.raises(NoduleFprError) as exc:
        get_settings()
    assert exc.value.code == "INVALID_CONFIG"
    assert exc.value.exit_code == 2


# Expected behavior: unknown log level names are rejected.
def test_get_settings_rejects_unknown_level(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("NFPR_LOG_LEVEL", "chatty")
    with pytest.raises(NoduleFprError) as exc:
        get_settings()
    assert exc.value.code == "INVALID_CONFIG"


# Expected behavior: logging configuration should attach a stderr stream handler when none exist.
def test_configure_logging_targets_stderr() -> None:
    root = logging.getLogger()
    original_handlers = list(root.handlers)
    try:
        root.handlers = []
        configure_logging()
        assert root.handlers, "configure_logging should add at least one handler"
        handler = root.handlers[0]
        assert isinstance(handler, logging.StreamHandler)
        assert handler.stream is sys.stderr
    finally:
        root.handlers = original_handlers


# Expected behavior: no config path means all defaults.
def test_load_pipeline_config_defaults() -> None:
    config = load_pipeline_config(None)
    assert config.autoencoder.hidden_widths == [1024, 512, 384]
    assert config.autoencoder.code_dim == 256
    assert config.categorizer.k == 5
    assert config.classifier.decay_every == 500
    assert config.evaluation.fp_levels == [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0]


# Expected behavior: INI values are parsed as numbers and comma lists.
def test_load_pipeline_config_parses_ini(tmp_path: Path) -> None:
    path = tmp_path / "pipeline.ini"
    path.write_text(
        "[categorizer]\nk = 3\nsweep_k = 3, 5\n\n[run]\nregime = dae\nmaster_seed = 7\n\n[autoencoder]\nlearning_rate = 0.01\n",
        encoding="utf-8",
    )
    config = load_pipeline_config(path)
    assert config.categorizer.k == 3
    assert config.categorizer.sweep_k == [3, 5]
    assert config.run.regime == "dae"
    assert config.run.master_seed == 7
    assert config.autoencoder.learning_rate == pytest.approx(0.01)


# Expected behavior: unknown keys are rejected as INVALID_CONFIG naming the field.
def test_load_pipeline_config_rejects_unknown_key(tmp_path: Path) -> None:
    path = tmp_path / "pipeline.ini"
    path.write_text("[classifier]\nlearning_rat = 0.1\n", encoding="utf-8")
    with pytest.raises(NoduleFprError) as exc:
        load_pipeline_config(path)
    assert exc.value.code == "INVALID_CONFIG"
    assert "learning_rat" in exc.value.message


# Expected behavior: a missing config file is a missing artifact, not silently defaulted.
def test_load_pipeline_config_missing_file(tmp_path: Path) -> None:
    with pytest.raises(NoduleFprError) as exc:
        load_pipeline_config(tmp_path / "absent.ini")
    assert exc.value.code == "MISSING_ARTIFACT"
    assert exc.value.exit_code == 3


# Expected behavior: the config hash depends on content only.
def test_config_hash_is_stable() -> None:
    assert config_hash(PipelineConfig()) == config_hash(PipelineConfig())
    changed = PipelineConfig.model_validate({"run": {"master_seed": 1}})
    assert config_hash(changed) != config_hash(PipelineConfig())


# Expected behavior: stage seeds are deterministic, stage-specific and fit in 63 bits.
def test_stage_seed_is_stable_and_distinct() -> None:
    assert stage_seed(0, "folds") == stage_seed(0, "folds")
    assert stage_seed(0, "folds") != stage_seed(0, "fold0/ae")
    assert stage_seed(0, "folds") != stage_seed(1, "folds")
    assert 0 <= stage_seed(123, "anything") < 2**63
