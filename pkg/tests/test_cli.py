from __future__ import annotations

import json
from pathlib import Path

import pandas as pd
import pytest

from nodulefpr.cli import COMMANDS, apply_overrides, build_parser, main, run_command
from nodulefpr.config import get_settings, load_pipeline_config
from nodulefpr.models import PipelineConfig

TINY_INI = """
[folds]
fold_count = 2

[phantom]
scan_count = 4

[autoencoder]
hidden_widths = 16, 8, 8
code_dim = 4
iterations = 5
batch_size = 4

[categorizer]
k = 2
restarts = 2

[classifier]
channels = 4, 4, 4
hidden_units = 4
iterations = 4
batch_size = 4
eval_every = 2

[evaluation]
bootstrap_resamples = 10
plot = false
"""


@pytest.fixture
def tiny_config(tmp_path: Path) -> Path:
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI, encoding="utf-8")
    return path


# Expected behavior: every pipeline stage is reachable as a subcommand.
def test_parser_lists_every_command() -> None:
    parser = build_parser()
    for name in COMMANDS:
        args = parser.parse_args([name, "--out", "somewhere"])
        assert args.command == name
    assert {"phantom", "folds", "train-ae", "extract-features", "cluster", "build-sets"} <= set(COMMANDS)
    assert {"train-ensemble", "predict", "evaluate", "stats"} <= set(COMMANDS)


# Expected behavior: command-line flags override the run section and revalidate.
def test_apply_overrides() -> None:
    args = build_parser().parse_args(["stats", "--regime", "s", "--k", "7", "--seed", "9", "--fold", "3"])
    config = apply_overrides(PipelineConfig(), args)
    assert config.run.regime == "s"
    assert config.categorizer.k == 1
    assert config.run.master_seed == 9
    assert config.run.fold == 3


# Expected behavior: stats prints parameter and FLOPS counts and writes stats.json with a manifest.
def test_stats_command(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["stats", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "parameters\t732330" in out
    assert "flops\t999261120" in out
    record = json.loads((tmp_path / "stats.json").read_text(encoding="utf-8"))
    assert record["member_parameters"] == 146466
    manifest = json.loads((tmp_path / "stats.manifest.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "stats"
    assert manifest["outputs"] == ["stats.json"]


# Expected behavior: a stage whose input artifact is missing exits 3.
def test_missing_artifact_exit_code(tmp_path: Path) -> None:
    assert main(["folds", "--out", str(tmp_path)]) == 3


# Expected behavior: invalid config values exit 2.
def test_invalid_config_exit_code(tmp_path: Path) -> None:
    bad = tmp_path / "bad.ini"
    bad.write_text("[classifier]\ndropout = 1.5\n", encoding="utf-8")
    assert main(["stats", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["stats", "--fold", "8", "--out", str(tmp_path)]) == 2


# Expected behavior: a checkpoint from another format version exits 4.
def test_checkpoint_version_exit_code(tmp_path: Path) -> None:
    checkpoint = tmp_path / "fold0" / "ae.ckpt"
    checkpoint.parent.mkdir(parents=True)
    checkpoint.write_bytes(b"NFPR0002{}\n")
    assert main(["extract-features", "--out", str(tmp_path)]) == 4


# Expected behavior: the autoencoder stages write a checkpoint, a loss log and one code column per unit.
def test_autoencoder_stages(tmp_path: Path, tiny_config: Path) -> None:
    out = tmp_path / "run"
    for command in ("phantom", "folds", "train-ae", "extract-features"):
        assert main([command, "--config", str(tiny_config), "--out", str(out)]) == 0
    assert (out / "data" / "volumes" / "phantom-003.rvol").is_file()
    losses = pd.read_csv(out / "fold0" / "ae_loss.csv")
    assert len(losses) == 5
    features = pd.read_csv(out / "fold0" / "ae_features.csv")
    assert list(features.columns) == ["candidate_index", "f0", "f1", "f2", "f3"]
    assert (out / "fold0" / "train-ae.manifest.json").is_file()


# Expected behavior: the pipeline evaluates to seven sensitivities and reruns reproduce the summary exactly.
def test_pipeline_is_reproducible(tmp_path: Path, tiny_config: Path, capsys: pytest.CaptureFixture[str]) -> None:
    config = load_pipeline_config(tiny_config)
    config = config.model_copy(update={"run": config.run.model_copy(update={"regime": "r"})})
    settings = get_settings()
    run_command("pipeline", config, tmp_path / "first", settings)
    run_command("pipeline", config, tmp_path / "second", settings)

    first = tmp_path / "first" / "fold0" / "r_k2" / "summary.json"
    second = tmp_path / "second" / "fold0" / "r_k2" / "summary.json"
    summary = json.loads(first.read_text(encoding="utf-8"))
    assert len(summary["sensitivities"]) == 7
    assert 0.0 <= summary["cpm"] <= 1.0
    assert summary["total_nodules"] == 8
    assert first.read_bytes() == second.read_bytes()
    assert "cpm\t" in capsys.readouterr().out

    predictions = pd.read_csv(tmp_path / "first" / "fold0" / "r_k2" / "predictions.csv")
    assert len(predictions) == 32
    assert predictions["probability"].between(0.0, 1.0).all()
