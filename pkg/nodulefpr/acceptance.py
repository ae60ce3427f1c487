"""End-to-end phantom check: regimes s, a and ae on one fold, then their comparison."""

from __future__ import annotations

import logging
import time
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel

from nodulefpr.cli import run_command
from nodulefpr.config import Settings, validate_config
from nodulefpr.filesystem import read_json, require_artifact, write_json
from nodulefpr.models import EvalSummary, PipelineConfig

logger = logging.getLogger(__name__)

ACCEPTANCE_REGIMES = ("s", "a", "ae")
CPM_MARGIN = 0.02
MIN_LOSS_DROP = 0.5
TIME_LIMIT_S = 600.0
LOSS_WINDOW = 100


class AcceptanceReport(BaseModel):
    cpm: dict[str, float]
    ae_initial_loss: float
    ae_best_smoothed_loss: float
    ae_loss_drop: float
    seconds: float
    workers: int

    def failures(self) -> list[str]:
        found: list[str] = []
        if self.cpm["ae"] < self.cpm["s"] + CPM_MARGIN:
            found.append(f"AE CPM {self.cpm['ae']:.4f} is not {CPM_MARGIN} above S CPM {self.cpm['s']:.4f}")
        if self.cpm["a"] < self.cpm["s"]:
            found.append(f"A CPM {self.cpm['a']:.4f} is below S CPM {self.cpm['s']:.4f}")
        if self.ae_loss_drop < MIN_LOSS_DROP:
            found.append(f"AE loss fell {self.ae_loss_drop:.1%}, needs {MIN_LOSS_DROP:.0%}")
        if self.seconds >= TIME_LIMIT_S:
            found.append(f"run took {self.seconds:.0f}s, limit {TIME_LIMIT_S:.0f}s")
        return found


def loss_drop(losses: list[float] | np.ndarray, window: int = LOSS_WINDOW) -> tuple[float, float, float]:
    """Initial loss, lowest running mean over ``window`` steps, and the fractional drop between them."""
    values = np.asarray(losses, dtype=np.float64)
    if values.size == 0:
        return float("nan"), float("nan"), 0.0
    width = min(window, values.size)
    smoothed = np.convolve(values, np.ones(width) / width, mode="valid")
    initial, best = float(values[0]), float(smoothed.min())
    return initial, best, 1.0 - best / initial if initial > 0 else 0.0


def run_acceptance(config: PipelineConfig, out: Path, settings: Settings) -> AcceptanceReport:
    started = time.perf_counter()
    fold_dir = out.resolve() / f"fold{config.run.fold}"
    cpm: dict[str, float] = {}
    for regime in ACCEPTANCE_REGIMES:
        payload = config.model_dump()
        payload["run"]["regime"] = regime
        regime_config = validate_config(payload)
        logger.info("Acceptance: regime %s", regime)
        run_command("pipeline", regime_config, out, settings)
        k = 1 if regime == "s" else regime_config.categorizer.k
        summary = EvalSummary.model_validate(read_json(fold_dir / f"{regime}_k{k}" / "summary.json"))
        cpm[regime] = summary.cpm
    run_command("compare", config, out, settings)

    losses = pd.read_csv(require_artifact(fold_dir / "ae_loss.csv"))["loss"].to_numpy()
    initial, best, drop = loss_drop(losses)
    report = AcceptanceReport(
        cpm=cpm,
        ae_initial_loss=initial,
        ae_best_smoothed_loss=best,
        ae_loss_drop=drop,
        seconds=time.perf_counter() - started,
        workers=settings.workers,
    )
    write_json(out / "acceptance.json", report)
    logger.info(
        "Acceptance: CPM %s, AE loss drop %.1f%%, %.0fs",
        {name: round(value, 4) for name, value in cpm.items()},
        100 * drop,
        report.seconds,
    )
    return report
