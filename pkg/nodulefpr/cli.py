"""Command-line entry point: one subcommand per pipeline stage.

Every artifact lands under ``--out`` with a fixed name; each command also
writes ``<command>.manifest.json`` next to what it produced.
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd
from pydantic import ValidationError

from nodulefpr import __version__
from nodulefpr.autoencoder import (
    ae_encode_many,
    ae_train,
    export_features,
    load_autoencoder,
    load_features,
    save_autoencoder,
)
from nodulefpr.categorizer import (
    categorize,
    cluster_purity,
    cluster_sizes,
    load_assignments,
    load_cluster_model,
    save_assignments,
    save_cluster_model,
)
from nodulefpr.classifier import (
    Ensemble,
    build_regime_datasets,
    ensemble_stats,
    load_ensemble,
    load_member_sets,
    predict_ensemble_many,
    save_ensemble,
    to_channels_first,
    train_ensemble,
)
from nodulefpr.config import (
    Settings,
    config_hash,
    configure_logging,
    get_settings,
    load_pipeline_config,
    stage_seed,
    validate_config,
)
from nodulefpr.errors import NoduleFprError, ensure
from nodulefpr.filesystem import read_json, require_artifact, sha256_file, write_json
from nodulefpr.froc import EvalInput, FrocCurve, compare_regimes, evaluate, froc_table, plot_froc
from nodulefpr.models import REGIMES, EvalSummary, FoldSplit, PipelineConfig, RegimeSets, RunManifest
from nodulefpr.patches import PatchLibrary, build_folds, load_fold_plan, save_fold_plan
from nodulefpr.phantom import gen_dataset, load_structures
from nodulefpr.volume_io import Candidate, load_annotations, load_candidates, save_candidates

logger = logging.getLogger(__name__)


@dataclass
class RunContext:
    config: PipelineConfig
    out: Path
    settings: Settings

    @property
    def fold(self) -> int:
        return self.config.run.fold

    @property
    def regime(self) -> str:
        return self.config.run.regime

    @property
    def family(self) -> str:
        # Autoencoder flavour feeding the categorizer.
        return "dae" if self.regime == "dae" else "ae"

    @property
    def k(self) -> int:
        return 1 if self.regime == "s" else self.config.categorizer.k

    @property
    def data_dir(self) -> Path:
        return Path(self.config.data.data_dir) if self.config.data.data_dir else self.out / "data"

    @property
    def fold_dir(self) -> Path:
        return self.out / f"fold{self.fold}"

    @property
    def regime_dir(self) -> Path:
        return self.fold_dir / f"{self.regime}_k{self.k}"

    def seed(self, stage: str) -> int:
        return stage_seed(self.config.run.master_seed, stage)

    def with_run(self, regime: str | None = None, k: int | None = None) -> "RunContext":
        payload = self.config.model_dump()
        if regime is not None:
            payload["run"]["regime"] = regime
        if k is not None:
            payload["categorizer"]["k"] = k
        return RunContext(config=validate_config(payload), out=self.out, settings=self.settings)


def _relative(ctx: RunContext, path: Path) -> str:
    resolved = path.resolve()
    return str(resolved.relative_to(ctx.out)) if resolved.is_relative_to(ctx.out) else str(resolved)


def _write_manifest(
    ctx: RunContext,
    command: str,
    directory: Path,
    started: float,
    outputs: list[Path],
    inputs: list[Path] | None = None,
    seeds: dict[str, int] | None = None,
) -> Path:
    manifest = RunManifest(
        command=command,
        version=__version__,
        config_hash=config_hash(ctx.config),
        seeds=seeds or {},
        inputs={_relative(ctx, path): sha256_file(path) for path in inputs or []},
        outputs=[_relative(ctx, path) for path in outputs],
        duration_s=round(time.perf_counter() - started, 3),
    )
    return write_json(directory / f"{command}.manifest.json", manifest)


def _fold_split(ctx: RunContext) -> FoldSplit:
    plan = load_fold_plan(ctx.out / "folds.json")
    ensure(ctx.fold < plan.fold_count, "INVALID_CONFIG", f"Fold {ctx.fold} is outside the {plan.fold_count}-fold plan.")
    return plan.folds[ctx.fold]


def _candidates(ctx: RunContext) -> list[Candidate]:
    return load_candidates(ctx.data_dir / "candidates.csv")


def _select(candidates: list[Candidate], scans: list[str], label: int | None = None) -> list[int]:
    wanted = set(scans)
    picked = []
    for index, candidate in enumerate(candidates):
        if candidate.scan_id not in wanted:
            continue
        if label is not None:
            ensure(candidate.label is not None, "UNKNOWN_LABEL", f"Candidate {index} has no class label.")
            if candidate.label != label:
                continue
        picked.append(index)
    return picked


def _library(ctx: RunContext, candidates: list[Candidate]) -> PatchLibrary:
    return PatchLibrary(ctx.data_dir / "volumes", candidates)


def cmd_phantom(ctx: RunContext) -> list[Path]:
    started = time.perf_counter()
    dataset = asyncio.run(gen_dataset(ctx.config.phantom, ctx.data_dir, workers=ctx.settings.workers))
    outputs = [dataset.directory / name for name in ("candidates.csv", "annotations.csv", "structures.csv")]
    _write_manifest(ctx, "phantom", ctx.data_dir, started, outputs, seeds={"phantom": ctx.config.phantom.seed})
    return outputs


def cmd_folds(ctx: RunContext) -> list[Path]:
    started = time.perf_counter()
    candidates_path = require_artifact(ctx.data_dir / "candidates.csv")
    scans = sorted({candidate.scan_id for candidate in load_candidates(candidates_path)})
    seed = ctx.seed("folds")
    plan = build_folds(scans, seed, ctx.config.folds.fold_count, ctx.config.folds.validation_fraction)
    target = save_fold_plan(ctx.out / "folds.json", plan)
    _write_manifest(ctx, "folds", ctx.out, started, [target], [candidates_path], {"folds": seed})
    return [target]


def cmd_train_ae(ctx: RunContext) -> list[Path]:
    started = time.perf_counter()
    split = _fold_split(ctx)
    candidates = _candidates(ctx)
    library = _library(ctx, candidates)
    train_ids = _select(candidates, split.train, label=0)
    validation_ids = _select(candidates, split.validation, label=0)
    seed = ctx.seed(f"fold{ctx.fold}/{ctx.family}")

    model, history, adam = ae_train(
        [library.patch2d(index) for index in train_ids],
        ctx.config.autoencoder,
        seed,
        denoising=ctx.family == "dae",
        validation=[library.patch2d(index) for index in validation_ids] or None,
    )
    checkpoint = save_autoencoder(ctx.fold_dir / f"{ctx.family}.ckpt", model, adam, seed, len(history.loss))

    validation = dict(history.validation)
    losses = pd.DataFrame(
        {
            "iteration": np.arange(1, len(history.loss) + 1),
            "loss": history.loss,
            "validation_loss": [validation.get(step, np.nan) for step in range(1, len(history.loss) + 1)],
        }
    )
    loss_path = ctx.fold_dir / f"{ctx.family}_loss.csv"
    losses.to_csv(loss_path, index=False)
    outputs = [checkpoint, loss_path]
    _write_manifest(ctx, "train-ae", ctx.fold_dir, started, outputs, [ctx.out / "folds.json"], {ctx.family: seed})
    return outputs


def cmd_extract_features(ctx: RunContext) -> list[Path]:
    started = time.perf_counter()
    checkpoint = require_artifact(ctx.fold_dir / f"{ctx.family}.ckpt")
    model = load_autoencoder(checkpoint)
    split = _fold_split(ctx)
    candidates = _candidates(ctx)
    library = _library(ctx, candidates)
    ids = _select(candidates, split.train, label=0)
    features = ae_encode_many(model, [library.patch2d(index) for index in ids])
    target = export_features(ctx.fold_dir / f"{ctx.family}_features.csv", ids, features)
    _write_manifest(ctx, "extract-features", ctx.fold_dir, started, [target], [checkpoint])
    return [target]


def cmd_cluster(ctx: RunContext) -> list[Path]:
    started = time.perf_counter()
    features_path = ctx.fold_dir / f"{ctx.family}_features.csv"
    ids, features = load_features(features_path)
    settings = ctx.config.categorizer
    seed = ctx.seed(f"fold{ctx.fold}/{ctx.family}/k{settings.k}/cluster")
    model = categorize(features, settings.k, seed, settings.restarts, settings.zero_eps, settings.max_iter)
    logger.info("Cluster sizes: %s", cluster_sizes(model))

    structures_path = ctx.data_dir / "structures.csv"
    if structures_path.exists():
        structures = load_structures(structures_path)
        table, purity = cluster_purity(model.assignments, [structures[index] for index in ids])
        logger.info("Cluster purity against phantom structures: %.3f\n%s", purity, table.to_string())

    model_path = save_cluster_model(ctx.fold_dir / f"{ctx.family}_clusters.ckpt", model)
    assignments_path = save_assignments(ctx.fold_dir / f"{ctx.family}_clusters.csv", ids, model.assignments)
    outputs = [model_path, assignments_path]
    _write_manifest(ctx, "cluster", ctx.fold_dir, started, outputs, [features_path], {"cluster": seed})
    return outputs


def cmd_build_sets(ctx: RunContext) -> list[Path]:
    started = time.perf_counter()
    split = _fold_split(ctx)
    candidates = _candidates(ctx)
    inputs = [ctx.out / "folds.json", ctx.data_dir / "candidates.csv"]
    assignments = None
    if ctx.regime in ("ae", "dae"):
        model_path = ctx.fold_dir / f"{ctx.family}_clusters.ckpt"
        fitted = load_cluster_model(model_path)
        ensure(
            fitted.k == ctx.k,
            "K_MISMATCH",
            f"Clusters were fitted with K={fitted.k} but the run asks for K={ctx.k}; rerun `nodulefpr cluster`.",
        )
        assignments_path = ctx.fold_dir / f"{ctx.family}_clusters.csv"
        assignments = load_assignments(assignments_path)
        inputs += [model_path, assignments_path]

    seed = ctx.seed(f"fold{ctx.fold}/{ctx.regime}_k{ctx.k}/sets")
    sets = build_regime_datasets(
        nodules=_select(candidates, split.train, label=1),
        non_nodules=_select(candidates, split.train, label=0),
        regime=ctx.regime,  # type: ignore[arg-type]
        assignments=assignments,
        k=ctx.k,
        seed=seed,
        validation=_select(candidates, split.validation),
    )
    target = write_json(ctx.regime_dir / "sets.json", sets)
    _write_manifest(ctx, "build-sets", ctx.regime_dir, started, [target], inputs, {"sets": seed})
    return [target]


def cmd_train_ensemble(ctx: RunContext) -> list[Path]:
    started = time.perf_counter()
    sets_path = ctx.regime_dir / "sets.json"
    sets = RegimeSets.model_validate(read_json(sets_path))
    candidates = _candidates(ctx)
    library = _library(ctx, candidates)
    augment_seed = ctx.seed(f"fold{ctx.fold}/augment")
    members, validation = load_member_sets(
        library, sets, augment_seed, max_translation=ctx.config.classifier.max_translation
    )
    seeds = [ctx.seed(f"fold{ctx.fold}/{ctx.regime}_k{ctx.k}/member{idx}") for idx in range(len(members))]

    results = asyncio.run(
        train_ensemble(members, ctx.config.classifier, seeds, workers=ctx.settings.workers, validation=validation)
    )
    cluster_model = f"../{ctx.family}_clusters.ckpt" if sets.regime in ("ae", "dae") else None
    ensemble = Ensemble(members=[model for model, _ in results], regime=sets.regime, cluster_model=cluster_model)
    manifest_path = save_ensemble(
        ctx.regime_dir,
        ensemble,
        seeds,
        config_hash(ctx.config),
        [history.best_iteration for _, history in results],
    )

    rows = [
        {
            "member": idx,
            "iteration": step,
            "validation_loss": loss,
            "nodule_accuracy": nodule_acc,
            "non_nodule_accuracy": non_nodule_acc,
        }
        for idx, (_, history) in enumerate(results)
        for step, loss, nodule_acc, non_nodule_acc in history.validation
    ]
    history_path = ctx.regime_dir / "history.csv"
    pd.DataFrame(
        rows, columns=["member", "iteration", "validation_loss", "nodule_accuracy", "non_nodule_accuracy"]
    ).to_csv(history_path, index=False)

    outputs = [manifest_path, history_path] + [ctx.regime_dir / f"member{idx}.ckpt" for idx in range(len(seeds))]
    seed_map = {f"member{idx}": seed for idx, seed in enumerate(seeds)} | {"augment": augment_seed}
    _write_manifest(ctx, "train-ensemble", ctx.regime_dir, started, outputs, [sets_path], seed_map)
    return outputs


def cmd_predict(ctx: RunContext) -> list[Path]:
    started = time.perf_counter()
    ensemble, _ = load_ensemble(ctx.regime_dir)
    split = _fold_split(ctx)
    candidates = _candidates(ctx)
    library = _library(ctx, candidates)
    test_ids = _select(candidates, split.test)
    probabilities = np.zeros(0)
    if test_ids:
        x = to_channels_first([library.patch3c(index) for index in test_ids])
        probabilities = np.clip(predict_ensemble_many(ensemble, x)[:, 1], 0.0, 1.0)
    scored = [candidates[index].with_probability(float(p)) for index, p in zip(test_ids, probabilities)]
    target = save_candidates(ctx.regime_dir / "predictions.csv", scored)
    _write_manifest(ctx, "predict", ctx.regime_dir, started, [target], [ctx.regime_dir / "ensemble.json"])
    return [target]


def cmd_evaluate(ctx: RunContext) -> list[Path]:
    started = time.perf_counter()
    predictions_path = ctx.regime_dir / "predictions.csv"
    annotations_path = ctx.data_dir / "annotations.csv"
    irrelevant_path = ctx.data_dir / "irrelevant.csv"
    split = _fold_split(ctx)
    settings = ctx.config.evaluation
    data = EvalInput(
        scans=split.test,
        candidates=load_candidates(predictions_path),
        annotations=load_annotations(annotations_path),
        irrelevant=load_annotations(irrelevant_path) if irrelevant_path.exists() else [],
    )
    seed = ctx.seed(f"fold{ctx.fold}/{ctx.regime}_k{ctx.k}/bootstrap")
    curve, summary = evaluate(
        data,
        resamples=settings.bootstrap_resamples,
        seed=seed,
        levels=settings.fp_levels,
        radius_scale=settings.hit_radius_scale,
    )
    froc_path = ctx.regime_dir / "froc.csv"
    froc_table(curve).to_csv(froc_path, index=False)
    summary_path = write_json(ctx.regime_dir / "summary.json", summary)
    outputs = [froc_path, summary_path]
    if settings.plot:
        label = f"{ctx.regime.upper()}{ctx.k}"
        outputs.append(plot_froc({label: curve}, ctx.regime_dir / "froc.svg", {label: summary}, settings.fp_levels))

    for level, value in zip(summary.fp_levels, summary.sensitivities):
        print(f"sensitivity@{level:g}\t{value:.4f}")
    print(f"cpm\t{summary.cpm:.4f}")
    _write_manifest(
        ctx, "evaluate", ctx.regime_dir, started, outputs, [predictions_path, annotations_path], {"bootstrap": seed}
    )
    return outputs


def cmd_stats(ctx: RunContext) -> list[Path]:
    started = time.perf_counter()
    members = ctx.k
    record = ensemble_stats(ctx.config.classifier, members)
    print(f"members\t{record.members}")
    print(f"parameters\t{record.parameters}\t(per member {record.member_parameters})")
    print(f"flops\t{record.flops}\t(per member {record.member_flops})")
    print(f"parameter_ratio\t{record.parameter_ratio:.3f}\t(reference {record.reference_parameters})")
    print(f"flops_ratio\t{record.flops_ratio:.3f}\t(reference {record.reference_flops})")
    target = write_json(ctx.out / "stats.json", record)
    _write_manifest(ctx, "stats", ctx.out, started, [target])
    return [target]


def _read_curve(path: Path) -> FrocCurve:
    frame = pd.read_csv(require_artifact(path))
    return FrocCurve(
        thresholds=frame["threshold"].to_numpy(dtype=np.float64),
        fp_per_scan=frame["fp_per_scan"].to_numpy(dtype=np.float64),
        sensitivity=frame["sensitivity"].to_numpy(dtype=np.float64),
    )


def cmd_compare(ctx: RunContext) -> list[Path]:
    started = time.perf_counter()
    summaries: dict[str, EvalSummary] = {}
    curves: dict[str, FrocCurve] = {}
    for summary_path in sorted(ctx.fold_dir.glob("*_k*/summary.json")):
        label = summary_path.parent.name
        summaries[label] = EvalSummary.model_validate(read_json(summary_path))
        curves[label] = _read_curve(summary_path.parent / "froc.csv")
    if not summaries:
        raise NoduleFprError("MISSING_ARTIFACT", f"No evaluated runs under {ctx.fold_dir}. Run `nodulefpr evaluate` first.")

    table = compare_regimes(summaries)
    table_path = ctx.out / "compare.csv"
    table.to_csv(table_path, index=False)
    print(table.to_string(index=False))
    plot_path = plot_froc(curves, ctx.out / "compare.svg", summaries, ctx.config.evaluation.fp_levels)
    outputs = [table_path, plot_path]
    _write_manifest(ctx, "compare", ctx.out, started, outputs)
    return outputs


def _needs(path: Path) -> bool:
    return not path.exists()


def cmd_pipeline(ctx: RunContext) -> list[Path]:
    outputs: list[Path] = []
    if _needs(ctx.data_dir / "candidates.csv"):
        outputs += cmd_phantom(ctx)
    if _needs(ctx.out / "folds.json"):
        outputs += cmd_folds(ctx)
    if ctx.regime in ("ae", "dae"):
        outputs += cmd_train_ae(ctx)
        outputs += cmd_extract_features(ctx)
        outputs += cmd_cluster(ctx)
    for step in (cmd_build_sets, cmd_train_ensemble, cmd_predict, cmd_evaluate):
        outputs += step(ctx)
    return outputs


def cmd_sweep_k(ctx: RunContext) -> list[Path]:
    outputs: list[Path] = []
    base = ctx.with_run(regime="ae")
    if _needs(base.data_dir / "candidates.csv"):
        outputs += cmd_phantom(base)
    if _needs(base.out / "folds.json"):
        outputs += cmd_folds(base)
    if _needs(base.fold_dir / "ae_features.csv"):
        outputs += cmd_train_ae(base)
        outputs += cmd_extract_features(base)
    for k in ctx.config.categorizer.sweep_k:
        run = base.with_run(k=k)
        logger.info("Category sweep: K=%d", k)
        for step in (cmd_cluster, cmd_build_sets, cmd_train_ensemble, cmd_predict, cmd_evaluate):
            outputs += step(run)
    outputs += cmd_compare(base)
    return outputs


COMMANDS: dict[str, Callable[[RunContext], list[Path]]] = {
    "phantom": cmd_phantom,
    "folds": cmd_folds,
    "train-ae": cmd_train_ae,
    "extract-features": cmd_extract_features,
    "cluster": cmd_cluster,
    "build-sets": cmd_build_sets,
    "train-ensemble": cmd_train_ensemble,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "stats": cmd_stats,
    "pipeline": cmd_pipeline,
    "sweep-k": cmd_sweep_k,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nodulefpr", description="Pulmonary nodule false positive reduction.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="INI pipeline config (defaults if omitted).")
    common.add_argument("--fold", type=int, default=None, help="Cross-validation fold to run.")
    common.add_argument("--regime", choices=REGIMES, default=None, help="Training-set regime.")
    common.add_argument("--k", type=int, default=None, help="Number of non-nodule categories / members.")
    common.add_argument("--seed", type=int, default=None, help="Master seed.")
    common.add_argument("--out", type=Path, default=Path("runs"), help="Artifact directory.")
    commands = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        commands.add_parser(name, parents=[common])
    return parser


def apply_overrides(config: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    payload = config.model_dump()
    if args.fold is not None:
        payload["run"]["fold"] = args.fold
    if args.regime is not None:
        payload["run"]["regime"] = args.regime
    if args.k is not None:
        payload["categorizer"]["k"] = args.k
    if args.seed is not None:
        payload["run"]["master_seed"] = args.seed
    return validate_config(payload)


def run_command(command: str, config: PipelineConfig, out: Path, settings: Settings | None = None) -> list[Path]:
    ensure(command in COMMANDS, "INVALID_CONFIG", f"Unknown command '{command}'.")
    ctx = RunContext(config=config, out=out.resolve(), settings=settings or get_settings())
    logger.info("nodulefpr %s (fold %d, regime %s, K=%d)", command, ctx.fold, ctx.regime, ctx.k)
    return COMMANDS[command](ctx)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = get_settings()
        configure_logging(settings.log_level)
        config = apply_overrides(load_pipeline_config(args.config), args)
        run_command(args.command, config, args.out, settings)
    except NoduleFprError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except ValidationError as exc:
        logger.error("INVALID_CONFIG: %s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
