"""Single-view 2D CNN, per-regime training sets and probability-averaging ensembles.

Patches enter the network channels-first as ``(N, 3, 64, 64)``. Every member
of an ensemble sees the same augmented nodules; the regimes differ only in
how the non-nodule pool is split between members.
"""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from nodulefpr.config import REFERENCE_FLOPS, REFERENCE_PARAMS
from nodulefpr.errors import NoduleFprError, ensure
from nodulefpr.filesystem import read_json, write_json
from nodulefpr.models import ClassifierConfig, EnsembleManifest, ModelStatsRecord, Regime, RegimeSets
from nodulefpr.nn import (
    AdamState,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    MaxPool2,
    Network,
    Softmax,
    adam_step,
    backward,
    load_checkpoint,
    model_stats,
    save_checkpoint,
    xent_loss,
)
from nodulefpr.patches import PATCH_SIZE, Patch3C, PatchLibrary

logger = logging.getLogger(__name__)

CONV_COUNT = 3
INPUT_SHAPE = (3, PATCH_SIZE, PATCH_SIZE)


@dataclass
class CnnModel:
    network: Network

    def __post_init__(self) -> None:
        kinds = [layer.kind for layer in self.network.layers]
        ensure(kinds.count("conv") == CONV_COUNT, "SHAPE_MISMATCH", "A CNN member needs exactly 3 conv layers.")
        ensure(kinds.count("maxpool2") == CONV_COUNT, "SHAPE_MISMATCH", "A CNN member needs exactly 3 pool layers.")
        ensure(kinds.count("dense") == 2, "SHAPE_MISMATCH", "A CNN member needs exactly 2 dense layers.")
        ensure(kinds[-1] == "softmax", "SHAPE_MISMATCH", "A CNN member must end in softmax.")
        kernels = [layer.kernel for layer in self.network.layers if isinstance(layer, Conv2D)]
        ensure(
            all(later <= earlier for earlier, later in zip(kernels, kernels[1:])),
            "SHAPE_MISMATCH",
            f"Kernel sizes must be non-increasing, got {kernels}.",
        )
        head = [layer for layer in self.network.layers if isinstance(layer, Dense)][-1]
        ensure(head.out_features == 2, "SHAPE_MISMATCH", "The classifier head must have two outputs.")


@dataclass
class CnnHistory:
    loss: list[float] = field(default_factory=list)
    # (iteration, validation loss, nodule accuracy, non-nodule accuracy)
    validation: list[tuple[int, float, float, float]] = field(default_factory=list)
    best_iteration: int = 0
    stopped_at: int = 0


@dataclass
class TrainingSet:
    """Channels-first patch stacks for one member."""

    nodules: np.ndarray = field(repr=False)
    non_nodules: np.ndarray = field(repr=False)


@dataclass
class ValidationSet:
    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)


@dataclass
class Ensemble:
    members: list[CnnModel]
    regime: Regime
    cluster_model: str | None = None

    def __post_init__(self) -> None:
        if not self.members:
            raise NoduleFprError("EMPTY_ENSEMBLE", "An ensemble needs at least one member.")
        if self.regime == "s":
            ensure(len(self.members) == 1, "K_MISMATCH", "Regime s trains exactly one network.")

    @property
    def k(self) -> int:
        return len(self.members)


def build_cnn(config: ClassifierConfig | None = None, seed: int = 0, zero: bool = False) -> CnnModel:
    """conv-pool x3, dense(hidden, ReLU) with dropout, dense(2), softmax."""
    cfg = config or ClassifierConfig()
    c1, c2, c3 = cfg.channels
    k1, k2, k3 = cfg.kernels
    flat = c3 * (PATCH_SIZE // 8) ** 2
    layers = [
        Conv2D(3, c1, k1),
        MaxPool2(),
        Conv2D(c1, c2, k2),
        MaxPool2(),
        Conv2D(c2, c3, k3),
        MaxPool2(),
        Flatten(),
    ]
    if cfg.dropout_layers == "all":
        layers.append(Dropout(cfg.dropout))
    layers += [
        Dense(flat, cfg.hidden_units, activation="relu"),
        Dropout(cfg.dropout),
        Dense(cfg.hidden_units, 2, activation="linear"),
        Softmax(),
    ]
    if not zero:
        rng = np.random.default_rng(seed)
        for layer in layers:
            std = cfg.conv_init_std if isinstance(layer, Conv2D) else cfg.dense_init_std
            if "W" in layer.params:
                layer.params["W"][...] = rng.normal(0.0, std, size=layer.params["W"].shape)
    return CnnModel(Network(layers, INPUT_SHAPE, seed=seed))


def to_channels_first(patches: list[Patch3C]) -> np.ndarray:
    if not patches:
        return np.zeros((0, *INPUT_SHAPE), dtype=np.float32)
    return np.stack([patch.pixels for patch in patches]).transpose(0, 3, 1, 2).astype(np.float32)


def build_regime_datasets(
    nodules: list[int],
    non_nodules: list[int],
    regime: Regime,
    assignments: dict[int, int] | None,
    k: int,
    seed: int,
    validation: list[int] | None = None,
) -> RegimeSets:
    """Split the non-nodule pool between ``k`` members according to the regime."""
    ensure(k >= 1, "K_MISMATCH", f"K must be at least 1, got {k}.")
    pool = sorted(non_nodules)

    if regime in ("ae", "dae"):
        if assignments is None:
            raise NoduleFprError("MISSING_ASSIGNMENTS", f"Regime {regime} needs cluster assignments.")
        missing = [index for index in pool if index not in assignments]
        if missing:
            raise NoduleFprError(
                "MISSING_ASSIGNMENTS",
                f"{len(missing)} non-nodules have no cluster id (first: candidate {missing[0]}).",
            )
        out_of_range = {assignments[index] for index in pool} - set(range(k))
        if out_of_range:
            raise NoduleFprError("K_MISMATCH", f"Cluster ids {sorted(out_of_range)} fall outside [0, {k}).")
        member_sets = [[index for index in pool if assignments[index] == cluster] for cluster in range(k)]
    elif regime == "r":
        ensure(len(pool) >= k, "TOO_FEW_SAMPLES", f"{len(pool)} non-nodules cannot be split {k} ways.")
        order = np.random.default_rng(seed).permutation(len(pool))
        member_sets = [sorted(pool[int(i)] for i in part) for part in np.array_split(order, k)]
    elif regime == "a":
        member_sets = [list(pool) for _ in range(k)]
    elif regime == "s":
        ensure(k == 1, "K_MISMATCH", f"Regime s trains one network, got K={k}.")
        member_sets = [list(pool)]
    else:
        raise NoduleFprError("INVALID_VALUE", f"Unknown regime '{regime}'.")

    logger.info("Regime %s: member sizes %s", regime, [len(part) for part in member_sets])
    return RegimeSets(
        regime=regime,
        k=k,
        nodules=sorted(nodules),
        non_nodules=member_sets,
        validation=sorted(validation or []),
        seed=seed,
    )


def load_member_sets(
    library: PatchLibrary,
    sets: RegimeSets,
    seed: int,
    max_translation: int = 4,
) -> tuple[list[TrainingSet], ValidationSet]:
    """Cut patches for every member; nodules are augmented once and shared."""
    augmented: list[Patch3C] = []
    for index in sets.nodules:
        augmented.extend(library.augmented(index, seed=seed + index, max_translation=max_translation))
    nodules = to_channels_first(augmented)
    members = [
        TrainingSet(nodules=nodules, non_nodules=to_channels_first([library.patch3c(i) for i in part]))
        for part in sets.non_nodules
    ]
    held_out = [library.patch3c(index) for index in sets.validation]
    validation = ValidationSet(
        x=to_channels_first(held_out),
        y=np.array([patch.label for patch in held_out], dtype=np.int64),
    )
    return members, validation


def _evaluate(network: Network, validation: ValidationSet, batch_size: int) -> tuple[float, float, float]:
    p1 = _predict_batches(network, validation.x, batch_size)[:, 1]
    loss = xent_loss(p1, validation.y)
    predicted = (p1 >= 0.5).astype(np.int64)

    def accuracy(label: int) -> float:
        mask = validation.y == label
        return float(np.mean(predicted[mask] == label)) if mask.any() else float("nan")

    return loss, accuracy(1), accuracy(0)


def cnn_train(
    dataset: TrainingSet,
    config: ClassifierConfig,
    seed: int,
    validation: ValidationSet | None = None,
) -> tuple[CnnModel, CnnHistory]:
    """Adam on class-balanced batches with validation-loss early stopping."""
    if len(dataset.nodules) == 0 or len(dataset.non_nodules) == 0:
        raise NoduleFprError("SINGLE_CLASS", "A training set needs both nodules and non-nodules.")
    init_seed, batch_seed = np.random.SeedSequence(seed).generate_state(2)
    model = build_cnn(config, seed=int(init_seed))
    network = model.network
    rng = np.random.default_rng(batch_seed)
    adam = AdamState(base_lr=config.learning_rate, decay_rate=config.decay_rate, decay_every=config.decay_every)
    params = dict(network.parameters())
    history = CnnHistory()

    n_pos = config.batch_size // 2
    n_neg = config.batch_size - n_pos
    labels = np.concatenate([np.ones(n_pos, dtype=np.int64), np.zeros(n_neg, dtype=np.int64)])
    use_validation = validation is not None and len(validation.y) > 0
    best_loss, best_state, stale = np.inf, network.state(), 0

    for iteration in range(config.iterations):
        batch = np.concatenate(
            [
                dataset.nodules[rng.integers(0, len(dataset.nodules), size=n_pos)],
                dataset.non_nodules[rng.integers(0, len(dataset.non_nodules), size=n_neg)],
            ]
        )
        loss, grads = backward(network, batch, "xent", labels, train=True)
        if not np.isfinite(loss):
            raise NoduleFprError("NON_FINITE_LOSS", f"CNN loss became {loss} at iteration {iteration}.")
        adam_step(adam, params, grads)
        history.loss.append(loss)
        history.stopped_at = iteration + 1

        if (iteration + 1) % config.log_every == 0:
            logger.info("CNN iteration %d/%d loss=%.4f", iteration + 1, config.iterations, loss)
        if not use_validation or (iteration + 1) % config.eval_every != 0:
            continue

        assert validation is not None
        val_loss, nodule_acc, non_nodule_acc = _evaluate(network, validation, config.batch_size)
        history.validation.append((iteration + 1, val_loss, nodule_acc, non_nodule_acc))
        if val_loss < best_loss:
            best_loss, best_state, stale = val_loss, network.state(), 0
            history.best_iteration = iteration + 1
        else:
            stale += 1
            if stale >= config.patience:
                logger.info(
                    "Early stop at iteration %d; best validation loss %.4f at %d.",
                    iteration + 1,
                    best_loss,
                    history.best_iteration,
                )
                break

    if use_validation and history.best_iteration > 0:
        network.load_state(best_state)
    else:
        history.best_iteration = history.stopped_at
    return model, history


async def train_ensemble(
    datasets: list[TrainingSet],
    config: ClassifierConfig,
    seeds: list[int],
    workers: int = 4,
    validation: ValidationSet | None = None,
) -> list[tuple[CnnModel, CnnHistory]]:
    """Train members concurrently in worker threads; results keep member order."""
    ensure(len(datasets) == len(seeds), "K_MISMATCH", "One seed is needed per member.")
    ensure(bool(datasets), "EMPTY_ENSEMBLE", "No member training sets were given.")
    semaphore = asyncio.Semaphore(max(1, workers))

    async def run(member: int) -> tuple[CnnModel, CnnHistory]:
        async with semaphore:
            logger.info("Training member %d/%d", member + 1, len(datasets))
            return await asyncio.to_thread(cnn_train, datasets[member], config, seeds[member], validation)

    return list(await asyncio.gather(*(run(member) for member in range(len(datasets)))))


def _predict_batches(network: Network, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
    if len(x) == 0:
        return np.zeros((0, 2), dtype=np.float64)
    chunks = [network.forward(x[start:start + batch_size]) for start in range(0, len(x), batch_size)]
    return np.concatenate(chunks).astype(np.float64)


def predict_many(model: CnnModel, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """(N, 2) class probabilities for a channels-first batch, inference mode."""
    return _predict_batches(model.network, np.asarray(x, dtype=np.float32), batch_size)


def predict_single(model: CnnModel, patch: Patch3C) -> tuple[float, float]:
    p = predict_many(model, to_channels_first([patch]))[0]
    return float(p[0]), float(p[1])


def predict_ensemble_many(ensemble: Ensemble, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
    if not ensemble.members:
        raise NoduleFprError("EMPTY_ENSEMBLE", "Cannot predict with an empty ensemble.")
    total = np.zeros((len(x), 2), dtype=np.float64)
    for member in ensemble.members:
        total += predict_many(member, x, batch_size)
    return total / len(ensemble.members)


def predict_ensemble(ensemble: Ensemble, patch: Patch3C) -> tuple[float, float]:
    """Unweighted mean of the members' probability pairs."""
    p = predict_ensemble_many(ensemble, to_channels_first([patch]))[0]
    return float(p[0]), float(p[1])


def ensemble_stats(config: ClassifierConfig | None = None, members: int = 5) -> ModelStatsRecord:
    member_parameters, member_flops = model_stats(build_cnn(config, zero=True).network)
    parameters, flops = members * member_parameters, members * member_flops
    return ModelStatsRecord(
        members=members,
        member_parameters=member_parameters,
        member_flops=member_flops,
        parameters=parameters,
        flops=flops,
        reference_parameters=REFERENCE_PARAMS,
        reference_flops=REFERENCE_FLOPS,
        parameter_ratio=parameters / REFERENCE_PARAMS,
        flops_ratio=flops / REFERENCE_FLOPS,
    )


def save_ensemble(
    directory: str | Path,
    ensemble: Ensemble,
    seeds: list[int],
    config_hash: str,
    iterations: list[int],
) -> Path:
    base = Path(directory)
    names = []
    for idx, (member, seed, iteration) in enumerate(zip(ensemble.members, seeds, iterations)):
        name = f"member{idx}.ckpt"
        save_checkpoint(base / name, member.network, seed=seed, iteration=iteration, extra={"model": "cnn"})
        names.append(name)
    manifest = EnsembleManifest(
        regime=ensemble.regime,
        k=ensemble.k,
        members=names,
        seeds=seeds,
        cluster_model=ensemble.cluster_model,
        config_hash=config_hash,
        iterations=iterations,
    )
    return write_json(base / "ensemble.json", manifest)


def load_ensemble(directory: str | Path) -> tuple[Ensemble, EnsembleManifest]:
    base = Path(directory)
    manifest = EnsembleManifest.model_validate(read_json(base / "ensemble.json"))
    ensure(len(manifest.members) == manifest.k, "CHECKPOINT_INVALID", "Ensemble manifest K disagrees with members.")
    members = []
    for name in manifest.members:
        checkpoint = load_checkpoint(base / name)
        if checkpoint.header.get("extra", {}).get("model") != "cnn":
            raise NoduleFprError("CHECKPOINT_INVALID", f"{base / name}: checkpoint does not hold a CNN member.")
        members.append(CnnModel(checkpoint.network))
    return Ensemble(members=members, regime=manifest.regime, cluster_model=manifest.cluster_model), manifest
