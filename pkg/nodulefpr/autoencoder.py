from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from nodulefpr.errors import NoduleFprError, ensure
from nodulefpr.filesystem import require_artifact, resolve_output_path
from nodulefpr.models import AutoencoderConfig
from nodulefpr.nn import AdamState, Dense, Network, adam_step, backward, load_checkpoint, mse_loss, save_checkpoint
from nodulefpr.patches import PATCH_SIZE, Patch2D

logger = logging.getLogger(__name__)

INPUT_DIM = PATCH_SIZE * PATCH_SIZE
ENCODER_LAYERS = 4


@dataclass
class AeModel:
    network: Network
    hidden_widths: tuple[int, int, int]
    code_dim: int
    denoising: bool = False

    def __post_init__(self) -> None:
        ensure(len(self.network.layers) == 2 * ENCODER_LAYERS, "SHAPE_MISMATCH", "Autoencoder needs 8 dense layers.")
        ensure(
            self.network.shapes[ENCODER_LAYERS] == (self.code_dim,),
            "SHAPE_MISMATCH",
            f"Middle layer has shape {self.network.shapes[ENCODER_LAYERS]}, expected ({self.code_dim},).",
        )


@dataclass
class AeHistory:
    loss: list[float] = field(default_factory=list)
    validation: list[tuple[int, float]] = field(default_factory=list)


def build_autoencoder(
    hidden_widths: tuple[int, int, int] | list[int] = (1024, 512, 384),
    code_dim: int = 256,
    seed: int = 0,
    init_std: float = 0.05,
) -> AeModel:
    """Symmetric 8-layer dense autoencoder; weights N(0, init_std^2), zero biases."""
    w1, w2, w3 = hidden_widths
    widths = [INPUT_DIM, w1, w2, w3, code_dim, w3, w2, w1, INPUT_DIM]
    layers = [
        Dense(fan_in, fan_out, activation="linear" if idx == 7 else "relu")
        for idx, (fan_in, fan_out) in enumerate(zip(widths, widths[1:]))
    ]
    rng = np.random.default_rng(seed)
    for layer in layers:
        layer.params["W"][...] = rng.normal(0.0, init_std, size=layer.params["W"].shape)
    network = Network(layers, (INPUT_DIM,), seed=seed)
    return AeModel(network=network, hidden_widths=(w1, w2, w3), code_dim=code_dim)


def _as_matrix(patches: list[Patch2D]) -> np.ndarray:
    return np.stack([patch.pixels.reshape(-1) for patch in patches]).astype(np.float32)


def mask_noise(x: np.ndarray, noise_level: float, rng: np.random.Generator) -> np.ndarray:
    if noise_level == 0.0:
        return x
    return x * (rng.random(x.shape) >= noise_level).astype(x.dtype)


def ae_corrupt(patch: Patch2D, noise_level: float, seed: int) -> Patch2D:
    """Masking noise: each pixel set to 0 with probability ``noise_level``."""
    ensure(0.0 <= noise_level < 1.0, "INVALID_VALUE", f"Noise level must be in [0, 1), got {noise_level}.")
    rng = np.random.default_rng(seed)
    return Patch2D(pixels=mask_noise(patch.pixels, noise_level, rng), source=patch.source)


def ae_train(
    patches: list[Patch2D],
    config: AutoencoderConfig,
    seed: int,
    denoising: bool = False,
    validation: list[Patch2D] | None = None,
) -> tuple[AeModel, AeHistory, AdamState]:
    ensure(bool(patches), "EMPTY_INPUT", "Autoencoder training needs at least one patch.")
    init_seed, batch_seed, noise_seed = np.random.SeedSequence(seed).generate_state(3)
    model = build_autoencoder(config.hidden_widths, config.code_dim, seed=int(init_seed), init_std=config.init_std)
    model.denoising = denoising
    network = model.network

    data = _as_matrix(patches)
    held_out = _as_matrix(validation) if validation else None
    batch_rng = np.random.default_rng(batch_seed)
    noise_rng = np.random.default_rng(noise_seed)
    adam = AdamState(base_lr=config.learning_rate, decay_rate=config.decay_rate, decay_every=config.decay_every)
    params = dict(network.parameters())
    history = AeHistory()

    for iteration in range(config.iterations):
        clean = data[batch_rng.integers(0, len(data), size=config.batch_size)]
        noisy = mask_noise(clean, config.noise_level, noise_rng) if denoising else clean
        loss, grads = backward(network, noisy, "mse", clean, train=True)
        if not np.isfinite(loss):
            raise NoduleFprError("NON_FINITE_LOSS", f"Autoencoder loss became {loss} at iteration {iteration}.")
        adam_step(adam, params, grads)
        history.loss.append(loss)

        if held_out is not None and (iteration + 1) % config.eval_every == 0:
            history.validation.append((iteration + 1, mse_loss(held_out, network.forward(held_out))))
        if (iteration + 1) % config.log_every == 0:
            logger.info(
                "%s iteration %d/%d loss=%.4f lr=%.6f",
                "DAE" if denoising else "AE",
                iteration + 1,
                config.iterations,
                loss,
                adam.effective_lr(),
            )
    return model, history, adam


def ae_encode_many(model: AeModel, patches: list[Patch2D], batch_size: int = 256) -> np.ndarray:
    if not patches:
        return np.zeros((0, model.code_dim), dtype=np.float32)
    chunks = [
        model.network.forward(_as_matrix(patches[start:start + batch_size]), stop=ENCODER_LAYERS)
        for start in range(0, len(patches), batch_size)
    ]
    return np.concatenate(chunks, axis=0)


def ae_encode(model: AeModel, patch: Patch2D) -> np.ndarray:
    """The post-ReLU middle-layer code of one patch."""
    return ae_encode_many(model, [patch])[0]


def ae_decode(model: AeModel, code: np.ndarray) -> np.ndarray:
    batch = np.atleast_2d(np.asarray(code, dtype=np.float32))
    return model.network.forward(batch, start=ENCODER_LAYERS)


def ae_reconstruct(model: AeModel, patch: Patch2D) -> np.ndarray:
    out = model.network.forward(patch.pixels.reshape(1, -1).astype(np.float32))
    return out.reshape(PATCH_SIZE, PATCH_SIZE)


def save_autoencoder(path: str | Path, model: AeModel, adam: AdamState | None, seed: int, iteration: int) -> Path:
    extra = {
        "model": "autoencoder",
        "hidden_widths": list(model.hidden_widths),
        "code_dim": model.code_dim,
        "denoising": model.denoising,
    }
    return save_checkpoint(path, model.network, adam, seed=seed, iteration=iteration, extra=extra)


def load_autoencoder(path: str | Path) -> AeModel:
    checkpoint = load_checkpoint(path)
    extra = checkpoint.header.get("extra", {})
    if extra.get("model") != "autoencoder":
        raise NoduleFprError("CHECKPOINT_INVALID", f"{path}: checkpoint does not hold an autoencoder.")
    w1, w2, w3 = extra["hidden_widths"]
    return AeModel(
        network=checkpoint.network,
        hidden_widths=(w1, w2, w3),
        code_dim=int(extra["code_dim"]),
        denoising=bool(extra.get("denoising", False)),
    )


def export_features(path: str | Path, ids: list[int], features: np.ndarray) -> Path:
    frame = pd.DataFrame(features, columns=[f"f{idx}" for idx in range(features.shape[1])])
    frame.insert(0, "candidate_index", ids)
    target = resolve_output_path(path)
    frame.to_csv(target, index=False)
    return target


def load_features(path: str | Path) -> tuple[list[int], np.ndarray]:
    frame = pd.read_csv(require_artifact(Path(path)))
    ensure("candidate_index" in frame.columns, "MISSING_COLUMN", f"{path}: missing column candidate_index.")
    ids = frame["candidate_index"].astype(int).tolist()
    return ids, frame.drop(columns=["candidate_index"]).to_numpy(dtype=np.float64)
