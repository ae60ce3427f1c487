from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, NamedTuple

import numpy as np

from nodulefpr.errors import NoduleFprError, ensure
from nodulefpr.filesystem import read_json, write_json
from nodulefpr.models import FoldPlan, FoldSplit
from nodulefpr.volume_io import PAD_VALUE, Candidate, CtVolume, load_volume, normalize_hu, world_to_voxel

logger = logging.getLogger(__name__)

PATCH_SIZE = 64
AUGMENT_COUNT = 49
DEFAULT_FOLDS = 8

Source = tuple[str, int]
Flip = Literal["none", "h"]


@dataclass(frozen=True)
class Patch2D:
    pixels: np.ndarray = field(repr=False)
    source: Source = ("", -1)

    def __post_init__(self) -> None:
        ensure(self.pixels.shape == (PATCH_SIZE, PATCH_SIZE), "SHAPE_MISMATCH", f"Patch2D shape {self.pixels.shape}.")
        ensure(
            bool(np.all((self.pixels >= 0.0) & (self.pixels <= 1.0))),
            "INVALID_VALUE",
            "Patch2D pixels must lie in [0, 1].",
        )


@dataclass(frozen=True)
class Patch3C:
    pixels: np.ndarray = field(repr=False)
    label: int = 0
    source: Source = ("", -1)

    def __post_init__(self) -> None:
        ensure(
            self.pixels.shape == (PATCH_SIZE, PATCH_SIZE, 3),
            "SHAPE_MISMATCH",
            f"Patch3C shape {self.pixels.shape}.",
        )
        ensure(
            bool(np.all((self.pixels >= 0.0) & (self.pixels <= 1.0))),
            "INVALID_VALUE",
            "Patch3C pixels must lie in [0, 1].",
        )
        ensure(self.label in (0, 1), "UNKNOWN_LABEL", f"Unknown patch label {self.label}.")


class Transform(NamedTuple):
    dx: int
    dy: int
    rotation: int
    flip: Flip


IDENTITY = Transform(0, 0, 0, "none")


def _axial_window(volume: CtVolume, i: int, j: int, k: int, size: int) -> np.ndarray:
    nx, ny, nz = volume.dims
    window = np.full((size, size), PAD_VALUE, dtype=np.float32)
    if not 0 <= k < nz:
        return window
    half = size // 2
    r0, c0 = j - half, i - half
    rs, re = max(r0, 0), min(r0 + size, ny)
    cs, ce = max(c0, 0), min(c0 + size, nx)
    if rs < re and cs < ce:
        window[rs - r0:re - r0, cs - c0:ce - c0] = normalize_hu(volume.voxels[k, rs:re, cs:ce])
    return window


def _candidate_voxel(volume: CtVolume, candidate: Candidate) -> tuple[int, int, int]:
    i, j, k = world_to_voxel(volume, candidate.world_mm)
    if not 0 <= k < volume.dims[2]:
        raise NoduleFprError(
            "OUT_OF_VOLUME",
            f"Candidate slice {k} is outside [0, {volume.dims[2]}) in scan {volume.scan_id}.",
        )
    return i, j, k


def extract_patch2d(volume: CtVolume, candidate: Candidate, index: int = -1) -> Patch2D:
    i, j, k = _candidate_voxel(volume, candidate)
    return Patch2D(pixels=_axial_window(volume, i, j, k, PATCH_SIZE), source=(candidate.scan_id, index))


def _stack_slices(volume: CtVolume, candidate: Candidate, size: int) -> np.ndarray:
    i, j, k = _candidate_voxel(volume, candidate)
    return np.stack([_axial_window(volume, i, j, k + offset, size) for offset in (-1, 0, 1)], axis=-1)


def extract_patch3c(volume: CtVolume, candidate: Candidate, index: int = -1) -> Patch3C:
    """Slices k-1, k, k+1 around the candidate as three channels."""
    return Patch3C(
        pixels=_stack_slices(volume, candidate, PATCH_SIZE),
        label=candidate.label or 0,
        source=(candidate.scan_id, index),
    )


def extract_context3c(volume: CtVolume, candidate: Candidate, margin: int = 4) -> np.ndarray:
    return _stack_slices(volume, candidate, PATCH_SIZE + 2 * margin)


def _shift(pixels: np.ndarray, dx: int, dy: int) -> np.ndarray:
    # Content moves so that output[r, c] = input[r + dy, c + dx], air outside.
    size = pixels.shape[0]
    shifted = np.full_like(pixels, PAD_VALUE)
    src_r = slice(max(dy, 0), size + min(dy, 0))
    src_c = slice(max(dx, 0), size + min(dx, 0))
    dst_r = slice(max(-dy, 0), size + min(-dy, 0))
    dst_c = slice(max(-dx, 0), size + min(-dx, 0))
    shifted[dst_r, dst_c] = pixels[src_r, src_c]
    return shifted


def apply_transform(pixels: np.ndarray, transform: Transform, context: np.ndarray | None = None) -> np.ndarray:
    """Translate (crop from context when available), rotate by 90° steps, then mirror columns."""
    if context is not None:
        margin = (context.shape[0] - PATCH_SIZE) // 2
        ensure(
            abs(transform.dx) <= margin and abs(transform.dy) <= margin,
            "INVALID_VALUE",
            f"Translation {transform.dx, transform.dy} exceeds context margin {margin}.",
        )
        r0, c0 = margin + transform.dy, margin + transform.dx
        out = context[r0:r0 + PATCH_SIZE, c0:c0 + PATCH_SIZE]
    else:
        out = _shift(pixels, transform.dx, transform.dy)
    out = np.rot90(out, k=transform.rotation, axes=(0, 1))
    if transform.flip == "h":
        out = out[:, ::-1]
    return np.ascontiguousarray(out, dtype=np.float32)


def augmentation_schedule(seed: int, max_translation: int = 4) -> list[Transform]:
    """The 49 transforms applied to one nodule: identity first, then 48 distinct ones drawn by seed.

    Rotations 0-3 with and without a mirror are the eight distinct symmetries of
    the square; a vertical flip is rotation 2 after a mirror, so it is not listed.
    """
    shifts = range(-max_translation, max_translation + 1)
    pool = [
        Transform(dx, dy, rotation, flip)
        for dx in shifts
        for dy in shifts
        for rotation in range(4)
        for flip in ("none", "h")
    ]
    pool = [transform for transform in pool if transform != IDENTITY]
    rng = np.random.default_rng(seed)
    needed = AUGMENT_COUNT - 1
    picks = rng.choice(len(pool), size=needed, replace=len(pool) < needed)
    return [IDENTITY] + [pool[int(pick)] for pick in picks]


def augment_nodule(
    patch: Patch3C,
    seed: int,
    context: np.ndarray | None = None,
    max_translation: int = 4,
) -> list[Patch3C]:
    ensure(patch.label == 1, "INVALID_VALUE", "Only nodule patches (label 1) are augmented.")
    outputs: list[Patch3C] = []
    for transform in augmentation_schedule(seed, max_translation):
        if transform == IDENTITY:
            outputs.append(patch)
            continue
        pixels = apply_transform(patch.pixels, transform, context)
        outputs.append(Patch3C(pixels=pixels, label=1, source=patch.source))
    return outputs


def build_folds(
    scan_ids: list[str],
    seed: int,
    fold_count: int = DEFAULT_FOLDS,
    validation_fraction: float = 0.1,
) -> FoldPlan:
    unique = sorted(set(scan_ids))
    ensure(len(unique) == len(scan_ids), "INVALID_VALUE", "Scan ids must be unique.")
    ensure(
        len(unique) >= fold_count,
        "TOO_FEW_SCANS",
        f"{len(unique)} scans cannot fill {fold_count} folds.",
    )
    rng = np.random.default_rng(seed)
    order = [unique[i] for i in rng.permutation(len(unique))]
    subsets = [list(part) for part in np.array_split(np.array(order, dtype=object), fold_count)]

    folds: list[FoldSplit] = []
    for fold, test in enumerate(subsets):
        rest = [scan for other, part in enumerate(subsets) if other != fold for scan in part]
        n_validation = math.floor(validation_fraction * len(rest) + 1e-9)
        fold_rng = np.random.default_rng([seed, fold])
        chosen = set(fold_rng.choice(len(rest), size=n_validation, replace=False).tolist())
        validation = [scan for idx, scan in enumerate(rest) if idx in chosen]
        train = [scan for idx, scan in enumerate(rest) if idx not in chosen]
        folds.append(FoldSplit(test=sorted(test), train=sorted(train), validation=sorted(validation)))
    return FoldPlan(fold_count=fold_count, seed=seed, folds=folds)


def save_fold_plan(path: str | Path, plan: FoldPlan) -> Path:
    return write_json(path, plan)


def load_fold_plan(path: str | Path) -> FoldPlan:
    return FoldPlan.model_validate(read_json(Path(path)))


class PatchLibrary:
    """Lazily loads volumes from a directory and cuts patches for indexed candidates."""

    def __init__(self, volumes_dir: Path, candidates: list[Candidate], loader: Callable[[Path], CtVolume] = load_volume):
        self.volumes_dir = volumes_dir
        self.candidates = candidates
        self._loader = loader
        self._volumes: dict[str, CtVolume] = {}

    def volume(self, scan_id: str) -> CtVolume:
        if scan_id not in self._volumes:
            self._volumes[scan_id] = self._loader(self.volumes_dir / f"{scan_id}.rvol")
        return self._volumes[scan_id]

    def patch2d(self, index: int) -> Patch2D:
        candidate = self.candidates[index]
        return extract_patch2d(self.volume(candidate.scan_id), candidate, index)

    def patch3c(self, index: int) -> Patch3C:
        candidate = self.candidates[index]
        return extract_patch3c(self.volume(candidate.scan_id), candidate, index)

    def augmented(self, index: int, seed: int, max_translation: int = 4) -> list[Patch3C]:
        candidate = self.candidates[index]
        volume = self.volume(candidate.scan_id)
        context = extract_context3c(volume, candidate, margin=max_translation)
        return augment_nodule(extract_patch3c(volume, candidate, index), seed, context, max_translation)
