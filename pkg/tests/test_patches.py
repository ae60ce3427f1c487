from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from nodulefpr.errors import NoduleFprError
from nodulefpr.patches import (
    AUGMENT_COUNT,
    IDENTITY,
    PATCH_SIZE,
    Patch3C,
    PatchLibrary,
    Transform,
    apply_transform,
    augment_nodule,
    augmentation_schedule,
    build_folds,
    extract_context3c,
    extract_patch2d,
    extract_patch3c,
    load_fold_plan,
    save_fold_plan,
)
from nodulefpr.volume_io import Candidate, CtVolume, load_volume, save_volume


def _volume(nx: int = 80, ny: int = 70, nz: int = 5) -> CtVolume:
    # HU grows with x so the normalized value identifies the column.
    x = np.arange(nx, dtype=np.int16)
    voxels = np.broadcast_to(-1000 + 10 * x, (nz, ny, nx)).copy()
    voxels[:, 10, :] = 400  # one bright row at y = 10
    return CtVolume("scan", (nx, ny, nz), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), voxels)


# Expected behavior: the candidate voxel sits at patch index (32, 32); rows follow y and columns follow x.
def test_extract_patch2d_centering() -> None:
    patch = extract_patch2d(_volume(), Candidate("scan", (40.0, 30.0, 2.0)))
    assert patch.pixels.shape == (PATCH_SIZE, PATCH_SIZE)
    assert patch.pixels[32, 32] == pytest.approx(400 / 1400)
    assert patch.pixels[32, 33] == pytest.approx(410 / 1400)
    # y = 10 is 20 rows above the center row.
    assert patch.pixels[12, 5] == pytest.approx(1.0)


# Expected behavior: windows hanging off the volume edge are padded with air (0.0).
def test_extract_patch2d_pads_with_air() -> None:
    patch = extract_patch2d(_volume(), Candidate("scan", (0.0, 0.0, 2.0)))
    assert np.all(patch.pixels[:32, :] == 0.0)
    assert np.all(patch.pixels[:, :32] == 0.0)
    assert patch.pixels[32, 32] == pytest.approx(0.0)
    assert patch.pixels[33, 33] == pytest.approx(10 / 1400)


# Expected behavior: candidates on a slice outside the volume are rejected.
def test_extract_patch2d_out_of_volume() -> None:
    with pytest.raises(NoduleFprError) as exc:
        extract_patch2d(_volume(), Candidate("scan", (10.0, 10.0, 7.0)))
    assert exc.value.code == "OUT_OF_VOLUME"


# Expected behavior: the three channels are slices k-1, k, k+1; missing neighbors are air.
def test_extract_patch3c_channels() -> None:
    nx, ny, nz = 64, 64, 3
    voxels = np.zeros((nz, ny, nx), dtype=np.int16)
    voxels[0], voxels[1], voxels[2] = -1000, -300, 400
    volume = CtVolume("scan", (nx, ny, nz), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), voxels)
    middle = extract_patch3c(volume, Candidate("scan", (32.0, 32.0, 1.0), label=1))
    assert middle.pixels.shape == (PATCH_SIZE, PATCH_SIZE, 3)
    assert middle.pixels[32, 32].tolist() == pytest.approx([0.0, 0.5, 1.0])
    assert middle.label == 1
    top = extract_patch3c(volume, Candidate("scan", (32.0, 32.0, 2.0)))
    assert top.pixels[32, 32].tolist() == pytest.approx([0.5, 1.0, 0.0])


# Expected behavior: translation by (dx, dy) samples the source at (r + dy, c + dx).
def test_apply_transform_shift_semantics() -> None:
    pixels = np.random.default_rng(0).random((PATCH_SIZE, PATCH_SIZE, 3)).astype(np.float32)
    shifted = apply_transform(pixels, Transform(2, -3, 0, "none"))
    assert np.array_equal(shifted[10, 10], pixels[7, 12])
    assert np.all(shifted[:3] == 0.0)


# Expected behavior: cropping from context equals shifting where the patch has content.
def test_apply_transform_context_crop_matches_shift() -> None:
    volume = _volume()
    candidate = Candidate("scan", (40.0, 35.0, 2.0), label=1)
    patch = extract_patch3c(volume, candidate)
    context = extract_context3c(volume, candidate, margin=4)
    transform = Transform(3, -2, 1, "h")
    from_context = apply_transform(patch.pixels, transform, context)
    from_shift = apply_transform(patch.pixels, transform)
    # Interior rows and columns never touch the padded border.
    assert np.allclose(from_context[8:56, 8:56], from_shift[8:56, 8:56])


# Expected behavior: 90 degree rotations compose to the identity.
def test_apply_transform_rotation_cycle() -> None:
    pixels = np.random.default_rng(1).random((PATCH_SIZE, PATCH_SIZE, 3)).astype(np.float32)
    out = pixels
    for _ in range(4):
        out = apply_transform(out, Transform(0, 0, 1, "none"))
    assert np.array_equal(out, pixels)


# Expected behavior: the schedule is 49 long, identity first, deterministic in the seed.
def test_augmentation_schedule() -> None:
    schedule = augmentation_schedule(seed=3)
    assert len(schedule) == AUGMENT_COUNT
    assert schedule[0] == IDENTITY
    assert IDENTITY not in schedule[1:]
    assert schedule == augmentation_schedule(seed=3)
    assert schedule != augmentation_schedule(seed=4)
    assert all(abs(t.dx) <= 4 and abs(t.dy) <= 4 for t in schedule)


# Expected behavior: each nodule yields exactly 49 labeled samples, the original first.
def test_augment_nodule_counts() -> None:
    patch = Patch3C(pixels=np.full((PATCH_SIZE, PATCH_SIZE, 3), 0.5, dtype=np.float32), label=1)
    samples = augment_nodule(patch, seed=0)
    assert len(samples) == 49
    assert samples[0] is patch
    assert all(sample.label == 1 for sample in samples)
    # 1,055 nodules become 51,695 samples at this ratio.
    assert 1055 * len(samples) == 51695


# Expected behavior: non-nodule patches are never augmented.
def test_augment_nodule_rejects_negatives() -> None:
    patch = Patch3C(pixels=np.zeros((PATCH_SIZE, PATCH_SIZE, 3), dtype=np.float32), label=0)
    with pytest.raises(NoduleFprError):
        augment_nodule(patch, seed=0)


# Expected behavior: mirroring twice is the identity; rotation 2 then a mirror is the vertical flip.
def test_apply_transform_mirror_involution() -> None:
    pixels = np.random.default_rng(2).random((PATCH_SIZE, PATCH_SIZE, 3)).astype(np.float32)
    mirror = Transform(0, 0, 0, "h")
    assert np.array_equal(apply_transform(apply_transform(pixels, mirror), mirror), pixels)
    assert np.array_equal(apply_transform(pixels, Transform(0, 0, 2, "h")), pixels[::-1, :])


# Expected behavior: the 49 augmented samples of a nodule are pairwise different images.
@pytest.mark.parametrize("seed", range(20))
def test_augment_nodule_samples_are_distinct(seed: int) -> None:
    context = np.random.default_rng(100 + seed).random((PATCH_SIZE + 8, PATCH_SIZE + 8, 3)).astype(np.float32)
    patch = Patch3C(pixels=context[4:4 + PATCH_SIZE, 4:4 + PATCH_SIZE].copy(), label=1)
    samples = augment_nodule(patch, seed=seed, context=context)
    stacked = np.stack([sample.pixels.reshape(-1) for sample in samples])
    assert len(np.unique(stacked, axis=0)) == AUGMENT_COUNT
    assert len(set(augmentation_schedule(seed))) == AUGMENT_COUNT


# Expected behavior: moving the candidate by one voxel in x and two in y moves the patch content the same way.
def test_extract_patch3c_translation_consistency() -> None:
    rng = np.random.default_rng(7)
    voxels = rng.integers(-1000, 400, size=(3, 100, 100)).astype(np.int16)
    volume = CtVolume("scan", (100, 100, 3), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), voxels)
    base = extract_patch3c(volume, Candidate("scan", (50.0, 50.0, 1.0))).pixels
    moved = extract_patch3c(volume, Candidate("scan", (51.0, 52.0, 1.0))).pixels
    assert np.array_equal(moved[:-2, :-1], base[2:, 1:])


# Expected behavior: 16 scans over 8 folds test each scan once, with floor(10%) validation scans.
def test_build_folds_partition() -> None:
    scans = [f"scan-{i:02d}" for i in range(16)]
    plan = build_folds(scans, seed=5)
    assert plan.fold_count == 8
    tested = sorted(scan for split in plan.folds for scan in split.test)
    assert tested == scans
    for split in plan.folds:
        assert len(split.test) == 2
        assert len(split.validation) == 1
        assert len(split.train) == 13
        assert not set(split.test) & set(split.train)
    assert build_folds(scans, seed=5) == plan


# Expected behavior: fewer scans than folds cannot be planned.
def test_build_folds_too_few_scans() -> None:
    with pytest.raises(NoduleFprError) as exc:
        build_folds(["a", "b"], seed=0, fold_count=8)
    assert exc.value.code == "TOO_FEW_SCANS"


# Expected behavior: fold plans persist as JSON and reload equal.
def test_fold_plan_persistence(tmp_path: Path) -> None:
    plan = build_folds([f"s{i}" for i in range(9)], seed=1)
    path = save_fold_plan(tmp_path / "folds.json", plan)
    assert load_fold_plan(path) == plan


# Expected behavior: the patch library loads each volume once and cuts indexed patches.
def test_patch_library_caches_volumes(tmp_path: Path) -> None:
    save_volume(_volume(), tmp_path / "scan.rvol")
    calls: list[Path] = []

    def loader(path: Path) -> CtVolume:
        calls.append(path)
        return load_volume(path)

    candidates = [Candidate("scan", (40.0, 30.0, 2.0), label=1), Candidate("scan", (20.0, 20.0, 1.0), label=0)]
    library = PatchLibrary(tmp_path, candidates, loader=loader)
    assert library.patch2d(0).source == ("scan", 0)
    assert library.patch3c(1).label == 0
    assert len(library.augmented(0, seed=2)) == 49
    assert len(calls) == 1
