from __future__ import annotations

from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from nodulefpr.errors import NoduleFprError
from nodulefpr.froc import EvalInput, match_candidates
from nodulefpr.models import PhantomSpec
from nodulefpr.phantom import (
    CLUTTER_SPACING,
    _Canvas,
    _draw_clutter,
    clutter_margin,
    gen_dataset,
    gen_scan,
    load_structures,
    scan_id_for,
    structure_counts,
)
from nodulefpr.volume_io import load_annotations, load_candidates, load_volume, world_to_voxel


# Expected behavior: the scan carries one annotation per nodule and one candidate per structure.
def test_gen_scan_counts() -> None:
    spec = PhantomSpec(nodules_per_scan=3, non_nodules_per_scan=6)
    scan = gen_scan(spec, 0)
    assert len(scan.annotations) == 3
    assert len(scan.candidates) == 9
    assert [c.label for c in scan.candidates] == [1, 1, 1, 0, 0, 0, 0, 0, 0]
    assert scan.structures[:3] == ["nodule"] * 3
    assert Counter(scan.structures[3:]) == {"vessel": 2, "wall": 2, "blob": 2}
    assert scan.volume.scan_id == scan_id_for(0) == "phantom-000"


# Expected behavior: nodule centers carry nodule intensity rather than background.
def test_gen_scan_nodule_centers_use_nodule_hu() -> None:
    spec = PhantomSpec()
    scan = gen_scan(spec, 2)
    low, high = spec.nodule_hu
    for annotation in scan.annotations:
        i, j, k = world_to_voxel(scan.volume, annotation.center_mm)
        assert low <= int(scan.volume.voxels[k, j, i]) <= high


# Expected behavior: the same seed and index give bitwise-identical scans; other indices differ.
def test_gen_scan_is_deterministic() -> None:
    spec = PhantomSpec(seed=5)
    first, second = gen_scan(spec, 1), gen_scan(spec, 1)
    assert np.array_equal(first.volume.voxels, second.volume.voxels)
    assert first.candidates == second.candidates
    assert not np.array_equal(first.volume.voxels, gen_scan(spec, 2).volume.voxels)


# Expected behavior: nodule candidates hit their nodule and clutter candidates never do.
def test_gen_scan_labels_agree_with_hit_rule() -> None:
    scan = gen_scan(PhantomSpec(jitter_mm=2.0), 3)
    data = EvalInput(scans=[scan.volume.scan_id], candidates=scan.candidates, annotations=scan.annotations)
    kinds = [tag.kind for tag in match_candidates(data)]
    assert kinds == ["hit" if c.label == 1 else "fp" for c in scan.candidates]


# Expected behavior: every candidate lies inside the volume.
def test_gen_scan_geometry_in_bounds() -> None:
    scan = gen_scan(PhantomSpec(jitter_mm=5.0), 4)
    nx, ny, nz = scan.volume.dims
    for candidate in scan.candidates:
        i, j, k = world_to_voxel(scan.volume, candidate.world_mm)
        assert 0 <= i < nx and 0 <= j < ny and 0 <= k < nz


# Expected behavior: drawn structures paint only inside their per-axis extent; default extents never hit the cap.
@pytest.mark.parametrize("kind", ["vessel", "wall", "blob"])
def test_clutter_extent_bounds_painted_voxels(kind: str) -> None:
    canvas = _Canvas(PhantomSpec(dims=[41, 41, 41], background_hu_std=0.0), np.random.default_rng(0))
    center = np.array([20.0, 20.0, 20.0])
    default_dims = tuple(PhantomSpec().dims)
    for seed in range(30):
        structure = _draw_clutter(kind, np.random.default_rng(seed))
        k, j, i = np.nonzero(structure.mask(canvas, center))
        assert len(i) > 0
        reach = np.abs(np.stack([i, j, k], axis=1) - center).max(axis=0)
        assert np.all(reach <= structure.extent + 1e-9)
        assert np.array_equal(clutter_margin(structure.extent, default_dims), np.ceil(structure.extent))


# Expected behavior: clutter candidates sit at least the minimum spacing apart from one another.
def test_gen_scan_clutter_centres_are_spaced() -> None:
    for index in range(4):
        scan = gen_scan(PhantomSpec(jitter_mm=0.0), index)
        centres = np.array([c.world_mm for c in scan.candidates if c.label == 0])
        gaps = np.linalg.norm(centres[:, None] - centres[None], axis=2)
        assert gaps[~np.eye(len(centres), dtype=bool)].min() > CLUTTER_SPACING


# Expected behavior: structures that cannot be placed raise after bounded attempts.
def test_gen_scan_placement_failure() -> None:
    spec = PhantomSpec(dims=[9, 9, 9], nodule_radius_vox=[4.0, 4.0], nodules_per_scan=2)
    with pytest.raises(NoduleFprError) as exc:
        gen_scan(spec, 0)
    assert exc.value.code == "PLACEMENT_FAILED"


# Expected behavior: morphology counts split by largest remainder, earlier kinds winning ties.
def test_structure_counts() -> None:
    assert structure_counts(PhantomSpec()) == {"vessel": 4, "wall": 4, "blob": 4}
    assert structure_counts(PhantomSpec(non_nodules_per_scan=5)) == {"vessel": 2, "wall": 2, "blob": 1}
    spec = PhantomSpec(non_nodules_per_scan=3, vessel_fraction=0.5, wall_fraction=0.25, blob_fraction=0.25)
    assert structure_counts(spec) == {"vessel": 1, "wall": 1, "blob": 1}


# Expected behavior: the default dataset has 16 scans and 256 candidates that reload through the readers.
@pytest.mark.asyncio
async def test_gen_dataset_writes_readable_files(tmp_path: Path) -> None:
    spec = PhantomSpec()
    dataset = await gen_dataset(spec, tmp_path / "data", workers=4)
    assert dataset.scan_ids == [scan_id_for(i) for i in range(16)]
    assert dataset.candidate_count == 256
    assert dataset.nodule_count == 64

    candidates = load_candidates(tmp_path / "data" / "candidates.csv")
    assert len(candidates) == 256
    assert sum(c.label == 1 for c in candidates) == 64
    assert len(load_annotations(tmp_path / "data" / "annotations.csv")) == 64
    structures = load_structures(tmp_path / "data" / "structures.csv")
    assert Counter(structures) == {"nodule": 64, "vessel": 64, "wall": 64, "blob": 64}

    volume = load_volume(tmp_path / "data" / "volumes" / "phantom-007.rvol")
    assert np.array_equal(volume.voxels, gen_scan(spec, 7).volume.voxels)


# Expected behavior: unknown morphology labels in the side table are rejected.
def test_load_structures_rejects_unknown(tmp_path: Path) -> None:
    path = tmp_path / "structures.csv"
    path.write_text("seriesuid,candidate_index,structure\ns,0,nodule\ns,1,airway\n", encoding="utf-8")
    with pytest.raises(NoduleFprError) as exc:
        load_structures(path)
    assert exc.value.code == "UNKNOWN_LABEL"
