"""Synthetic CT-like scans with spherical nodules and vessel / wall / blob clutter."""

from __future__ import annotations

import asyncio
import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from nodulefpr.errors import NoduleFprError
from nodulefpr.filesystem import require_artifact, resolve_output_path, write_bytes_async
from nodulefpr.models import PhantomSpec
from nodulefpr.volume_io import (
    Candidate,
    CtVolume,
    NoduleAnnotation,
    encode_volume,
    save_annotations,
    save_candidates,
    voxel_to_world,
)

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 100
CLUTTER_SPACING = 2.0
WALL_EXTENT = 4.0
HU_RANGE = (-1024, 3071)
STRUCTURES = ("nodule", "vessel", "wall", "blob")

VESSEL_HU = (0.0, 80.0)
WALL_HU = (20.0, 60.0)
BLOB_HU = (-250.0, 50.0)


@dataclass
class PhantomScan:
    volume: CtVolume
    candidates: list[Candidate]
    annotations: list[NoduleAnnotation]
    structures: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class PhantomDataset:
    directory: Path
    scan_ids: list[str]
    candidate_count: int
    nodule_count: int


def scan_id_for(index: int) -> str:
    return f"phantom-{index:03d}"


def structure_counts(spec: PhantomSpec) -> dict[str, int]:
    """Split non-nodules over morphologies by largest remainder."""
    n = spec.non_nodules_per_scan
    fractions = {"vessel": spec.vessel_fraction, "wall": spec.wall_fraction, "blob": spec.blob_fraction}
    raw = {name: n * share for name, share in fractions.items()}
    counts = {name: int(np.floor(value)) for name, value in raw.items()}
    leftover = n - sum(counts.values())
    for name in sorted(raw, key=lambda key: (-(raw[key] - counts[key]), list(fractions).index(key)))[:leftover]:
        counts[name] += 1
    return counts


class _Canvas:
    def __init__(self, spec: PhantomSpec, rng: np.random.Generator):
        nx, ny, nz = spec.dims
        self.dims = (nx, ny, nz)
        self.rng = rng
        # (z, y, x) index grids, matching CtVolume voxel layout.
        self.z, self.y, self.x = np.ogrid[:nz, :ny, :nx]
        self.hu = rng.normal(spec.background_hu_mean, spec.background_hu_std, size=(nz, ny, nx))

    def distance_to(self, center: np.ndarray) -> np.ndarray:
        ci, cj, ck = center
        return np.sqrt((self.x - ci) ** 2 + (self.y - cj) ** 2 + (self.z - ck) ** 2)

    def paint(self, mask: np.ndarray, value: float) -> None:
        self.hu[mask] = value

    def sphere(self, center: np.ndarray, radius: float) -> np.ndarray:
        return self.distance_to(center) <= radius

    def cylinder(self, center: np.ndarray, direction: np.ndarray, radius: float, half_length: float) -> np.ndarray:
        ci, cj, ck = center
        dx, dy, dz = self.x - ci, self.y - cj, self.z - ck
        along = dx * direction[0] + dy * direction[1] + dz * direction[2]
        radial_sq = dx**2 + dy**2 + dz**2 - along**2
        return (radial_sq <= radius**2) & (np.abs(along) <= half_length)

    def slab(self, center: np.ndarray, normal: np.ndarray, thickness: float, extent: float) -> np.ndarray:
        ci, cj, ck = center
        dx, dy, dz = self.x - ci, self.y - cj, self.z - ck
        offset = dx * normal[0] + dy * normal[1] + dz * normal[2]
        in_plane_sq = dx**2 + dy**2 + dz**2 - offset**2
        return (np.abs(offset) <= thickness / 2) & (in_plane_sq <= extent**2)


def _unit(vector: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vector)
    return vector / norm if norm > 0 else np.array([1.0, 0.0, 0.0])


@dataclass(frozen=True)
class _Clutter:
    kind: str
    # Per-axis half size of the painted region around the centre, in voxels.
    extent: np.ndarray
    value: float
    mask: Callable[[_Canvas, np.ndarray], np.ndarray]


def _draw_clutter(kind: str, rng: np.random.Generator) -> _Clutter:
    if kind == "vessel":
        direction = _unit(rng.normal(size=3))
        radius, half_length = float(rng.uniform(0.8, 1.4)), float(rng.uniform(2.5, 4.0))
        return _Clutter(
            kind,
            np.abs(direction) * half_length + radius,
            float(rng.uniform(*VESSEL_HU)),
            lambda canvas, center: canvas.cylinder(center, direction, radius, half_length),
        )
    if kind == "wall":
        axis = np.zeros(3)
        axis[int(rng.integers(0, 2))] = 1.0
        normal = _unit(axis + rng.normal(0.0, 0.15, size=3))
        thickness = float(rng.uniform(2.0, 3.0))
        return _Clutter(
            kind,
            WALL_EXTENT * np.sqrt(np.clip(1.0 - normal**2, 0.0, None)) + thickness / 2 * np.abs(normal),
            float(rng.uniform(*WALL_HU)),
            lambda canvas, center: canvas.slab(center, normal, thickness, WALL_EXTENT),
        )
    value = float(rng.uniform(*BLOB_HU))
    offsets = rng.uniform(-1.5, 1.5, size=(int(rng.integers(3, 6)), 3))
    radii = rng.uniform(1.2, 2.2, size=len(offsets))

    def lobes(canvas: _Canvas, center: np.ndarray) -> np.ndarray:
        mask = np.zeros(canvas.hu.shape, dtype=bool)
        for offset, radius in zip(offsets, radii):
            mask |= canvas.sphere(center + offset, float(radius))
        return mask

    return _Clutter(kind, (np.abs(offsets) + radii[:, None]).max(axis=0), value, lobes)


def _place(
    rng: np.random.Generator,
    dims: tuple[int, int, int],
    margin: float | np.ndarray,
    clear_of: list[tuple[np.ndarray, float]],
    what: str,
) -> np.ndarray:
    low = np.broadcast_to(np.asarray(margin, dtype=np.float64), (3,))
    high = np.array(dims, dtype=np.float64) - 1 - low
    for _ in range(MAX_ATTEMPTS):
        center = np.round(rng.uniform(low, high)).astype(np.float64)
        if all(np.linalg.norm(center - other) > distance for other, distance in clear_of):
            return center
    raise NoduleFprError("PLACEMENT_FAILED", f"Could not place a {what} after {MAX_ATTEMPTS} attempts.")


def clutter_margin(extent: np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
    """Whole-voxel margin that keeps a structure inside the volume, capped at half of each axis."""
    return np.minimum(np.ceil(extent), (np.array(dims) - 1) // 2).astype(np.float64)


def _jittered(
    volume: CtVolume,
    center: np.ndarray,
    sigma_mm: float,
    limit_mm: np.ndarray,
    rng: np.random.Generator,
) -> tuple[float, float, float]:
    world = np.array(voxel_to_world(volume, (int(center[0]), int(center[1]), int(center[2]))))
    offset = np.clip(rng.normal(0.0, sigma_mm, size=3) if sigma_mm > 0 else np.zeros(3), -limit_mm, limit_mm)
    upper = np.array(volume.origin_mm) + (np.array(volume.dims) - 1) * np.array(volume.spacing_mm)
    x, y, z = np.clip(world + offset, volume.origin_mm, upper)
    return float(x), float(y), float(z)


def gen_scan(spec: PhantomSpec, index: int) -> PhantomScan:
    """Deterministic in (spec.seed, index)."""
    rng = np.random.default_rng([spec.seed, index])
    canvas = _Canvas(spec, rng)
    dims = canvas.dims
    spacing = np.array(spec.spacing_mm, dtype=np.float64)
    scan_id = scan_id_for(index)

    r_low, r_high = spec.nodule_radius_vox
    nodules: list[tuple[np.ndarray, float, float]] = []
    for _ in range(spec.nodules_per_scan):
        radius = float(rng.uniform(r_low, r_high))
        clear = [(other, radius + r + 1.0) for other, r, _ in nodules]
        center = _place(rng, dims, np.ceil(radius), clear, "nodule")
        nodules.append((center, radius, float(rng.uniform(*spec.nodule_hu))))

    kinds = [name for name, count in structure_counts(spec).items() for _ in range(count)]
    kinds = [kinds[int(i)] for i in rng.permutation(len(kinds))]
    clutter: list[tuple[_Clutter, np.ndarray]] = []
    for kind in kinds:
        structure = _draw_clutter(kind, rng)
        clear = [(center, radius + 1.0) for center, radius, _ in nodules]
        clear += [(center, CLUTTER_SPACING) for _, center in clutter]
        clutter.append((structure, _place(rng, dims, clutter_margin(structure.extent, dims), clear, kind)))

    for structure, center in clutter:
        canvas.paint(structure.mask(canvas, center), structure.value)

    # Nodules go last so their interiors keep the nodule intensity.
    for center, radius, value in nodules:
        canvas.paint(canvas.sphere(center, radius), value)

    voxels = np.clip(np.rint(canvas.hu), *HU_RANGE).astype(np.int16)
    volume = CtVolume(
        scan_id=scan_id,
        dims=dims,
        spacing_mm=(float(spacing[0]), float(spacing[1]), float(spacing[2])),
        origin_mm=(float(spec.origin_mm[0]), float(spec.origin_mm[1]), float(spec.origin_mm[2])),
        voxels=voxels,
    )

    candidates: list[Candidate] = []
    annotations: list[NoduleAnnotation] = []
    structures: list[str] = []
    for center, radius, _ in nodules:
        center_mm = voxel_to_world(volume, (int(center[0]), int(center[1]), int(center[2])))
        annotations.append(
            NoduleAnnotation(scan_id=scan_id, center_mm=center_mm, diameter_mm=2 * radius * float(spacing.min()))
        )
        limit = np.full(3, radius * float(spacing.min()) / 4)
        candidates.append(Candidate(scan_id, _jittered(volume, center, spec.jitter_mm, limit, rng), label=1))
        structures.append("nodule")
    for structure, center in clutter:
        candidates.append(Candidate(scan_id, _jittered(volume, center, spec.jitter_mm, spacing / 2, rng), label=0))
        structures.append(structure.kind)
    return PhantomScan(volume=volume, candidates=candidates, annotations=annotations, structures=structures)


async def gen_dataset(spec: PhantomSpec, directory: str | Path, workers: int = 4) -> PhantomDataset:
    """Write volumes, candidates, annotations and the structure side table."""
    base = Path(directory)
    semaphore = asyncio.Semaphore(max(1, workers))

    async def build(index: int) -> PhantomScan:
        async with semaphore:
            scan = await asyncio.to_thread(gen_scan, spec, index)
            payload = await asyncio.to_thread(encode_volume, scan.volume)
            await write_bytes_async(base / "volumes" / f"{scan.volume.scan_id}.rvol", payload)
            logger.debug("Wrote %s", scan.volume.scan_id)
            return scan

    scans = await asyncio.gather(*(build(index) for index in range(spec.scan_count)))

    candidates = [candidate for scan in scans for candidate in scan.candidates]
    annotations = [annotation for scan in scans for annotation in scan.annotations]
    save_candidates(base / "candidates.csv", candidates)
    save_annotations(base / "annotations.csv", annotations)
    structures = pd.DataFrame(
        {
            "seriesuid": [candidate.scan_id for candidate in candidates],
            "candidate_index": range(len(candidates)),
            "structure": [kind for scan in scans for kind in scan.structures],
        }
    )
    structures.to_csv(resolve_output_path(base / "structures.csv"), index=False)
    logger.info(
        "Phantom dataset: %d scans, %d candidates, %d nodules in %s",
        len(scans),
        len(candidates),
        len(annotations),
        base,
    )
    return PhantomDataset(
        directory=base,
        scan_ids=[scan.volume.scan_id for scan in scans],
        candidate_count=len(candidates),
        nodule_count=len(annotations),
    )


def load_structures(path: str | Path) -> list[str]:
    frame = pd.read_csv(require_artifact(Path(path)), dtype={"seriesuid": str})
    unknown = set(frame["structure"].astype(str)) - set(STRUCTURES)
    if unknown:
        raise NoduleFprError("UNKNOWN_LABEL", f"{path}: unknown structure label(s) {sorted(unknown)}.")
    return frame.sort_values("candidate_index")["structure"].astype(str).tolist()
