"""CT volume container, candidate/annotation tables and coordinate maps.

Volumes are stored in the RVOL container: the 8-byte magic ``RVOL0001``, one
UTF-8 JSON header line, then ``nx*ny*nz`` little-endian int16 voxels with x
varying fastest. In memory the voxels are a read-only ``(nz, ny, nx)`` array,
which is the same byte order.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from nodulefpr.errors import NoduleFprError, ensure
from nodulefpr.filesystem import require_artifact, resolve_output_path

logger = logging.getLogger(__name__)

RVOL_MAGIC = b"RVOL0001"
HU_MIN = -1000.0
HU_MAX = 400.0
PAD_VALUE = 0.0

CANDIDATE_COLUMNS = ["seriesuid", "coordX", "coordY", "coordZ"]
ANNOTATION_COLUMNS = ["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm"]

Vec3 = tuple[float, float, float]
Index3 = tuple[int, int, int]


@dataclass(frozen=True)
class CtVolume:
    scan_id: str
    dims: Index3
    spacing_mm: Vec3
    origin_mm: Vec3
    voxels: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        nx, ny, nz = self.dims
        ensure(min(self.dims) > 0, "INVALID_VALUE", f"Volume dims must be positive, got {self.dims}.")
        ensure(min(self.spacing_mm) > 0, "INVALID_VALUE", f"Spacing must be positive, got {self.spacing_mm}.")
        ensure(
            self.voxels.size == nx * ny * nz,
            "PAYLOAD_MISMATCH",
            f"Voxel count {self.voxels.size} does not match dims {self.dims}.",
        )
        voxels = np.ascontiguousarray(self.voxels, dtype=np.int16).reshape(nz, ny, nx)
        voxels.flags.writeable = False
        object.__setattr__(self, "voxels", voxels)


@dataclass(frozen=True)
class Candidate:
    scan_id: str
    world_mm: Vec3
    label: int | None = None
    probability: float | None = None

    def __post_init__(self) -> None:
        if self.probability is not None:
            ensure(
                0.0 <= self.probability <= 1.0,
                "INVALID_VALUE",
                f"Candidate probability {self.probability} is outside [0, 1].",
            )
        if self.label is not None:
            ensure(self.label in (0, 1), "UNKNOWN_LABEL", f"Unknown candidate label {self.label}.")

    def with_probability(self, probability: float) -> "Candidate":
        return replace(self, probability=probability)


@dataclass(frozen=True)
class NoduleAnnotation:
    scan_id: str
    center_mm: Vec3
    diameter_mm: float

    def __post_init__(self) -> None:
        ensure(self.diameter_mm > 0, "INVALID_VALUE", f"Nodule diameter must be positive, got {self.diameter_mm}.")


def normalize_hu(hu: float | np.ndarray) -> float | np.ndarray:
    """Clip to [-1000, 400] HU and map linearly onto [0, 1]."""
    clipped = np.clip(np.asarray(hu, dtype=np.float64), HU_MIN, HU_MAX)
    scaled = (clipped - HU_MIN) / (HU_MAX - HU_MIN)
    if scaled.ndim == 0:
        return float(scaled)
    return scaled


def _round_half_away(value: float) -> int:
    return int(np.sign(value) * np.floor(abs(value) + 0.5))


def world_to_voxel(volume: CtVolume, world_mm: Vec3) -> Index3:
    i, j, k = (
        _round_half_away((w - o) / s)
        for w, o, s in zip(world_mm, volume.origin_mm, volume.spacing_mm)
    )
    return i, j, k


def voxel_to_world(volume: CtVolume, index: Index3) -> Vec3:
    x, y, z = (o + i * s for i, o, s in zip(index, volume.origin_mm, volume.spacing_mm))
    return float(x), float(y), float(z)


def encode_volume(volume: CtVolume) -> bytes:
    header = {
        "scan_id": volume.scan_id,
        "dims": [int(d) for d in volume.dims],
        "spacing_mm": [float(s) for s in volume.spacing_mm],
        "origin_mm": [float(o) for o in volume.origin_mm],
    }
    header_line = json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n"
    return RVOL_MAGIC + header_line + volume.voxels.astype("<i2").tobytes()


def decode_volume(data: bytes, source: str = "<bytes>") -> CtVolume:
    if not data.startswith(RVOL_MAGIC):
        raise NoduleFprError("MALFORMED_HEADER", f"{source}: missing RVOL0001 magic.")
    newline = data.find(b"\n", len(RVOL_MAGIC))
    if newline < 0:
        raise NoduleFprError("MALFORMED_HEADER", f"{source}: header line is not terminated.")
    try:
        header = json.loads(data[len(RVOL_MAGIC):newline].decode("utf-8"))
        scan_id = str(header["scan_id"])
        dims = tuple(int(d) for d in header["dims"])
        spacing = tuple(float(s) for s in header["spacing_mm"])
        origin = tuple(float(o) for o in header["origin_mm"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise NoduleFprError("MALFORMED_HEADER", f"{source}: cannot parse header: {exc}") from exc
    if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3 or min(dims) <= 0:
        raise NoduleFprError("MALFORMED_HEADER", f"{source}: dims, spacing and origin need three valid entries.")

    payload = data[newline + 1:]
    expected = dims[0] * dims[1] * dims[2] * 2
    if len(payload) < expected:
        raise NoduleFprError(
            "TRUNCATED_PAYLOAD",
            f"{source}: expected {expected} voxel bytes, found {len(payload)}.",
        )
    if len(payload) != expected:
        raise NoduleFprError(
            "PAYLOAD_MISMATCH",
            f"{source}: dims {dims} need {expected} voxel bytes, found {len(payload)}.",
        )
    voxels = np.frombuffer(payload, dtype="<i2").astype(np.int16)
    return CtVolume(
        scan_id=scan_id,
        dims=(dims[0], dims[1], dims[2]),
        spacing_mm=(spacing[0], spacing[1], spacing[2]),
        origin_mm=(origin[0], origin[1], origin[2]),
        voxels=voxels,
    )


def load_volume(path: str | Path) -> CtVolume:
    source = require_artifact(Path(path))
    volume = decode_volume(source.read_bytes(), source=str(source))
    logger.debug("Loaded %s with dims %s.", source, volume.dims)
    return volume


def save_volume(volume: CtVolume, path: str | Path) -> Path:
    target = resolve_output_path(path)
    target.write_bytes(encode_volume(volume))
    return target


def _read_table(path: str | Path, required: list[str]) -> pd.DataFrame:
    source = require_artifact(Path(path))
    try:
        frame = pd.read_csv(source, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as exc:
        raise NoduleFprError("MISSING_COLUMN", f"{source}: table has no header row.") from exc
    frame.columns = [str(column).strip() for column in frame.columns]
    missing = [column for column in required if column not in frame.columns]
    if missing:
        raise NoduleFprError("MISSING_COLUMN", f"{source}: missing column(s) {', '.join(missing)}.")
    return frame


def _numeric_column(frame: pd.DataFrame, column: str, source: str | Path) -> np.ndarray:
    values = pd.to_numeric(frame[column].str.strip(), errors="coerce")
    bad = np.flatnonzero(values.isna().to_numpy())
    if bad.size:
        row = int(bad[0])
        raise NoduleFprError(
            "NON_NUMERIC_VALUE",
            f"{source}: row {row + 1} has non-numeric {column} '{frame[column].iloc[row]}'.",
        )
    return values.to_numpy(dtype=np.float64)


def load_candidates(path: str | Path) -> list[Candidate]:
    frame = _read_table(path, CANDIDATE_COLUMNS)
    coords = np.stack([_numeric_column(frame, column, path) for column in CANDIDATE_COLUMNS[1:]], axis=1)

    labels: list[int | None] = [None] * len(frame)
    if "class" in frame.columns:
        for row, raw in enumerate(frame["class"].str.strip()):
            if raw == "":
                continue
            if raw not in {"0", "1"}:
                raise NoduleFprError("UNKNOWN_LABEL", f"{path}: row {row + 1} has unknown class '{raw}'.")
            labels[row] = int(raw)

    probabilities: list[float | None] = [None] * len(frame)
    if "probability" in frame.columns:
        present = frame["probability"].str.strip() != ""
        values = np.full(len(frame), np.nan)
        values[present.to_numpy()] = _numeric_column(frame[present], "probability", path)
        for row, value in enumerate(values):
            if np.isnan(value):
                continue
            if not 0.0 <= value <= 1.0:
                raise NoduleFprError("INVALID_VALUE", f"{path}: row {row + 1} probability {value} outside [0, 1].")
            probabilities[row] = float(value)

    return [
        Candidate(
            scan_id=str(scan_id),
            world_mm=(float(x), float(y), float(z)),
            label=label,
            probability=probability,
        )
        for scan_id, (x, y, z), label, probability in zip(frame["seriesuid"], coords, labels, probabilities)
    ]


def load_annotations(path: str | Path) -> list[NoduleAnnotation]:
    frame = _read_table(path, ANNOTATION_COLUMNS)
    coords = np.stack([_numeric_column(frame, column, path) for column in ANNOTATION_COLUMNS[1:4]], axis=1)
    diameters = _numeric_column(frame, "diameter_mm", path)
    for row, diameter in enumerate(diameters):
        if diameter <= 0:
            raise NoduleFprError("INVALID_VALUE", f"{path}: row {row + 1} has diameter {diameter} <= 0.")
    return [
        NoduleAnnotation(scan_id=str(scan_id), center_mm=(float(x), float(y), float(z)), diameter_mm=float(d))
        for scan_id, (x, y, z), d in zip(frame["seriesuid"], coords, diameters)
    ]


def save_candidates(path: str | Path, candidates: list[Candidate]) -> Path:
    frame = pd.DataFrame(
        {
            "seriesuid": [c.scan_id for c in candidates],
            "coordX": [c.world_mm[0] for c in candidates],
            "coordY": [c.world_mm[1] for c in candidates],
            "coordZ": [c.world_mm[2] for c in candidates],
        },
        columns=CANDIDATE_COLUMNS,
    )
    if any(c.label is not None for c in candidates) or not candidates:
        frame["class"] = ["" if c.label is None else str(c.label) for c in candidates]
    if any(c.probability is not None for c in candidates):
        frame["probability"] = ["" if c.probability is None else repr(float(c.probability)) for c in candidates]
    target = resolve_output_path(path)
    frame.to_csv(target, index=False)
    return target


def save_annotations(path: str | Path, annotations: list[NoduleAnnotation]) -> Path:
    frame = pd.DataFrame(
        {
            "seriesuid": [a.scan_id for a in annotations],
            "coordX": [a.center_mm[0] for a in annotations],
            "coordY": [a.center_mm[1] for a in annotations],
            "coordZ": [a.center_mm[2] for a in annotations],
            "diameter_mm": [a.diameter_mm for a in annotations],
        },
        columns=ANNOTATION_COLUMNS,
    )
    target = resolve_output_path(path)
    frame.to_csv(target, index=False)
    return target
