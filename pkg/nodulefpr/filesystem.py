from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import aiofiles
from pydantic import BaseModel

from nodulefpr.errors import NoduleFprError

# Command that produces each artifact kind, for MISSING_ARTIFACT messages.
PRODUCERS: dict[str, str] = {
    "candidates.csv": "phantom",
    "annotations.csv": "phantom",
    "structures.csv": "phantom",
    "folds.json": "folds",
    "ae.ckpt": "train-ae",
    "dae.ckpt": "train-ae --regime dae",
    "ae_features.csv": "extract-features",
    "dae_features.csv": "extract-features --regime dae",
    "ae_clusters.csv": "cluster",
    "dae_clusters.csv": "cluster --regime dae",
    "ae_clusters.ckpt": "cluster",
    "dae_clusters.ckpt": "cluster --regime dae",
    "sets.json": "build-sets",
    "ensemble.json": "train-ensemble",
    "predictions.csv": "predict",
    "summary.json": "evaluate",
}


def resolve_output_path(output_path: str | Path) -> Path:
    raw = Path(output_path)
    if not raw.is_absolute():
        raw = Path.cwd() / raw
    raw.parent.mkdir(parents=True, exist_ok=True)
    return raw.resolve()


def require_artifact(path: Path) -> Path:
    if not path.exists():
        producer = PRODUCERS.get(path.name)
        hint = f" Run `nodulefpr {producer}` first." if producer else ""
        raise NoduleFprError("MISSING_ARTIFACT", f"Required artifact '{path}' does not exist.{hint}")
    return path


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def canonical_json(payload: BaseModel | dict[str, Any] | list[Any]) -> str:
    data = payload.model_dump(mode="json") if isinstance(payload, BaseModel) else payload
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def write_json(path: str | Path, payload: BaseModel | dict[str, Any] | list[Any]) -> Path:
    target = resolve_output_path(path)
    target.write_text(canonical_json(payload), encoding="utf-8")
    return target


def read_json(path: Path) -> Any:
    require_artifact(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise NoduleFprError("INVALID_VALUE", f"'{path}' is not valid JSON: {exc}") from exc


async def write_bytes_async(path: Path, data: bytes) -> Path:
    target = resolve_output_path(path)
    async with aiofiles.open(target, "wb") as f:
        await f.write(data)
    return target
