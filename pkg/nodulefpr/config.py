from __future__ import annotations

import configparser
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from dotenv import load_dotenv
from pydantic import ValidationError

from nodulefpr.errors import NoduleFprError
from nodulefpr.models import PipelineConfig

DEFAULT_WORKERS = 4
FP_LEVELS: tuple[float, ...] = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)

# Published size of the default five-member ensemble.
REFERENCE_PARAMS = 789_000
REFERENCE_FLOPS = 1_024_000_000


@dataclass(frozen=True)
class Settings:
    log_level: int
    workers: int


def configure_logging(level: int = logging.INFO) -> None:
    """Send all Python logs to stderr to keep stdout clean for command output."""
    root = logging.getLogger()
    root.setLevel(level)
    if root.handlers:
        return

    handler = logging.StreamHandler(stream=sys.stderr)
    handler.setFormatter(
        logging.Formatter("%(asctime)s [%(levelname)s] %(name)s: %(message)s")
    )
    root.addHandler(handler)


def get_settings() -> Settings:
    load_dotenv()
    level_name = os.getenv("NFPR_LOG_LEVEL", "INFO").strip().upper() or "INFO"
    level = logging.getLevelName(level_name)
    if not isinstance(level, int):
        raise NoduleFprError("INVALID_CONFIG", f"Unknown NFPR_LOG_LEVEL '{level_name}'.")

    raw_workers = os.getenv("NFPR_WORKERS", "").strip()
    try:
        workers = int(raw_workers) if raw_workers else DEFAULT_WORKERS
    except ValueError as exc:
        raise NoduleFprError("INVALID_CONFIG", f"NFPR_WORKERS must be an integer, got '{raw_workers}'.") from exc
    if workers < 1:
        raise NoduleFprError("INVALID_CONFIG", "NFPR_WORKERS must be at least 1.")

    return Settings(log_level=level, workers=workers)


def _parse_value(raw: str) -> object:
    text = raw.strip()
    if not text:
        return text
    # Lists are written comma-separated: `sweep_k = 3, 5, 7, 10`.
    if "," in text:
        return [_parse_value(part) for part in text.split(",") if part.strip()]
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_pipeline_config(path: str | Path | None) -> PipelineConfig:
    """Read an INI-style `key = value` file into a validated PipelineConfig.

    A missing path yields the defaults. Unknown sections or keys are rejected.
    """
    if path is None:
        return PipelineConfig()
    source = Path(path)
    if not source.exists():
        raise NoduleFprError("MISSING_ARTIFACT", f"Config file '{source}' does not exist.")

    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(source, encoding="utf-8")
    except configparser.Error as exc:
        raise NoduleFprError("INVALID_CONFIG", f"Cannot parse '{source}': {exc}") from exc

    payload: dict[str, dict[str, object]] = {}
    for section in parser.sections():
        payload[section] = {key: _parse_value(value) for key, value in parser.items(section)}
    return validate_config(payload)


def validate_config(payload: dict[str, dict[str, object]]) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(payload)
    except ValidationError as exc:
        errors = exc.errors()
        first = errors[0] if errors else {}
        where = ".".join(str(part) for part in first.get("loc", ()))
        message = str(first.get("msg", "Validation failed"))
        raise NoduleFprError("INVALID_CONFIG", f"{where}: {message}" if where else message) from exc


def config_hash(config: PipelineConfig) -> str:
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def stage_seed(master_seed: int, stage: str) -> int:
    """Derive a stable per-stage seed from the master seed and a stage name."""
    digest = hashlib.sha256(f"{master_seed}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)


configure_logging()
