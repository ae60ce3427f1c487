"""Candidate scoring: hit matching, FROC curves, CPM and bootstrap bands."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, NamedTuple

import matplotlib
import numpy as np
import pandas as pd
from matplotlib.figure import Figure

from nodulefpr.config import FP_LEVELS
from nodulefpr.errors import NoduleFprError, ensure
from nodulefpr.filesystem import resolve_output_path
from nodulefpr.models import EvalSummary
from nodulefpr.volume_io import Candidate, NoduleAnnotation

logger = logging.getLogger(__name__)

TagKind = Literal["hit", "fp", "ignored"]


class CandidateTag(NamedTuple):
    kind: TagKind
    nodule: int | None = None


@dataclass
class EvalInput:
    scans: list[str]
    candidates: list[Candidate]
    annotations: list[NoduleAnnotation]
    irrelevant: list[NoduleAnnotation] = field(default_factory=list)

    def __post_init__(self) -> None:
        known = set(self.scans)
        for candidate in self.candidates:
            ensure(
                candidate.scan_id in known,
                "INVALID_VALUE",
                f"Candidate scan '{candidate.scan_id}' is not in the evaluated scan list.",
            )

    def nodule_count(self) -> int:
        known = set(self.scans)
        return sum(1 for annotation in self.annotations if annotation.scan_id in known)


@dataclass(frozen=True)
class FrocCurve:
    thresholds: np.ndarray = field(repr=False)
    fp_per_scan: np.ndarray = field(repr=False)
    sensitivity: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.thresholds)


def _nearest_within(position: np.ndarray, centers: np.ndarray, radii: np.ndarray) -> int | None:
    if len(centers) == 0:
        return None
    distances = np.linalg.norm(centers - position, axis=1)
    inside = np.flatnonzero(distances <= radii)
    if inside.size == 0:
        return None
    return int(inside[np.argmin(distances[inside])])


def match_candidates(data: EvalInput, radius_scale: float = 1.0) -> list[CandidateTag]:
    """Tag each candidate as a hit on its nearest covering nodule, ignored, or fp."""
    by_scan: dict[str, list[int]] = {}
    for idx, annotation in enumerate(data.annotations):
        by_scan.setdefault(annotation.scan_id, []).append(idx)
    irrelevant_by_scan: dict[str, list[NoduleAnnotation]] = {}
    for finding in data.irrelevant:
        irrelevant_by_scan.setdefault(finding.scan_id, []).append(finding)

    tags: list[CandidateTag] = []
    for candidate in data.candidates:
        position = np.asarray(candidate.world_mm, dtype=np.float64)
        ids = by_scan.get(candidate.scan_id, [])
        centers = np.array([data.annotations[i].center_mm for i in ids], dtype=np.float64).reshape(-1, 3)
        radii = np.array([data.annotations[i].diameter_mm / 2 * radius_scale for i in ids], dtype=np.float64)
        nearest = _nearest_within(position, centers, radii)
        if nearest is not None:
            tags.append(CandidateTag("hit", ids[nearest]))
            continue
        findings = irrelevant_by_scan.get(candidate.scan_id, [])
        f_centers = np.array([f.center_mm for f in findings], dtype=np.float64).reshape(-1, 3)
        f_radii = np.array([f.diameter_mm / 2 * radius_scale for f in findings], dtype=np.float64)
        if _nearest_within(position, f_centers, f_radii) is not None:
            tags.append(CandidateTag("ignored"))
        else:
            tags.append(CandidateTag("fp"))
    return tags


def _probabilities(data: EvalInput) -> np.ndarray:
    missing = [idx for idx, candidate in enumerate(data.candidates) if candidate.probability is None]
    if missing:
        raise NoduleFprError("INVALID_VALUE", f"Candidate {missing[0]} has no probability to score.")
    return np.array([candidate.probability for candidate in data.candidates], dtype=np.float64)


def _curve_arrays(
    probs: np.ndarray,
    nodule_ids: np.ndarray,
    n_scans: int,
    total_nodules: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # nodule_ids: >= 0 for hits, -1 for false positives; ignored candidates are already dropped.
    if probs.size == 0:
        empty = np.zeros(0, dtype=np.float64)
        return empty, empty, empty
    order = np.argsort(-probs, kind="stable")
    p_sorted, ids_sorted = probs[order], nodule_ids[order]
    hit_positions = np.flatnonzero(ids_sorted >= 0)
    _, first = np.unique(ids_sorted[hit_positions], return_index=True)
    newly_found = np.zeros(len(p_sorted), dtype=np.int64)
    newly_found[hit_positions[first]] = 1
    found = np.cumsum(newly_found)
    false_positives = np.cumsum(ids_sorted < 0)
    ends = np.flatnonzero(np.r_[p_sorted[1:] != p_sorted[:-1], True])
    return p_sorted[ends], false_positives[ends] / n_scans, found[ends] / total_nodules


def _scored(data: EvalInput, tags: list[CandidateTag]) -> tuple[np.ndarray, np.ndarray]:
    ensure(len(tags) == len(data.candidates), "SHAPE_MISMATCH", "One tag is needed per candidate.")
    probs = _probabilities(data)
    keep = np.array([tag.kind != "ignored" for tag in tags], dtype=bool)
    ids = np.array([tag.nodule if tag.kind == "hit" else -1 for tag in tags], dtype=np.int64)
    return probs[keep], ids[keep]


def froc_curve(data: EvalInput, tags: list[CandidateTag], total_nodules: int) -> FrocCurve:
    """One point per distinct candidate probability, ordered by FP/scan."""
    if total_nodules <= 0:
        raise NoduleFprError("ZERO_NODULES", "FROC needs at least one reference nodule.")
    if not data.scans:
        raise NoduleFprError("EMPTY_SCANS", "FROC needs at least one scan.")
    probs, ids = _scored(data, tags)
    distinct = len(set(ids[ids >= 0].tolist()))
    ensure(
        total_nodules >= distinct,
        "INVALID_VALUE",
        f"total_nodules={total_nodules} is below the {distinct} nodules that were hit.",
    )
    thresholds, fps, sens = _curve_arrays(probs, ids, len(data.scans), total_nodules)
    return FrocCurve(thresholds=thresholds, fp_per_scan=fps, sensitivity=sens)


def sensitivity_at(curve: FrocCurve, fp_level: float) -> float:
    """Best sensitivity reached at or below ``fp_level`` false positives per scan."""
    ensure(fp_level > 0, "INVALID_VALUE", f"FP level must be positive, got {fp_level}.")
    reachable = curve.sensitivity[curve.fp_per_scan <= fp_level]
    return float(reachable.max()) if reachable.size else 0.0


def sensitivities(curve: FrocCurve, levels: tuple[float, ...] | list[float] = FP_LEVELS) -> list[float]:
    return [sensitivity_at(curve, level) for level in levels]


def cpm_from_sensitivities(values: list[float]) -> float:
    ensure(bool(values), "EMPTY_INPUT", "CPM needs at least one sensitivity.")
    return float(np.mean(values))


def cpm(curve: FrocCurve, levels: tuple[float, ...] | list[float] = FP_LEVELS) -> float:
    return cpm_from_sensitivities(sensitivities(curve, levels))


def bootstrap_ci(
    data: EvalInput,
    tags: list[CandidateTag],
    resamples: int = 1000,
    seed: int = 0,
    levels: tuple[float, ...] | list[float] = FP_LEVELS,
) -> tuple[list[float], list[float]]:
    """2.5th / 97.5th percentile sensitivity per level over scan resamples.

    Each drawn scan is a separate copy: its nodules count again in the
    denominator and are found independently. Resamples without any reference
    nodule are skipped.
    """
    ensure(resamples >= 1, "INVALID_VALUE", "At least one bootstrap resample is required.")
    if not data.scans:
        raise NoduleFprError("EMPTY_SCANS", "Bootstrap needs at least one scan.")
    probs = _probabilities(data)
    position = {scan: idx for idx, scan in enumerate(data.scans)}
    scan_nodules = np.zeros(len(data.scans), dtype=np.int64)
    local_id: dict[int, int] = {}
    for idx, annotation in enumerate(data.annotations):
        if annotation.scan_id in position:
            scan = position[annotation.scan_id]
            local_id[idx] = int(scan_nodules[scan])
            scan_nodules[scan] += 1

    per_scan: list[tuple[np.ndarray, np.ndarray]] = [
        (np.zeros(0), np.zeros(0, dtype=np.int64)) for _ in data.scans
    ]
    grouped: dict[int, tuple[list[float], list[int]]] = {}
    for candidate, tag, p in zip(data.candidates, tags, probs):
        if tag.kind == "ignored":
            continue
        bucket = grouped.setdefault(position[candidate.scan_id], ([], []))
        bucket[0].append(float(p))
        bucket[1].append(local_id[tag.nodule] if tag.kind == "hit" and tag.nodule is not None else -1)
    for scan, (scan_probs, scan_ids) in grouped.items():
        per_scan[scan] = (np.array(scan_probs), np.array(scan_ids, dtype=np.int64))
    stride = int(scan_nodules.max(initial=0)) + 1

    rng = np.random.default_rng(seed)
    samples: list[list[float]] = []
    for _ in range(resamples):
        draw = rng.integers(0, len(data.scans), size=len(data.scans))
        total = int(scan_nodules[draw].sum())
        if total == 0:
            continue
        draw_probs = np.concatenate([per_scan[scan][0] for scan in draw])
        # Offset ids by draw slot so a scan drawn twice contributes distinct nodules.
        draw_ids = np.concatenate(
            [np.where(per_scan[scan][1] >= 0, per_scan[scan][1] + slot * stride, -1) for slot, scan in enumerate(draw)]
        )
        thresholds, fps, sens = _curve_arrays(draw_probs, draw_ids, len(draw), total)
        samples.append(sensitivities(FrocCurve(thresholds, fps, sens), levels))

    if not samples:
        raise NoduleFprError("ZERO_NODULES", "Every bootstrap resample was free of reference nodules.")
    logger.debug("Bootstrap kept %d of %d resamples.", len(samples), resamples)
    matrix = np.asarray(samples)
    low = np.percentile(matrix, 2.5, axis=0)
    high = np.percentile(matrix, 97.5, axis=0)
    return low.tolist(), high.tolist()


def froc_table(curve: FrocCurve) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "threshold": curve.thresholds,
            "fp_per_scan": curve.fp_per_scan,
            "sensitivity": curve.sensitivity,
        }
    )


def evaluate(
    data: EvalInput,
    total_nodules: int | None = None,
    resamples: int = 1000,
    seed: int = 0,
    levels: tuple[float, ...] | list[float] = FP_LEVELS,
    radius_scale: float = 1.0,
) -> tuple[FrocCurve, EvalSummary]:
    tags = match_candidates(data, radius_scale)
    total = data.nodule_count() if total_nodules is None else total_nodules
    curve = froc_curve(data, tags, total)
    values = sensitivities(curve, levels)
    low, high = bootstrap_ci(data, tags, resamples, seed, levels)
    summary = EvalSummary(
        fp_levels=list(levels),
        sensitivities=values,
        cpm=cpm_from_sensitivities(values),
        ci_low=low,
        ci_high=high,
        total_nodules=total,
        scan_count=len(data.scans),
        candidate_count=len(data.candidates),
        resamples=resamples,
    )
    logger.info("CPM %.4f over %d scans (%d nodules).", summary.cpm, summary.scan_count, total)
    return curve, summary


def plot_froc(
    curves: dict[str, FrocCurve],
    path: str | Path,
    bands: dict[str, EvalSummary] | None = None,
    levels: tuple[float, ...] | list[float] = FP_LEVELS,
) -> Path:
    """FROC curves on a log2 FP/scan axis; CI bounds drawn dashed."""
    ensure(bool(curves), "EMPTY_INPUT", "Nothing to plot.")
    low_x, high_x = min(levels), max(levels)
    figure = Figure(figsize=(6, 4.5))
    axes = figure.add_subplot()
    for label, curve in curves.items():
        # Step the curve through the plotted range so every level gets a value.
        grid = np.geomspace(low_x, high_x, 200)
        line = axes.plot(grid, [sensitivity_at(curve, x) for x in grid], label=label, drawstyle="steps-post")
        if bands and label in bands:
            summary = bands[label]
            color = line[0].get_color()
            axes.plot(summary.fp_levels, summary.ci_low, linestyle="--", color=color, linewidth=0.8)
            axes.plot(summary.fp_levels, summary.ci_high, linestyle="--", color=color, linewidth=0.8)
    axes.set_xscale("log", base=2)
    axes.set_xticks(list(levels))
    axes.set_xticklabels([f"{level:g}" for level in levels])
    axes.set_xlim(low_x, high_x)
    axes.set_ylim(0.0, 1.0)
    axes.set_xlabel("Average false positives per scan")
    axes.set_ylabel("Sensitivity")
    axes.grid(True, which="major", linewidth=0.3)
    axes.legend(loc="lower right")

    target = resolve_output_path(path)
    with matplotlib.rc_context({"svg.hashsalt": "nodulefpr"}):
        figure.savefig(target, format="svg", metadata={"Date": None})
    return target


def compare_regimes(summaries: dict[str, EvalSummary]) -> pd.DataFrame:
    """One row per label: sensitivities at each level and the CPM."""
    ensure(bool(summaries), "EMPTY_INPUT", "No evaluated regimes to compare.")
    rows = []
    for label, summary in summaries.items():
        row: dict[str, object] = {"label": label}
        row.update({f"fp_{level:g}": value for level, value in zip(summary.fp_levels, summary.sensitivities)})
        row["cpm"] = summary.cpm
        rows.append(row)
    return pd.DataFrame(rows).sort_values("cpm", ascending=False, kind="stable").reset_index(drop=True)
