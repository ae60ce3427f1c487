from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from nodulefpr.errors import NoduleFprError, ensure
from nodulefpr.filesystem import require_artifact, resolve_output_path
from nodulefpr.nn import read_container, write_container

logger = logging.getLogger(__name__)

ZERO_EPS = 1e-9
MAX_ITER = 300


@dataclass(frozen=True)
class ClusterModel:
    kept_dims: list[int]
    centroids: np.ndarray = field(repr=False)
    assignments: np.ndarray = field(repr=False)
    inertia: float
    feature_dim: int

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    def __post_init__(self) -> None:
        ensure(bool(self.kept_dims), "DEGENERATE_FEATURES", "A cluster model needs at least one kept dimension.")
        ensure(self.centroids.shape[1] == len(self.kept_dims), "SHAPE_MISMATCH", "Centroid width != kept dims.")
        ensure(bool(np.all(np.isfinite(self.centroids))), "INVALID_VALUE", "Centroids must be finite.")


def prune_zero_columns(features: np.ndarray, eps: float = ZERO_EPS) -> tuple[np.ndarray, list[int]]:
    """Drop every column whose entries are all <= eps."""
    matrix = np.asarray(features, dtype=np.float64)
    ensure(matrix.ndim == 2 and matrix.shape[0] >= 1, "EMPTY_INPUT", "Pruning needs at least one sample.")
    kept = np.flatnonzero(np.any(matrix > eps, axis=0))
    if kept.size == 0:
        raise NoduleFprError("DEGENERATE_FEATURES", "Every feature column is zero on all samples.")
    return matrix[:, kept], kept.tolist()


def _squared_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = np.full(n, np.inf)
    for idx in range(1, k):
        closest = np.minimum(closest, _squared_distances(x, centroids[idx - 1:idx])[:, 0])
        total = closest.sum()
        # All points coincide with chosen centroids: any point will do.
        choice = rng.integers(n) if total <= 0 else rng.choice(n, p=closest / total)
        centroids[idx] = x[choice]
    return centroids


def _update(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    k = centroids.shape[0]
    updated = centroids.copy()
    for cluster in range(k):
        members = labels == cluster
        if members.any():
            updated[cluster] = x[members].mean(axis=0)
    empty = [cluster for cluster in range(k) if not np.any(labels == cluster)]
    if empty:
        # Re-seed each empty cluster from the point farthest from its centroid.
        spread = _squared_distances(x, updated)[np.arange(len(x)), labels]
        taken: set[int] = set()
        for cluster in empty:
            order = np.argsort(-spread, kind="stable")
            point = next(int(p) for p in order if int(p) not in taken)
            taken.add(point)
            updated[cluster] = x[point]
    return updated


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int) -> tuple[np.ndarray, np.ndarray, float]:
    labels = _squared_distances(x, centroids).argmin(axis=1)
    for _ in range(max_iter):
        centroids = _update(x, labels, centroids)
        new_labels = _squared_distances(x, centroids).argmin(axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    inertia = float(_squared_distances(x, centroids)[np.arange(len(x)), labels].sum())
    return centroids, labels, inertia


def kmeans_fit(
    features: np.ndarray,
    k: int,
    seed: int,
    restarts: int = 10,
    max_iter: int = MAX_ITER,
    kept_dims: list[int] | None = None,
    feature_dim: int | None = None,
) -> ClusterModel:
    """k-means++ seeding, Lloyd iterations, best of ``restarts`` by inertia."""
    x = np.asarray(features, dtype=np.float64)
    ensure(k >= 1, "INVALID_VALUE", f"K must be at least 1, got {k}.")
    ensure(x.shape[0] >= k, "TOO_FEW_SAMPLES", f"{x.shape[0]} samples cannot form {k} clusters.")
    ensure(restarts >= 1, "INVALID_VALUE", "At least one restart is required.")

    best: tuple[np.ndarray, np.ndarray, float] | None = None
    for child in np.random.SeedSequence(seed).spawn(restarts):
        rng = np.random.default_rng(child)
        result = _lloyd(x, _kmeans_plus_plus(x, k, rng), max_iter)
        if best is None or result[2] < best[2]:
            best = result
    assert best is not None
    centroids, labels, inertia = best
    dims = kept_dims if kept_dims is not None else list(range(x.shape[1]))
    logger.info("k-means K=%d over %d samples: inertia=%.4f", k, x.shape[0], inertia)
    return ClusterModel(
        kept_dims=dims,
        centroids=centroids,
        assignments=labels.astype(np.int64),
        inertia=inertia,
        feature_dim=feature_dim if feature_dim is not None else x.shape[1],
    )


def categorize(
    features: np.ndarray,
    k: int,
    seed: int,
    restarts: int = 10,
    eps: float = ZERO_EPS,
    max_iter: int = MAX_ITER,
) -> ClusterModel:
    """Prune always-zero code dimensions, then cluster what remains."""
    reduced, kept = prune_zero_columns(features, eps)
    feature_dim = np.asarray(features).shape[1]
    logger.info("Kept %d of %d feature dimensions.", len(kept), feature_dim)
    return kmeans_fit(reduced, k, seed, restarts, max_iter, kept_dims=kept, feature_dim=feature_dim)


def assign_cluster(model: ClusterModel, feature: np.ndarray) -> int:
    """Nearest centroid over the kept dims; ties go to the lowest cluster id."""
    vector = np.asarray(feature, dtype=np.float64)
    if vector.shape[-1] == model.feature_dim and model.feature_dim != len(model.kept_dims):
        vector = vector[model.kept_dims]
    distances = _squared_distances(vector[None, :], model.centroids)[0]
    return int(np.argmin(distances))


def cluster_sizes(model: ClusterModel) -> list[int]:
    return np.bincount(model.assignments, minlength=model.k).tolist()


def cluster_purity(assignments: list[int] | np.ndarray, labels: list[str]) -> tuple[pd.DataFrame, float]:
    """Cluster x label contingency table and the majority-label purity."""
    ensure(len(assignments) == len(labels), "SHAPE_MISMATCH", "Assignments and labels differ in length.")
    ensure(len(labels) > 0, "EMPTY_INPUT", "Purity needs at least one sample.")
    table = pd.crosstab(pd.Series(np.asarray(assignments), name="cluster"), pd.Series(labels, name="structure"))
    purity = float(table.max(axis=1).sum() / len(labels))
    return table, purity


def save_cluster_model(path: str | Path, model: ClusterModel) -> Path:
    header = {
        "kind": "clusters",
        "k": model.k,
        "kept_dims": model.kept_dims,
        "feature_dim": model.feature_dim,
        "inertia": model.inertia,
        "assignments": model.assignments.tolist(),
    }
    return write_container(path, header, [("centroids", model.centroids)], dtype="<f8")


def load_cluster_model(path: str | Path) -> ClusterModel:
    header, tensors = read_container(path)
    if header.get("kind") != "clusters":
        raise NoduleFprError("CHECKPOINT_INVALID", f"{path}: container does not hold a cluster model.")
    return ClusterModel(
        kept_dims=[int(d) for d in header["kept_dims"]],
        centroids=tensors[0][1].astype(np.float64),
        assignments=np.asarray(header["assignments"], dtype=np.int64),
        inertia=float(header["inertia"]),
        feature_dim=int(header["feature_dim"]),
    )


def save_assignments(path: str | Path, ids: list[int], assignments: np.ndarray) -> Path:
    frame = pd.DataFrame({"candidate_index": ids, "cluster": np.asarray(assignments, dtype=np.int64)})
    target = resolve_output_path(path)
    frame.to_csv(target, index=False)
    return target


def load_assignments(path: str | Path) -> dict[int, int]:
    frame = pd.read_csv(require_artifact(Path(path)))
    for column in ("candidate_index", "cluster"):
        ensure(column in frame.columns, "MISSING_COLUMN", f"{path}: missing column {column}.")
    return dict(zip(frame["candidate_index"].astype(int), frame["cluster"].astype(int)))
