from __future__ import annotations

import itertools
from pathlib import Path

import numpy as np
import pytest

from nodulefpr.categorizer import (
    ClusterModel,
    assign_cluster,
    categorize,
    cluster_purity,
    cluster_sizes,
    kmeans_fit,
    load_assignments,
    load_cluster_model,
    prune_zero_columns,
    save_assignments,
    save_cluster_model,
)
from nodulefpr.errors import NoduleFprError


def _two_blobs(seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.vstack([rng.normal(0.0, 0.5, size=(4, 2)), rng.normal(10.0, 0.5, size=(4, 2))])


def _best_two_partition(x: np.ndarray) -> float:
    best = np.inf
    for bits in itertools.product([0, 1], repeat=len(x) - 1):
        labels = np.array((0, *bits))
        if labels.all() or not labels.any():
            continue
        sse = sum(float(((x[labels == c] - x[labels == c].mean(axis=0)) ** 2).sum()) for c in (0, 1))
        best = min(best, sse)
    return best


# Expected behavior: only columns that are zero on every sample are dropped.
def test_prune_zero_columns() -> None:
    reduced, kept = prune_zero_columns(np.array([[0.0, 1.0, 0.0], [0.0, 2.0, 0.5]]))
    assert kept == [1, 2]
    assert reduced.tolist() == [[1.0, 0.0], [2.0, 0.5]]


# Expected behavior: an all-zero feature matrix cannot be clustered.
def test_prune_zero_columns_degenerate() -> None:
    with pytest.raises(NoduleFprError) as exc:
        prune_zero_columns(np.zeros((3, 4)))
    assert exc.value.code == "DEGENERATE_FEATURES"


# Expected behavior: with K=1 the centroid is the mean and inertia the total squared deviation.
def test_kmeans_single_cluster_is_mean() -> None:
    x = np.array([[0.0, 0.0], [2.0, 0.0], [4.0, 3.0]])
    model = kmeans_fit(x, k=1, seed=0)
    assert model.centroids[0].tolist() == pytest.approx([2.0, 1.0])
    assert model.inertia == pytest.approx(4 + 1 + 0 + 1 + 4 + 4)
    assert model.assignments.tolist() == [0, 0, 0]


# Expected behavior: on well separated data K=2 reaches the exhaustive-search optimum.
def test_kmeans_matches_exhaustive_two_partition() -> None:
    x = _two_blobs()
    model = kmeans_fit(x, k=2, seed=3)
    assert model.inertia == pytest.approx(_best_two_partition(x))
    assert len(set(model.assignments[:4].tolist())) == 1
    assert set(model.assignments[:4].tolist()) != set(model.assignments[4:].tolist())


# Expected behavior: distinct points with K equal to their count give singleton clusters.
def test_kmeans_every_cluster_nonempty() -> None:
    x = np.arange(12, dtype=np.float64).reshape(6, 2) ** 2
    model = kmeans_fit(x, k=6, seed=1)
    assert cluster_sizes(model) == [1] * 6
    assert model.inertia == pytest.approx(0.0)


# Expected behavior: the same seed gives the same clustering.
def test_kmeans_is_deterministic() -> None:
    x = np.random.default_rng(4).random((40, 3))
    first, second = kmeans_fit(x, k=4, seed=9), kmeans_fit(x, k=4, seed=9)
    assert np.array_equal(first.assignments, second.assignments)
    assert np.array_equal(first.centroids, second.centroids)


# Expected behavior: fewer samples than clusters is an error.
def test_kmeans_too_few_samples() -> None:
    with pytest.raises(NoduleFprError) as exc:
        kmeans_fit(np.zeros((2, 2)), k=3, seed=0)
    assert exc.value.code == "TOO_FEW_SAMPLES"


# Expected behavior: equidistant features go to the lowest cluster id.
def test_assign_cluster_tie_goes_to_lowest_id() -> None:
    model = ClusterModel(
        kept_dims=[0],
        centroids=np.array([[0.0], [2.0]]),
        assignments=np.array([0, 1]),
        inertia=0.0,
        feature_dim=1,
    )
    assert assign_cluster(model, np.array([1.0])) == 0
    assert assign_cluster(model, np.array([1.5])) == 1


# Expected behavior: categorize records pruned dims and full-width vectors are reduced before assignment.
def test_categorize_prunes_then_assigns() -> None:
    x = _two_blobs(seed=2)
    features = np.hstack([np.zeros((len(x), 1)), np.abs(x)])
    model = categorize(features, k=2, seed=5)
    assert model.kept_dims == [1, 2]
    assert model.feature_dim == 3
    for row, expected in zip(features, model.assignments):
        assert assign_cluster(model, row) == expected


# Expected behavior: purity is the share of samples carrying their cluster's majority label.
def test_cluster_purity() -> None:
    table, purity = cluster_purity([0, 0, 1, 1, 1], ["vessel", "vessel", "wall", "wall", "blob"])
    assert purity == pytest.approx(0.8)
    assert table.loc[1, "wall"] == 2
    assert table.loc[0, "vessel"] == 2


# Expected behavior: cluster models and assignments survive a save and reload.
def test_cluster_persistence(tmp_path: Path) -> None:
    model = categorize(np.abs(_two_blobs(seed=6)), k=2, seed=0)
    loaded = load_cluster_model(save_cluster_model(tmp_path / "clusters.ckpt", model))
    assert loaded.kept_dims == model.kept_dims
    assert np.array_equal(loaded.assignments, model.assignments)
    assert loaded.centroids == pytest.approx(model.centroids, rel=1e-6)

    path = save_assignments(tmp_path / "assignments.csv", [10, 20], np.array([1, 0]))
    assert load_assignments(path) == {10: 1, 20: 0}


# Expected behavior: centroids reload bit for bit, so near-tie assignments survive a round trip.
def test_cluster_persistence_keeps_float64_centroids(tmp_path: Path) -> None:
    centroids = np.array([[0.0], [1.0 + 1e-12]])
    model = ClusterModel(
        kept_dims=[0], centroids=centroids, assignments=np.array([0, 1]), inertia=0.0, feature_dim=1
    )
    loaded = load_cluster_model(save_cluster_model(tmp_path / "clusters.ckpt", model))
    assert loaded.centroids.dtype == np.float64
    assert np.array_equal(loaded.centroids, centroids)
    point = np.array([0.5 + 4e-13])
    assert assign_cluster(model, point) == 0
    assert assign_cluster(loaded, point) == 0


def _separated_instance(sizes: tuple[int, int], seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    near = rng.normal(0.0, 0.5, size=(sizes[0], 3))
    far = rng.normal(0.0, 0.5, size=(sizes[1], 3)) + np.array([12.0, -8.0, 5.0])
    return np.vstack([near, far])[rng.permutation(sum(sizes))]


# Expected behavior: every small well separated K=2 instance reaches the brute-force minimum inertia.
@pytest.mark.parametrize(
    ("sizes", "seed"),
    [((1, 2), 0), ((2, 2), 1), ((1, 4), 2), ((3, 3), 3), ((2, 5), 4), ((4, 3), 5), ((4, 4), 6), ((1, 7), 7)],
)
def test_kmeans_matches_brute_force_on_small_instances(sizes: tuple[int, int], seed: int) -> None:
    x = _separated_instance(sizes, seed)
    model = kmeans_fit(x, k=2, seed=seed, restarts=10)
    assert model.inertia == pytest.approx(_best_two_partition(x), rel=1e-12, abs=1e-12)


# Expected behavior: a converged fit is a Lloyd fixed point: centroids are member means and labels are nearest.
def test_kmeans_result_is_lloyd_fixed_point() -> None:
    x = np.random.default_rng(9).normal(size=(60, 4))
    model = kmeans_fit(x, k=3, seed=2)
    for cluster in range(3):
        members = x[model.assignments == cluster]
        assert model.centroids[cluster] == pytest.approx(members.mean(axis=0), abs=1e-12)
    nearest = ((x[:, None, :] - model.centroids[None]) ** 2).sum(axis=2).argmin(axis=1)
    assert nearest.tolist() == model.assignments.tolist()


# Expected behavior: even when iterations run out, each sample is labeled with its nearest returned centroid.
def test_kmeans_labels_match_centroids_when_iterations_run_out() -> None:
    x = np.random.default_rng(11).normal(size=(80, 2))
    model = kmeans_fit(x, k=4, seed=5, restarts=1, max_iter=1)
    distances = ((x[:, None, :] - model.centroids[None]) ** 2).sum(axis=2)
    assert distances.argmin(axis=1).tolist() == model.assignments.tolist()
    assert model.inertia == pytest.approx(float(distances.min(axis=1).sum()))
