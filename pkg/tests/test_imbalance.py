# tests/test_imbalance.py
import itertools
import json

import numpy as np
import pytest

from app.errors import ConstraintError, DataError, NumericError
from app.schemas import ImbalanceConfig
from app.services import seeding
from app.services.imbalance import (
    ClusterModel, farthest_pair, kmeans, kmeans_restarts, plan_batches, reweight, select_batch,
    steps_per_epoch,
)


def brute_force_inertia(points: np.ndarray) -> float:
    """Optimal 2-partition inertia by enumerating every split."""
    n = len(points)
    best = np.inf
    for mask in range(1, 2 ** (n - 1)):
        side = np.array([(mask >> i) & 1 for i in range(n)], dtype=bool)
        total = 0.0
        for part in (points[side], points[~side]):
            total += float(np.sum((part - part.mean(axis=0)) ** 2))
        best = min(best, total)
    return best


def model_with_assignments(assignments, k):
    assignments = np.asarray(assignments)
    return ClusterModel(np.zeros((k, 1)), assignments, np.bincount(assignments, minlength=k), 0.0)


# =============================================================================
# k-means
# =============================================================================

class TestKMeans:

    def test_two_obvious_groups(self):
        model = kmeans(np.array([[0.0], [1.0], [10.0], [11.0]]), 2, seed=0)
        assert sorted(model.centroids[:, 0]) == [0.5, 10.5]
        assert sorted(model.frequencies) == [2, 2]
        assert model.inertia == pytest.approx(1.0)

    def test_single_cluster(self, rng):
        pts = rng.normal(size=(9, 3))
        model = kmeans(pts, 1, seed=0)
        np.testing.assert_allclose(model.centroids[0], pts.mean(axis=0))
        assert model.inertia == pytest.approx(pts.var(axis=0).sum() * len(pts))

    def test_k_equals_n(self, rng):
        pts = rng.normal(size=(5, 2))
        model = kmeans(pts, 5, seed=0)
        assert model.inertia == pytest.approx(0.0)
        assert list(model.frequencies) == [1] * 5

    def test_inertia_never_increases(self, rng):
        model = kmeans(rng.normal(size=(40, 2)), 4, seed=1)
        assert all(b <= a + 1e-12 for a, b in zip(model.inertia_history, model.inertia_history[1:]))

    def test_duplicates_do_not_leave_empty_clusters(self):
        pts = np.array([[0.0, 0.0]] * 5 + [[1.0, 1.0]])
        model = kmeans(pts, 3, seed=0)
        assert np.all(model.frequencies >= 1)

    def test_deterministic_for_a_seed(self, rng):
        pts = rng.normal(size=(20, 3))
        a, b = kmeans(pts, 3, seed=11), kmeans(pts, 3, seed=11)
        np.testing.assert_array_equal(a.centroids, b.centroids)
        np.testing.assert_array_equal(a.assignments, b.assignments)

    def test_errors(self, rng):
        with pytest.raises(ConstraintError):
            kmeans(rng.normal(size=(2, 2)), 3)
        with pytest.raises(ConstraintError):
            kmeans(rng.normal(size=(4, 2)), 0)
        with pytest.raises(NumericError):
            kmeans(np.array([[0.0], [np.nan], [1.0]]), 2)

    def test_assign_to_fixed_centroids(self):
        model = ClusterModel.from_centroids(np.array([[0.0], [10.0]]), np.array([[1.0], [9.0], [4.0]]))
        assert list(model.assignments) == [0, 1, 0]
        assert model.inertia == pytest.approx(1.0 + 1.0 + 16.0)

    def test_matches_brute_force_oracle(self):
        hits = hits_restarted = 0
        trials = 200
        for t in range(trials):
            r = seeding.rng(t, "data")
            n = int(r.integers(3, 13))
            d = int(r.integers(1, 4))
            pts = r.normal(size=(n, d)) * r.uniform(0.5, 3.0, size=d)
            optimum = brute_force_inertia(pts)
            hits += kmeans(pts, 2, seed=t).inertia <= optimum + 1e-9
            hits_restarted += kmeans_restarts(pts, 2, seed=t, restarts=5).inertia <= optimum + 1e-9
        assert hits >= 0.95 * trials
        assert hits_restarted == trials


# =============================================================================
# RE
# =============================================================================

class TestReweight:

    def test_inverse_frequency(self):
        w = reweight(model_with_assignments([0, 0, 0, 0, 1, 1], 2))
        np.testing.assert_allclose(w, [1.0, 1.0, 1.0, 1.0, 2.0, 2.0])

    def test_single_cluster(self):
        np.testing.assert_array_equal(reweight(model_with_assignments([0] * 5, 1)), np.ones(5))

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_exhaustive_frequency_vectors(self, k):
        for n in range(k, 13):
            for cuts in itertools.combinations(range(1, n), k - 1):
                freqs = np.diff((0,) + cuts + (n,))
                assignments = np.repeat(np.arange(k), freqs)
                w = reweight(model_with_assignments(assignments, k))
                assert w.min() == 1.0
                per_cluster = np.array([w[assignments == j][0] for j in range(k)])
                for i, j in itertools.combinations(range(k), 2):
                    assert per_cluster[i] / per_cluster[j] == pytest.approx(freqs[j] / freqs[i])
                if len(set(freqs)) == 1:
                    np.testing.assert_array_equal(w, np.ones(n))


# =============================================================================
# SE
# =============================================================================

CENTROIDS = np.array([[0.0, 0.0], [10.0, 0.0], [1.0, 1.0]])


class TestSelectBatch:

    def test_farthest_pair_by_hand(self):
        i, j, d = farthest_pair(CENTROIDS)
        assert (i, j) == (0, 1) and d == pytest.approx(10.0)

    def test_farthest_pair_exhaustive(self, rng):
        for _ in range(50):
            c = rng.normal(size=(int(rng.integers(2, 7)), 3))
            i, j, d = farthest_pair(c)
            best = max(np.linalg.norm(a - b) for a, b in itertools.combinations(c, 2))
            assert d == pytest.approx(best)
            assert np.linalg.norm(c[i] - c[j]) == pytest.approx(best)

    def test_outlier_centroid_is_chosen(self):
        i, j, _ = farthest_pair(np.array([[0.0, 0.0], [0.0, 0.0], [50.0, 0.0]]))
        assert 2 in (i, j)

    def test_hand_ranked_neighbours(self):
        pts = np.array([[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [9.9, 0.0], [5.0, 5.0]])
        model = ClusterModel.from_centroids(CENTROIDS, pts)
        plan = select_batch(pts, model, 4, enforce_constraint=False)
        assert sorted(plan.indices.tolist()) == [0, 1, 2, 3]
        assert plan.chosen_pair == (0, 1)

    def test_halves_and_distinct_indices(self, rng):
        for t in range(30):
            pts = rng.normal(size=(30, 2))
            model = kmeans(pts, 3, seed=t)
            plan = select_batch(pts, model, 6)
            assert len(plan.indices) == 6
            assert len(set(plan.indices.tolist())) == 6
            np.testing.assert_array_equal(plan.weights, np.ones(6))

    def test_constraints(self, rng):
        pts = rng.normal(size=(30, 2))
        model = kmeans(pts, 3, seed=0)
        with pytest.raises(ConstraintError):
            select_batch(pts, model, 5)
        with pytest.raises(ConstraintError):
            select_batch(pts, model, 10)
        with pytest.raises(ConstraintError):
            select_batch(pts, kmeans(pts, 1, seed=0), 4)

    def test_minority_oversampled_on_planted_pool(self):
        shares = []
        for draw in range(100):
            r = seeding.rng(draw, "data")
            major = r.normal(0.0, 1.0, size=(27, 2))
            minor = r.normal(10.0, 0.5, size=(3, 2))
            pts = np.vstack([major, minor])
            plan = select_batch(pts, kmeans(pts, 3, seed=draw), 6)
            shares.append(np.mean(plan.indices >= 27))
        assert np.mean(shares) >= 3 * 0.1


# =============================================================================
# schedule
# =============================================================================

class TestPlanBatches:

    @pytest.fixture
    def volumes(self, rng):
        return rng.uniform(0, 255, size=(40, 1, 8, 8, 8))

    def test_vanilla_batches(self, volumes, tiny_state):
        batches = list(plan_batches(volumes, tiny_state, ImbalanceConfig(mode="none"), 6, seed=0,
                                    total_iterations=8))
        assert len(batches) == 8
        assert all(len(b.indices) == 6 and np.all(b.weights == 1.0) for b in batches)
        assert all(b.mode == "none" for b in batches)
        # one epoch is a permutation without repeats
        first_epoch = np.concatenate([b.indices for b in batches[:6]])
        assert len(set(first_epoch.tolist())) == 36

    def test_se_pool_and_batch_size(self, volumes, tiny_state, tmp_path):
        diag = tmp_path / "diag.jsonl"
        config = ImbalanceConfig(mode="se", k=3, q=10, m=6)
        batches = list(plan_batches(volumes, tiny_state, config, 6, seed=0, total_iterations=8,
                                    diagnostics_path=diag))
        per_epoch = steps_per_epoch(40, 6)
        assert [b.mode for b in batches] == ["warmup"] * per_epoch + ["se"] * (8 - per_epoch)
        for b in batches[per_epoch:]:
            assert len(b.indices) == 6 and len(set(b.indices.tolist())) == 6
            assert sum(b.diagnostics.frequencies) == 30
        rows = [json.loads(line) for line in diag.read_text().splitlines()]
        assert [r["iteration"] for r in rows] == [6, 7]
        assert all(r["chosen_pair"] is not None for r in rows)

    def test_re_weights(self, volumes, tiny_state):
        config = ImbalanceConfig(mode="re", k=3, q=10, warmup_epochs=0)
        for b in plan_batches(volumes, tiny_state, config, 6, seed=0, total_iterations=3):
            assert b.mode == "re"
            assert len(b.indices) == 6
            assert b.weights.min() == 1.0

    def test_re_without_subsampling_uses_the_pool(self, volumes, tiny_state):
        config = ImbalanceConfig(mode="re", k=3, q=10, warmup_epochs=0, re_subsample=False)
        b = next(plan_batches(volumes, tiny_state, config, 6, seed=0, total_iterations=1))
        assert len(b.indices) == 30

    def test_same_seed_same_plan(self, volumes, tiny_state):
        config = ImbalanceConfig(mode="se", warmup_epochs=0)
        a = [b.indices for b in plan_batches(volumes, tiny_state, config, 6, seed=3, total_iterations=3)]
        b = [b.indices for b in plan_batches(volumes, tiny_state, config, 6, seed=3, total_iterations=3)]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_pool_larger_than_dataset(self, rng, tiny_state):
        small = rng.uniform(0, 255, size=(20, 1, 8, 8, 8))
        with pytest.raises(DataError):
            list(plan_batches(small, tiny_state, ImbalanceConfig(mode="se", warmup_epochs=0), 6, 0, 2))

    def test_dataset_smaller_than_batch(self, rng, tiny_state):
        with pytest.raises(DataError):
            list(plan_batches(rng.uniform(size=(4, 1, 8, 8, 8)), tiny_state, ImbalanceConfig(), 6, 0, 1))
