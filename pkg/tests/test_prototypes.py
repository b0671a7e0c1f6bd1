import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from app.exceptions import ConfigurationError, ContractViolation, PrototypeLifecycleError
from app.prototypes import (
    PrototypeBank,
    cluster_diagnostics,
    kmeans_init,
    kmeanspp_seed,
    spherical_kmeans,
)

from .helpers import unit_rows


def _blobs(rng, n=300, d=8, k=3, spread=0.05):
    centers = unit_rows(rng, k, d)
    labels = np.repeat(np.arange(k), n // k)
    x = centers[labels] + spread * rng.normal(size=(len(labels), d))
    return x / np.linalg.norm(x, axis=1, keepdims=True), labels


class TestSphericalKMeans:
    def test_recovers_separated_blobs(self, rng):
        x, labels = _blobs(rng)
        result = spherical_kmeans(x, 3, np.random.default_rng(0))
        assert adjusted_rand_score(labels, result.labels) >= 0.9
        assert result.converged

    @pytest.mark.parametrize("seed", range(10))
    def test_objective_is_monotone(self, seed):
        gen = np.random.default_rng(seed)
        x = unit_rows(gen, 120, 5)
        history = spherical_kmeans(x, 6, np.random.default_rng(seed)).objective_history
        assert all(b >= a - 1e-9 for a, b in zip(history, history[1:]))

    def test_centroids_unit_norm(self, rng):
        result = spherical_kmeans(unit_rows(rng, 50, 4), 5, np.random.default_rng(1))
        np.testing.assert_allclose(np.linalg.norm(result.centroids, axis=1), 1.0)

    def test_same_seed_same_result(self, rng):
        x = unit_rows(rng, 80, 4)
        a = spherical_kmeans(x, 4, np.random.default_rng(3))
        b = spherical_kmeans(x, 4, np.random.default_rng(3))
        np.testing.assert_array_equal(a.centroids, b.centroids)

    def test_fewer_points_than_clusters(self, rng):
        with pytest.raises(ConfigurationError):
            spherical_kmeans(unit_rows(rng, 3, 4), 4, np.random.default_rng(0))

    def test_rejects_non_unit_features(self, rng):
        with pytest.raises(ContractViolation):
            spherical_kmeans(2.0 * unit_rows(rng, 10, 3), 2, np.random.default_rng(0))

    def test_duplicate_points_do_not_break_seeding(self):
        x = np.tile([[1.0, 0.0]], (6, 1))
        seeds = kmeanspp_seed(x, 3, np.random.default_rng(0))
        assert seeds.shape == (3, 2)
        result = spherical_kmeans(x, 3, np.random.default_rng(0))
        assert np.all(np.isfinite(result.centroids))

    def test_two_axis_groups(self):
        x = np.vstack([np.tile([1.0, 0.0], (5, 1)), np.tile([0.0, 1.0], (5, 1))])
        result = spherical_kmeans(x, 2, np.random.default_rng(0))
        centroids = result.centroids[np.argsort(-result.centroids[:, 0])]
        np.testing.assert_allclose(centroids, [[1.0, 0.0], [0.0, 1.0]], atol=1e-12)
        assert len(set(result.labels[:5].tolist())) == 1
        assert len(set(result.labels[5:].tolist())) == 1
        assert result.labels[0] != result.labels[5]

    def test_one_cluster_per_point(self, rng):
        x = unit_rows(rng, 6, 4)
        result = spherical_kmeans(x, 6, np.random.default_rng(0))
        assert sorted(result.labels.tolist()) == list(range(6))
        np.testing.assert_allclose(result.centroids[result.labels], x, atol=1e-12)

    def test_max_iters_respected(self, rng):
        result = spherical_kmeans(unit_rows(rng, 200, 6), 8, np.random.default_rng(0), max_iters=1)
        assert result.iterations <= 1


class TestPrototypeBank:
    def test_use_before_init_raises(self):
        bank = PrototypeBank(3)
        with pytest.raises(PrototypeLifecycleError):
            bank.assign(np.ones((1, 2)))
        with pytest.raises(PrototypeLifecycleError):
            bank.ema_update(np.ones((1, 2)), np.zeros(1))
        with pytest.raises(PrototypeLifecycleError):
            bank.reinit_due(0)

    @pytest.mark.parametrize("kwargs", [dict(num_clusters=1), dict(num_clusters=3, momentum=1.5), dict(num_clusters=3, reinit_period=0)])
    def test_rejects_bad_settings(self, kwargs):
        with pytest.raises(ConfigurationError):
            PrototypeBank(**kwargs)

    def test_assign_picks_nearest_with_lowest_index_on_ties(self):
        bank = PrototypeBank(2)
        bank.initialize(np.array([[1.0, 0.0], [0.0, 1.0]]), seed=0)
        bank.protos = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert bank.assign(np.array([[1.0, 0.0]])).tolist() == [0]
        bank.protos = np.array([[1.0, 0.0], [0.0, 1.0]])
        h = np.array([[0.0, 1.0], [1.0, 0.0], [np.sqrt(0.5), np.sqrt(0.5)]])
        assert bank.assign(h).tolist() == [1, 0, 0]

    def test_ema_hand_computed(self):
        bank = PrototypeBank(2, momentum=0.5)
        bank.initialize(np.array([[1.0, 0.0], [0.0, 1.0]]), seed=0)
        bank.protos = np.array([[1.0, 0.0], [0.0, 1.0]])
        counts = bank.ema_update(np.array([[0.0, 1.0], [0.0, 1.0]]), np.array([0, 0]))
        assert counts.tolist() == [2, 0]
        expected = np.array([0.5, 0.5]) / np.linalg.norm([0.5, 0.5])
        np.testing.assert_allclose(bank.protos[0], expected)
        # no sample went to cluster 1
        np.testing.assert_array_equal(bank.protos[1], [0.0, 1.0])

    def test_ema_momentum_point_nine(self):
        bank = PrototypeBank(2, momentum=0.9)
        bank.initialize(np.array([[1.0, 0.0], [0.0, 1.0]]), seed=0)
        bank.protos = np.array([[1.0, 0.0], [0.0, 1.0]])
        bank.ema_update(np.array([[0.0, 1.0], [0.0, 1.0]]), np.array([0, 0]))
        expected = np.array([0.9, 0.1]) / np.linalg.norm([0.9, 0.1])
        np.testing.assert_allclose(bank.protos[0], expected, atol=1e-12)

    def test_momentum_one_freezes(self, rng):
        x = unit_rows(rng, 30, 4)
        bank = kmeans_init(x, 3, seed=0, momentum=1.0)
        before = bank.snapshot()
        bank.ema_update(x, bank.assign(x))
        np.testing.assert_allclose(bank.protos, before)

    def test_momentum_zero_takes_batch_mean(self, rng):
        x = unit_rows(rng, 30, 4)
        bank = kmeans_init(x, 3, seed=0, momentum=0.0)
        assignments = bank.assign(x)
        bank.ema_update(x, assignments)
        for k in np.unique(assignments):
            mean = x[assignments == k].mean(axis=0)
            np.testing.assert_allclose(bank.protos[k], mean / np.linalg.norm(mean))

    def test_unit_norm_after_many_updates(self, rng):
        x = unit_rows(rng, 100, 5)
        bank = kmeans_init(x, 4, seed=2, momentum=0.9)
        for _ in range(200):
            batch = unit_rows(rng, 16, 5)
            bank.ema_update(batch, bank.assign(batch))
            np.testing.assert_allclose(np.linalg.norm(bank.protos, axis=1), 1.0, atol=1e-10)

    def test_ema_rejects_bad_ids(self, rng):
        x = unit_rows(rng, 10, 3)
        bank = kmeans_init(x, 2, seed=0)
        with pytest.raises(ContractViolation):
            bank.ema_update(x, np.full(10, 2))
        with pytest.raises(ContractViolation):
            bank.ema_update(x, np.zeros(9, dtype=int))

    def test_reinit_schedule(self, rng):
        x = unit_rows(rng, 20, 3)
        bank = kmeans_init(x, 2, seed=0, reinit_period=5, epoch=10)
        assert not bank.reinit_due(14)
        assert bank.reinit_due(15)
        bank.initialize(x, seed=1, epoch=15)
        assert bank.last_init_epoch == 15
        assert bank.total_inits == 2
        assert not bank.reinit_due(19)

    def test_snapshot_is_a_copy(self, rng):
        bank = kmeans_init(unit_rows(rng, 20, 3), 2, seed=0)
        snap = bank.snapshot()
        snap[:] = 0.0
        assert np.all(np.linalg.norm(bank.protos, axis=1) > 0.5)


def test_cluster_diagnostics_counts_mixed_clusters():
    assignments = np.array([0, 0, 1, 1, 1, 3])
    sensitive = np.array([0, 1, 1, 1, 1, 0])
    diag = cluster_diagnostics(assignments, sensitive, 4)
    assert diag.sizes == [2, 3, 0, 1]
    assert diag.group1_fraction == [0.5, 1.0, 0.0, 0.0]
    assert diag.mixed_clusters == 1
    assert diag.empty_clusters == 1
