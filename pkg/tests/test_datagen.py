import numpy as np
import pytest

from smoefed.datagen import (dataset_from_csv, dataset_to_csv,
                             dirichlet_partition, generate_clustered_task,
                             split_80_10_10)
from smoefed.errors import DomainError


class TestGenerateClusteredTask:
    def test_zero_spread_collapses_to_centers(self):
        ds = generate_clustered_task(3, 5, 4, spread=0.0, seed=0)
        for c in range(3):
            block = ds.inputs[c * 5:(c + 1) * 5]
            assert np.allclose(block, block[0])

    def test_nearest_center_oracle(self):
        ds = generate_clustered_task(2, 100, 8, spread=0.5, seed=1,
                                     separation=20.0)
        centers = np.stack([
            ds.inputs[ds.labels == c].mean(axis=0) for c in range(2)])
        pred = np.argmin(
            np.linalg.norm(ds.inputs[:, None, :] - centers[None], axis=2),
            axis=1)
        assert np.array_equal(pred, ds.labels)

    def test_seed_determinism(self, tmp_path):
        a = generate_clustered_task(3, 10, 4, 1.0, seed=7)
        b = generate_clustered_task(3, 10, 4, 1.0, seed=7)
        pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
        dataset_to_csv(a, pa)
        dataset_to_csv(b, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_regression_targets(self):
        ds = generate_clustered_task(2, 10, 4, 1.0, seed=2,
                                     task_kind="regression")
        assert ds.labels.shape == (20, 1)

    def test_invalid_sizes(self):
        with pytest.raises(DomainError):
            generate_clustered_task(1, 10, 4, 1.0, seed=0)
        with pytest.raises(DomainError):
            generate_clustered_task(2, 0, 4, 1.0, seed=0)


class TestDirichletPartition:
    def test_single_client_gets_everything(self):
        ds = generate_clustered_task(3, 20, 4, 1.0, seed=3)
        part = dirichlet_partition(ds, 1, 0.5, np.random.default_rng(0))
        assert len(part.client_indices[0]) == len(ds)

    def test_disjoint_cover_and_class_conservation(self):
        ds = generate_clustered_task(4, 50, 4, 1.0, seed=4)
        for alpha in (0.5, 5.0):
            part = dirichlet_partition(ds, 4, alpha,
                                       np.random.default_rng(1))
            merged = np.concatenate(part.client_indices)
            assert len(merged) == len(ds)
            assert len(np.unique(merged)) == len(ds)
            for c in range(4):
                total = sum(int((ds.labels[idx] == c).sum())
                            for idx in part.client_indices)
                assert total == 50

    def test_high_alpha_is_nearly_uniform(self):
        ds = generate_clustered_task(2, 400, 4, 1.0, seed=5)
        deviations = []
        for seed in range(20):
            part = dirichlet_partition(ds, 4, 1e6,
                                       np.random.default_rng(seed))
            for idx in part.client_indices:
                for c in range(2):
                    count = int((ds.labels[idx] == c).sum())
                    deviations.append(abs(count - 100) / 100)
        assert np.mean(deviations) < 0.05

    def test_low_alpha_materializes_skew(self):
        ds = generate_clustered_task(4, 100, 4, 1.0, seed=6)
        skewed_seeds = 0
        for seed in range(20):
            part = dirichlet_partition(ds, 4, 0.5,
                                       np.random.default_rng(seed))
            max_share = 0.0
            for idx in part.client_indices:
                for c in range(4):
                    share = (ds.labels[idx] == c).sum() / 100
                    max_share = max(max_share, share)
            if max_share > 0.5:
                skewed_seeds += 1
        assert skewed_seeds > 10

    def test_determinism(self):
        ds = generate_clustered_task(3, 30, 4, 1.0, seed=7)
        p1 = dirichlet_partition(ds, 3, 0.5, np.random.default_rng(9))
        p2 = dirichlet_partition(ds, 3, 0.5, np.random.default_rng(9))
        for a, b in zip(p1.client_indices, p2.client_indices):
            assert np.array_equal(a, b)

    def test_invalid_alpha(self):
        ds = generate_clustered_task(2, 10, 4, 1.0, seed=8)
        with pytest.raises(DomainError):
            dirichlet_partition(ds, 2, 0.0, np.random.default_rng(0))


class TestSplit:
    def test_exact_sizes(self):
        ds = generate_clustered_task(2, 50, 4, 1.0, seed=9)    # 100 examples
        train, val, test = split_80_10_10(ds, np.random.default_rng(0))
        assert (len(train), len(val), len(test)) == (80, 10, 10)

    def test_remainder_goes_to_test(self):
        ds = generate_clustered_task(2, 51, 4, 1.0, seed=10)
        ds = ds.subset(np.arange(101))
        train, val, test = split_80_10_10(ds, np.random.default_rng(0))
        assert (len(train), len(val), len(test)) == (80, 10, 11)

    def test_cover_without_duplicates(self):
        ds = generate_clustered_task(3, 17, 4, 1.0, seed=11)
        train, val, test = split_80_10_10(ds, np.random.default_rng(1))
        merged = np.concatenate([train, val, test])
        assert len(np.unique(merged)) == len(ds)

    def test_too_small(self):
        ds = generate_clustered_task(2, 4, 4, 1.0, seed=12)
        ds = ds.subset(np.arange(8))
        with pytest.raises(DomainError):
            split_80_10_10(ds, np.random.default_rng(0))


class TestCsvRoundTrip:
    def test_classification_round_trip(self, tmp_path):
        ds = generate_clustered_task(3, 10, 5, 1.0, seed=13)
        path = tmp_path / "ds.csv"
        dataset_to_csv(ds, path)
        back = dataset_from_csv(path)
        assert np.array_equal(back.inputs, ds.inputs)
        assert np.array_equal(back.labels, ds.labels)
        assert back.class_count == 3
