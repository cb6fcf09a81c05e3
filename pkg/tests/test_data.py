"""Dataset ingestion, toy benchmark, batch pairing, serialization."""

import numpy as np
import pytest
from PIL import Image

from trida.data import (LabeledDataset, ToyBenchmarkSpec, SHAPE_CATALOG,
                        generate_toy_benchmark, load_benchmark_dir,
                        load_image_folder, paired_batches, save_benchmark_dir)
from trida.errors import ValidationError


def _write_folder(root, classes, per_class=2, side=10):
    rng = np.random.default_rng(0)
    for c in classes:
        d = root / c
        d.mkdir(parents=True)
        for i in range(per_class):
            arr = (rng.random((side, side, 3)) * 255).astype(np.uint8)
            Image.fromarray(arr).save(d / f"{i}.png")


class TestImageFolder:
    def test_two_classes_two_images(self, tmp_path):
        _write_folder(tmp_path, ["a", "b"])
        ds = load_image_folder(tmp_path, "source", image_side=8)
        assert len(ds) == 4
        assert ds.class_set == ["a", "b"]
        assert ds.images.shape == (4, 3, 8, 8)
        assert 0.0 <= ds.images.min() and ds.images.max() <= 1.0

    def test_empty_root_errors(self, tmp_path):
        with pytest.raises(ValidationError, match="no class directories"):
            load_image_folder(tmp_path, "source")

    def test_missing_path_is_io_error(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_image_folder(tmp_path / "nope", "source")

    def test_empty_class_dir_names_class(self, tmp_path):
        _write_folder(tmp_path, ["a"])
        (tmp_path / "empty_cls").mkdir()
        with pytest.raises(ValidationError, match="empty_cls"):
            load_image_folder(tmp_path, "source")

    def test_reload_is_deterministic(self, tmp_path):
        _write_folder(tmp_path, ["a", "b"], per_class=3)
        d1 = load_image_folder(tmp_path, "source", image_side=8)
        d2 = load_image_folder(tmp_path, "source", image_side=8)
        np.testing.assert_array_equal(d1.images, d2.images)
        np.testing.assert_array_equal(d1.labels, d2.labels)


class TestToyBenchmark:
    def test_regeneration_is_bit_identical(self):
        spec = ToyBenchmarkSpec(seed=0, samples_per_class_per_domain=4)
        first = generate_toy_benchmark(spec)
        second = generate_toy_benchmark(ToyBenchmarkSpec(
            seed=0, samples_per_class_per_domain=4))
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.images, b.images)
            np.testing.assert_array_equal(a.labels, b.labels)

    def test_pretrain_is_strict_superset(self):
        spec = ToyBenchmarkSpec(n_classes_task=4, n_classes_pretrain=8,
                                samples_per_class_per_domain=2)
        source, _, pretrain = generate_toy_benchmark(spec)
        assert set(source.class_set) < set(pretrain.class_set)
        assert pretrain.class_set[:4] == source.class_set

    def test_class_counts_validated(self):
        with pytest.raises(ValidationError):
            ToyBenchmarkSpec(n_classes_task=6, n_classes_pretrain=4)
        with pytest.raises(ValidationError):
            ToyBenchmarkSpec(n_classes_pretrain=len(SHAPE_CATALOG) + 1)

    def test_pixel_range(self):
        spec = ToyBenchmarkSpec(samples_per_class_per_domain=3)
        for ds in generate_toy_benchmark(spec):
            assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_source_softmax_transfers_poorly(self):
        # Oracle fixture: a pixel-softmax trained on source separates the
        # source domain (>= 95%) but drops hard on the shifted target.
        spec = ToyBenchmarkSpec(seed=0)
        source, target, _ = generate_toy_benchmark(spec)
        x = source.images.reshape(len(source), -1)
        y = source.labels
        w = np.zeros((x.shape[1], source.n_classes))
        b = np.zeros(source.n_classes)
        for _ in range(2000):
            z = x @ w + b
            z -= z.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(len(y)), y] -= 1.0
            p /= len(y)
            w -= 1.0 * (x.T @ p)
            b -= 1.0 * p.sum(axis=0)

        def acc(ds):
            z = ds.images.reshape(len(ds), -1) @ w + b
            return float((z.argmax(axis=1) == ds.labels).mean())

        assert acc(source) >= 0.95
        assert acc(target) <= acc(source) - 0.15


class TestPairedBatches:
    def _toy(self, n, role="source", n_classes=2):
        rng = np.random.default_rng(n)
        images = rng.random((n, 1, 2, 2))
        labels = rng.integers(0, n_classes, n)
        return LabeledDataset(images, labels, [f"c{i}" for i in range(n_classes)], role)

    def test_step_count_and_equal_lengths(self):
        a, b = self._toy(10), self._toy(4, "pretrain")
        pairs = list(paired_batches(a, b, 2, seed=0))
        assert len(pairs) == 5
        assert all(len(x) == len(y) for x, y in pairs)
        # the larger dataset is visited exactly once
        seen = np.concatenate([x.indices for x, _ in pairs])
        assert sorted(seen.tolist()) == list(range(10))

    def test_uneven_final_batch(self):
        a, b = self._toy(7), self._toy(3, "pretrain")
        pairs = list(paired_batches(a, b, 4, seed=1))
        assert [len(x) for x, _ in pairs] == [4, 3]
        assert [len(y) for _, y in pairs] == [4, 3]

    def test_same_seed_same_pairing(self):
        a, b = self._toy(6), self._toy(6, "pretrain")
        p1 = list(paired_batches(a, b, 2, seed=3))
        p2 = list(paired_batches(a, b, 2, seed=3))
        for (x1, y1), (x2, y2) in zip(p1, p2):
            np.testing.assert_array_equal(x1.indices, x2.indices)
            np.testing.assert_array_equal(y1.indices, y2.indices)

    def test_singleton_small_side(self):
        a, b = self._toy(5), self._toy(1, "pretrain")
        for _, y in paired_batches(a, b, 2, seed=0):
            assert set(y.indices.tolist()) == {0}

    def test_bad_batch_size(self):
        a, b = self._toy(3), self._toy(3, "pretrain")
        with pytest.raises(ValidationError):
            list(paired_batches(a, b, 0, seed=0))

    def test_order_matters_not_size_order(self):
        # smaller first argument: batches still pair up equally
        a, b = self._toy(4), self._toy(9, "pretrain")
        pairs = list(paired_batches(a, b, 3, seed=2))
        assert len(pairs) == 3
        assert all(len(x) == len(y) for x, y in pairs)


class TestDatasetValidation:
    def test_pixel_bounds_enforced(self):
        with pytest.raises(ValidationError, match=r"\[0, 1\]"):
            LabeledDataset(np.full((1, 1, 2, 2), 1.5), np.array([0]), ["a"], "source")

    def test_labels_must_index_class_set(self):
        with pytest.raises(ValidationError):
            LabeledDataset(np.zeros((1, 1, 2, 2)), np.array([3]), ["a"], "source")

    def test_source_requires_labels(self):
        with pytest.raises(ValidationError):
            LabeledDataset(np.zeros((1, 1, 2, 2)), None, ["a"], "source")

    def test_target_may_be_unlabeled(self):
        ds = LabeledDataset(np.zeros((2, 1, 2, 2)), None, ["a"], "target")
        assert ds[0].label is None


class TestSerialization:
    def test_roundtrip_bit_identical(self, tmp_path):
        spec = ToyBenchmarkSpec(seed=7, samples_per_class_per_domain=2)
        source, target, pretrain = generate_toy_benchmark(spec)
        save_benchmark_dir(tmp_path / "bench", source, target, pretrain, spec)
        s2, t2, p2 = load_benchmark_dir(tmp_path / "bench")
        for orig, loaded in ((source, s2), (target, t2), (pretrain, p2)):
            np.testing.assert_array_equal(orig.images, loaded.images)
            np.testing.assert_array_equal(orig.labels, loaded.labels)
            assert orig.class_set == loaded.class_set
        manifest = (tmp_path / "bench" / "manifest.txt").read_text()
        assert "seed = 7" in manifest
        assert "source.classes = " in manifest

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_benchmark_dir(tmp_path)
