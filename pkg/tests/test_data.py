"""Synthetic scene generator, augmentation, balanced sampling and dataset I/O."""
import json
import warnings

import numpy as np
import pytest

from fosnet import fost
from fosnet.data import (DatasetFormatError, Sample, SyntheticSceneSpec, augment, augment_batch, balanced_batches,
                         channel_stats, default_cooccurrence, generate_dataset, hflip, load_dataset, normalize,
                         rescale, save_dataset)

from oracles import bayes_scene_accuracy


@pytest.fixture(scope="module")
def full():
    return generate_dataset(SyntheticSceneSpec(), 0)


@pytest.fixture(scope="module")
def small():
    return generate_dataset(SyntheticSceneSpec(samples_per_scene=20, val_per_scene=5), 1)


class TestGenerator:
    def test_same_seed_identical(self, small):
        again = generate_dataset(SyntheticSceneSpec(samples_per_scene=20, val_per_scene=5), 1)
        assert small.train.images.tobytes() == again.train.images.tobytes()
        assert small.val.objects.tobytes() == again.val.objects.tobytes()

    def test_different_seed_differs(self, small):
        other = generate_dataset(SyntheticSceneSpec(samples_per_scene=20, val_per_scene=5), 2)
        assert not np.array_equal(small.train.images, other.train.images)

    def test_counts_per_scene(self, full):
        assert np.bincount(full.train.labels).tolist() == [500] * 8
        assert np.bincount(full.val.labels).tolist() == [100] * 8
        assert full.train.images.shape == (4000, 32, 32, 3)

    def test_value_range(self, full):
        assert full.train.images.min() >= 0.0 and full.train.images.max() <= 1.0

    def test_cooccurrence_frequencies(self, full):
        c = full.spec.cooccurrence
        for s in range(8):
            freq = full.train.objects[full.train.labels == s].mean(axis=0)
            assert np.abs(freq - c[:, s]).max() <= 0.05

    def test_at_most_three_glyphs(self, full):
        assert full.train.objects.sum(axis=1).max() <= 3

    def test_default_cooccurrence_shape(self):
        c = default_cooccurrence()
        assert c.shape == (6, 8)
        assert (c.max(axis=0) == 0.8).all()
        assert ((c > 0).sum(axis=0) == 3).all()

    @pytest.mark.parametrize("cooc", [np.full((6, 8), 0.4), np.full((6, 8), 1.5), np.zeros((8, 6))])
    def test_invalid_cooccurrence(self, cooc):
        with pytest.raises(ValueError):
            SyntheticSceneSpec(cooccurrence=cooc)

    def test_spec_json_round_trip(self):
        spec = SyntheticSceneSpec(samples_per_scene=7)
        back = SyntheticSceneSpec.from_json(json.loads(json.dumps(spec.to_json())))
        assert back.to_json() == spec.to_json()


class TestSceneInformation:
    def test_exact_bayes_accuracy_above_sixty_percent(self):
        assert bayes_scene_accuracy(default_cooccurrence()) > 0.6

    def test_tabular_classifier_on_object_labels(self, full):
        # fit a lookup table pattern -> most frequent scene on train, score on val
        table = {}
        for pat, y in zip(map(bytes, full.train.objects.astype(np.uint8)), full.train.labels):
            table.setdefault(pat, np.zeros(8))[y] += 1
        prior = np.bincount(full.train.labels).argmax()
        pred = [table[p].argmax() if p in table else prior for p in map(bytes, full.val.objects.astype(np.uint8))]
        assert np.mean(np.asarray(pred) == full.val.labels) > 0.6

    def test_sub_crops_carry_scene(self, full):
        def feats(images):
            crops = images[:, 8:24, 8:24]
            return np.concatenate([crops.mean(axis=(1, 2)), crops.std(axis=(1, 2)),
                                   np.abs(np.diff(crops, axis=1)).mean(axis=(1, 2)),
                                   np.abs(np.diff(crops, axis=2)).mean(axis=(1, 2))], axis=1)

        ftr, fva = feats(full.train.images), feats(full.val.images)
        mu, sd = ftr.mean(axis=0), ftr.std(axis=0)
        ftr, fva = (ftr - mu) / sd, (fva - mu) / sd
        centroids = np.stack([ftr[full.train.labels == s].mean(axis=0) for s in range(8)])
        pred = ((fva[:, None] - centroids[None]) ** 2).sum(axis=-1).argmin(axis=1)
        # chance is 1/8
        assert np.mean(pred == full.val.labels) > 0.3


class TestAugment:
    img = np.random.default_rng(0).uniform(size=(32, 32, 3))

    def test_double_flip_is_identity(self):
        rng = np.random.default_rng(0)
        once = augment(self.img, rng, force_scale=1.0, force_flip=True, crop_offset=(0, 0))
        twice = augment(once, rng, force_scale=1.0, force_flip=True, crop_offset=(0, 0))
        np.testing.assert_array_equal(twice, self.img)
        np.testing.assert_array_equal(hflip(hflip(self.img)), self.img)

    def test_identity_settings_only_normalise(self):
        mean, std = np.array([0.5, 0.4, 0.3]), np.array([0.2, 0.25, 0.3])
        out = augment(self.img, np.random.default_rng(0), mean, std, force_scale=1.0, force_flip=False,
                      crop_offset="center")
        np.testing.assert_allclose(out, (self.img - mean) / std, atol=1e-15)

    def test_sample_labels_preserved(self):
        s = Sample(self.img, 3, np.array([0, 1, 0, 0, 1, 0]))
        out = augment(s, np.random.default_rng(1))
        assert isinstance(out, Sample) and out.scene == 3
        np.testing.assert_array_equal(out.objects, s.objects)
        assert out.objects is not s.objects

    def test_range_and_shape_preserved(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            out = augment(self.img, rng)
            assert out.shape == (32, 32, 3)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_rescale_sizes(self):
        assert rescale(self.img, 1.25).shape == (40, 40, 3)
        assert rescale(self.img, 1.0) is self.img

    def test_constant_image_survives_rescale(self):
        out = rescale(np.full((32, 32, 3), 0.25), 1.17)
        np.testing.assert_allclose(out, 0.25, atol=1e-12)

    def test_flip_rate(self):
        rng = np.random.default_rng(3)
        img = np.zeros((4, 4, 1))
        img[:, 0] = 1.0
        flips = sum(augment(img, rng, force_scale=1.0)[0, -1, 0] == 1.0 for _ in range(2000))
        assert abs(flips / 2000 - 0.5) < 0.05

    def test_batch_disabled_normalises(self, small):
        x = small.train.images[:4]
        out = augment_batch(x, np.random.default_rng(0), small.mean, small.std, enabled=False)
        np.testing.assert_allclose(out, normalize(x, small.mean, small.std))

    def test_normalised_train_statistics(self, full):
        z = normalize(full.train.images, full.mean, full.std)
        mean, std = channel_stats(z)
        assert np.abs(mean).max() <= 0.01 and np.abs(std - 1).max() <= 0.02


class TestBalancedBatches:
    def test_four_per_class_at_batch_32(self):
        labels = np.repeat(np.arange(8), 40)
        for batch in balanced_batches(labels, 32, np.random.default_rng(0)):
            assert np.bincount(labels[batch], minlength=8).tolist() == [4] * 8

    def test_epoch_histogram_with_imbalance(self):
        labels = np.concatenate([np.repeat(np.arange(8), 30), np.zeros(25, dtype=int)])
        seen = np.concatenate(list(balanced_batches(labels, 20, np.random.default_rng(1))))
        hist = np.bincount(labels[seen], minlength=8)
        assert hist.max() - hist.min() <= 1
        assert len(np.unique(seen)) == len(seen)

    def test_within_batch_counts_differ_by_at_most_one(self):
        labels = np.repeat(np.arange(8), 25)
        for batch in balanced_batches(labels, 20, np.random.default_rng(2)):
            counts = np.bincount(labels[batch], minlength=8)
            assert counts.max() - counts.min() <= 1

    def test_epochs_differ_without_reseed(self):
        labels = np.repeat(np.arange(8), 10)
        rng = np.random.default_rng(3)
        a = np.concatenate(list(balanced_batches(labels, 16, rng)))
        b = np.concatenate(list(balanced_batches(labels, 16, rng)))
        assert not np.array_equal(a, b)
        c = np.concatenate(list(balanced_batches(labels, 16, np.random.default_rng(3))))
        np.testing.assert_array_equal(a, c)

    def test_small_batch_warns(self):
        with pytest.warns(UserWarning, match="per epoch"):
            list(balanced_batches(np.repeat(np.arange(8), 4), 4, np.random.default_rng(0)))

    def test_oversized_batch_rejected(self):
        with pytest.raises(ValueError):
            next(balanced_batches(np.arange(8), 9, np.random.default_rng(0)))

    def test_no_singleton_tail(self):
        labels = np.repeat(np.arange(3), 3)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            sizes = [len(b) for b in balanced_batches(labels, 4, np.random.default_rng(0))]
        assert sizes == [4, 5]


class TestDatasetIO:
    def test_round_trip(self, small, tmp_path):
        save_dataset(small, tmp_path / "ds")
        back = load_dataset(tmp_path / "ds")
        for a, b in ((small.train, back.train), (small.val, back.val)):
            assert a.images.tobytes() == b.images.tobytes()
            np.testing.assert_array_equal(a.labels, b.labels)
            np.testing.assert_array_equal(a.objects, b.objects)
        np.testing.assert_array_equal(back.mean, small.mean)
        assert back.spec.to_json() == small.spec.to_json()

    def test_index_matches_files(self, small, tmp_path):
        save_dataset(small, tmp_path / "ds")
        index = json.loads((tmp_path / "ds" / "index.json").read_text())
        n = len(index["splits"]["train"]) + len(index["splits"]["val"])
        assert n == len(list((tmp_path / "ds" / "images").glob("*.fost"))) == 200

    def test_corrupt_magic_names_file(self, small, tmp_path):
        save_dataset(small, tmp_path / "ds")
        target = tmp_path / "ds" / "images" / "val_00003.fost"
        buf = bytearray(target.read_bytes())
        buf[:4] = b"XXXX"
        target.write_bytes(bytes(buf))
        with pytest.raises(fost.FostFormatError, match="val_00003.fost"):
            load_dataset(tmp_path / "ds")

    def test_truncated_file(self, small, tmp_path):
        save_dataset(small, tmp_path / "ds")
        target = tmp_path / "ds" / "images" / "train_00000.fost"
        target.write_bytes(target.read_bytes()[:-8])
        with pytest.raises(fost.FostFormatError, match="train_00000.fost"):
            load_dataset(tmp_path / "ds")

    def test_version_mismatch(self, small, tmp_path):
        save_dataset(small, tmp_path / "ds")
        p = tmp_path / "ds" / "index.json"
        index = json.loads(p.read_text())
        index["version"] = 99
        p.write_text(json.dumps(index))
        with pytest.raises(DatasetFormatError, match="version"):
            load_dataset(tmp_path / "ds")

    def test_missing_index(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)
