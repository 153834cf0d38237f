import io
import zipfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsanet.data import (ArchiveError, BatchPlan, SyntheticDesign, batch_indices, batches, load_medmnist,
                         read_npy, synthetic_dataset, to_uint8_archive, write_archive, write_npy)


def medmnist_arrays(rng, n=(2, 1, 1), channels=None, classes=7):
    shape = (28, 28) if channels is None else (28, 28, channels)
    out = {}
    for split, count in zip(("train", "val", "test"), n):
        out[f"{split}_images"] = rng.integers(0, 256, (count, *shape), dtype=np.uint8)
        out[f"{split}_labels"] = rng.integers(0, classes, (count, 1)).astype(np.uint8)
    return out


class TestNpy:
    @pytest.mark.parametrize("dtype", [np.uint8, np.int64, np.float64, np.float32])
    def test_round_trip(self, dtype):
        arr = (np.arange(24).reshape(2, 3, 4) % 200).astype(dtype)
        back = read_npy(write_npy(arr))
        assert back.dtype == dtype and back.tobytes() == arr.tobytes()

    def test_numpy_reads_our_files(self):
        arr = np.arange(10, dtype=np.uint8).reshape(2, 5)
        assert np.array_equal(np.load(io.BytesIO(write_npy(arr))), arr)

    def test_we_read_numpy_files(self):
        buf = io.BytesIO()
        arr = np.random.default_rng(0).standard_normal((3, 4))
        np.save(buf, arr)
        assert read_npy(buf.getvalue()).tobytes() == arr.tobytes()

    def test_header_alignment(self):
        raw = write_npy(np.zeros(3))
        hlen = int.from_bytes(raw[8:10], "little")
        assert (10 + hlen) % 64 == 0

    def test_fortran_order_rejected(self):
        buf = io.BytesIO()
        np.save(buf, np.asfortranarray(np.zeros((2, 3))))
        with pytest.raises(ArchiveError, match="Fortran"):
            read_npy(buf.getvalue(), "x")

    def test_truncated_payload_names_member(self):
        with pytest.raises(ArchiveError, match="train_images"):
            read_npy(write_npy(np.zeros(4))[:-3], "train_images")

    def test_bad_magic(self):
        with pytest.raises(ArchiveError, match="magic"):
            read_npy(b"not an array")


class TestArchive:
    def test_hand_built_archive(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = medmnist_arrays(rng, channels=3)
        arrays["train_labels"] = np.array([[0], [6]], dtype=np.uint8)
        write_archive(tmp_path / "a.npz", arrays)
        splits = load_medmnist(tmp_path / "a.npz")
        train = splits["train"]
        assert train.images.shape == (2, 3, 28, 28)
        assert train.labels.tolist() == [0, 6] and train.num_classes == 7
        expected = arrays["train_images"].transpose(0, 3, 1, 2) / 255.0
        np.testing.assert_array_equal(train.images, expected)

    def test_grayscale_gets_channel_axis(self, tmp_path):
        write_archive(tmp_path / "g.npz", medmnist_arrays(np.random.default_rng(1)))
        assert load_medmnist(tmp_path / "g.npz")["val"].images.shape == (1, 1, 28, 28)

    def test_numpy_savez_archive_is_readable(self, tmp_path):
        arrays = medmnist_arrays(np.random.default_rng(2), channels=3)
        np.savez(tmp_path / "n.npz", **arrays)
        splits = load_medmnist(tmp_path / "n.npz")
        assert np.array_equal(np.rint(splits["test"].images * 255).astype(np.uint8).transpose(0, 2, 3, 1),
                              arrays["test_images"])

    def test_numpy_reads_our_archive(self, tmp_path):
        arrays = medmnist_arrays(np.random.default_rng(3))
        write_archive(tmp_path / "o.npz", arrays)
        with np.load(tmp_path / "o.npz") as z:
            for k, v in arrays.items():
                assert np.array_equal(z[k], v)

    @pytest.mark.parametrize("channels", [None, 3])
    def test_uint8_round_trip_is_lossless(self, tmp_path, channels):
        arrays = medmnist_arrays(np.random.default_rng(4), n=(5, 3, 4), channels=channels)
        write_archive(tmp_path / "a.npz", arrays)
        first = load_medmnist(tmp_path / "a.npz")
        to_uint8_archive(tmp_path / "b.npz", first)
        with np.load(tmp_path / "b.npz") as z:
            for k, v in arrays.items():
                assert z[k].tobytes() == v.tobytes(), k

    def test_missing_member(self, tmp_path):
        arrays = medmnist_arrays(np.random.default_rng(5))
        del arrays["val_labels"]
        write_archive(tmp_path / "m.npz", arrays)
        with pytest.raises(ArchiveError, match="val_labels"):
            load_medmnist(tmp_path / "m.npz")

    def test_non_uint8_images_rejected(self, tmp_path):
        arrays = medmnist_arrays(np.random.default_rng(6))
        arrays["test_images"] = arrays["test_images"].astype(np.float32)
        write_archive(tmp_path / "f.npz", arrays)
        with pytest.raises(ArchiveError, match="uint8"):
            load_medmnist(tmp_path / "f.npz")

    def test_not_a_zip(self, tmp_path):
        (tmp_path / "x.npz").write_bytes(b"garbage")
        with pytest.raises(zipfile.BadZipFile):
            load_medmnist(tmp_path / "x.npz")


class TestSynthetic:
    def test_deterministic(self):
        a, b = synthetic_dataset(seed=3), synthetic_dataset(seed=3)
        assert a["train"].images.tobytes() == b["train"].images.tobytes()
        assert not np.array_equal(a["train"].images, synthetic_dataset(seed=4)["train"].images)

    def test_balanced_and_in_range(self):
        ds = synthetic_dataset(num_classes=4, n_per_class=10, n_test_per_class=3)
        assert ds["train"].class_counts == [10] * 4 and ds["test"].class_counts == [3] * 4
        assert ds["train"].images.min() >= 0.0 and ds["train"].images.max() <= 1.0

    def test_class_means_are_separated(self):
        ds = synthetic_dataset(n_per_class=64, design=SyntheticDesign(swap=0.0))["train"]
        means = [ds.images[ds.labels == c].mean(axis=0) for c in range(4)]
        within = np.mean([np.linalg.norm(x - means[y]) for x, y in zip(ds.images, ds.labels)])
        between = min(np.linalg.norm(means[i] - means[j]) for i in range(4) for j in range(i + 1, 4))
        assert between > 0.25 * within

    def test_template_preset_is_separable_without_noise(self):
        ds = synthetic_dataset(n_per_class=5, noise_sigma=0.0, design=SyntheticDesign.templates())
        train, test = ds["train"], ds["test"]
        templates = np.stack([train.images[train.labels == c][0] for c in range(4)])
        for c in range(4):
            assert np.all(train.images[train.labels == c] == templates[c])
        # nearest template == a linear rule on the flattened pixels
        flat = templates.reshape(4, -1)
        scores = test.images.reshape(len(test), -1) @ flat.T - 0.5 * (flat ** 2).sum(axis=1)
        assert np.array_equal(scores.argmax(axis=1), test.labels)

    def test_square_lands_in_class_quadrant_without_swap(self):
        design = SyntheticDesign(texture=0.0, jitter=0, swap=0.0)
        ds = synthetic_dataset(n_per_class=4, noise_sigma=0.0, design=design)["train"]
        for img, y in zip(ds.images, ds.labels):
            cy, cx = [(7, 7), (7, 20), (20, 7), (20, 20)][y]
            assert img[0, cy, cx] == pytest.approx(0.6) and img[0, 0, 0] == pytest.approx(0.2)

    def test_rejects_single_class(self):
        with pytest.raises(ValueError):
            synthetic_dataset(num_classes=1)

    def test_rejects_oversized_jitter(self):
        with pytest.raises(ValueError, match="fit"):
            synthetic_dataset(design=SyntheticDesign(jitter=6))


class TestBatches:
    def test_partial_batch_kept(self):
        assert [len(b) for b in batch_indices(10, BatchPlan(batch_size=4))] == [4, 4, 2]

    def test_drop_last(self):
        assert [len(b) for b in batch_indices(10, BatchPlan(batch_size=4, drop_last=True))] == [4, 4]

    def test_zero_batch_size(self):
        with pytest.raises(ValueError):
            batch_indices(10, BatchPlan(batch_size=0))

    def test_epochs_reshuffle_deterministically(self):
        plan = BatchPlan(batch_size=3, seed=7)
        e0, e0b, e1 = (np.concatenate(batch_indices(12, plan, e)) for e in (0, 0, 1))
        assert np.array_equal(e0, e0b) and not np.array_equal(e0, e1)

    def test_batches_yield_matching_rows(self):
        ds = synthetic_dataset(n_per_class=3)["train"]
        for images, labels in batches(ds, BatchPlan(batch_size=5)):
            assert images.shape[0] == labels.shape[0]

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 200), st.integers(1, 64), st.integers(0, 1000), st.integers(0, 5))
    def test_each_epoch_is_a_permutation(self, n, size, seed, epoch):
        idx = np.concatenate(batch_indices(n, BatchPlan(batch_size=size, seed=seed), epoch))
        assert sorted(idx.tolist()) == list(range(n))
