import numpy as np
import pytest
from hypothesis import given, strategies as st

from modconn.data import (
    Dataset,
    augment,
    crop_flip,
    load_cifar,
    load_cifar_splits,
    make_blobs,
    read_cifar_records,
    write_cifar,
)
from modconn.errors import CifarFormatError, ConfigError


def fake_images(n, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(n, 3, 32, 32), dtype=np.uint8)


def test_round_trip_is_bit_exact(tmp_path):
    imgs, labels = fake_images(7), np.arange(7) % 10
    write_cifar(tmp_path / "b.bin", imgs, labels)
    got, got_labels = read_cifar_records(tmp_path / "b.bin")
    assert np.array_equal(got, imgs) and np.array_equal(got_labels, labels)


def test_record_layout(tmp_path):
    imgs = fake_images(2)
    write_cifar(tmp_path / "b.bin", imgs, [6, 1])
    raw = np.fromfile(tmp_path / "b.bin", dtype=np.uint8)
    assert raw.size == 2 * 3073
    assert raw[0] == 6 and raw[3073] == 1
    # channel-major: red plane first, row-major within the plane
    assert raw[1] == imgs[0, 0, 0, 0] and raw[2] == imgs[0, 0, 0, 1] and raw[1 + 1024] == imgs[0, 1, 0, 0]
    _, labels = read_cifar_records(tmp_path / "b.bin")
    assert labels[0] == 6


def test_cifar100_records(tmp_path):
    imgs = fake_images(3)
    write_cifar(tmp_path / "t.bin", imgs, [99, 5, 0], variant="cifar100", coarse_labels=[19, 2, 0])
    assert (tmp_path / "t.bin").stat().st_size == 3 * 3074
    _, fine = read_cifar_records(tmp_path / "t.bin", "cifar100")
    _, coarse = read_cifar_records(tmp_path / "t.bin", "cifar100", fine=False)
    assert fine.tolist() == [99, 5, 0] and coarse.tolist() == [19, 2, 0]


def test_truncated_file_reports_offset(tmp_path):
    write_cifar(tmp_path / "b.bin", fake_images(2), [1, 2])
    with open(tmp_path / "b.bin", "ab") as fh:
        fh.write(b"\x00" * 100)
    with pytest.raises(CifarFormatError, match="byte offset 6146"):
        read_cifar_records(tmp_path / "b.bin")


def _fake_cifar10_dir(root, n_per_batch=4):
    for i in range(1, 6):
        write_cifar(root / f"data_batch_{i}.bin", fake_images(n_per_batch, seed=i), np.arange(n_per_batch) % 10)
    write_cifar(root / "test_batch.bin", fake_images(5, seed=9), np.arange(5))
    return root


def test_load_directory_in_file_order(tmp_path):
    root = _fake_cifar10_dir(tmp_path)
    train = load_cifar(root, "cifar10", "train")
    assert len(train) == 20 and train.images.dtype == np.float32
    expected = fake_images(4, seed=1).astype(np.float32) / 255
    np.testing.assert_allclose(train.images[:4] + train.mean, expected, atol=1e-6)


def test_mean_comes_from_the_train_subset_only(tmp_path):
    root = _fake_cifar10_dir(tmp_path)
    train, test = load_cifar_splits(root, "cifar10", subset_size=6)
    assert len(train) == 6 and len(test) == 5
    raw_train = np.concatenate([fake_images(4, seed=1), fake_images(4, seed=2)])[:6].astype(np.float32) / 255
    np.testing.assert_allclose(train.mean, raw_train.mean(axis=0), atol=1e-6)
    np.testing.assert_allclose(test.images + train.mean, fake_images(5, seed=9).astype(np.float32) / 255, atol=1e-6)


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cifar(tmp_path, "cifar10", "train")


def test_crop_identities(rng):
    img = rng.standard_normal((3, 32, 32)).astype(np.float32)
    assert np.array_equal(crop_flip(img, (4, 4), False), img)
    assert np.array_equal(crop_flip(crop_flip(img, (4, 4), True), (4, 4), True), img)
    corner = crop_flip(img, (0, 0), False)
    assert np.all(corner[:, :4, :] == 0) and np.all(corner[:, :, :4] == 0)
    assert np.array_equal(corner[:, 4:, 4:], img[:, :28, :28])


def test_far_corner_crop_pads_rows_and_cols_28_to_31(rng):
    img = rng.standard_normal((3, 32, 32)).astype(np.float32) + 10
    out = crop_flip(img, (8, 8), False)
    assert np.all(out[:, 28:, :] == 0) and np.all(out[:, :, 28:] == 0)


@given(st.integers(0, 2**32 - 1))
def test_augmented_values_come_from_the_padded_image(seed):
    rng = np.random.default_rng(seed)
    img = rng.integers(1, 50, size=(3, 32, 32)).astype(np.float32)
    out = augment(img, rng)
    assert out.shape == img.shape
    padded_values = set(np.unique(img).tolist()) | {0.0}
    assert set(np.unique(out).tolist()) <= padded_values
    # geometry only: each channel keeps a sub-multiset of its own values
    for c in range(3):
        vals, counts = np.unique(out[c][out[c] != 0], return_counts=True)
        ref = dict(zip(*np.unique(img[c], return_counts=True)))
        assert all(counts[i] <= ref[v] for i, v in enumerate(vals))


def test_augment_batch_is_seeded(rng):
    batch = rng.standard_normal((5, 3, 32, 32)).astype(np.float32)
    a = augment(batch, np.random.default_rng(3))
    b = augment(batch, np.random.default_rng(3))
    assert a.shape == batch.shape and np.array_equal(a, b)


def test_blobs_are_separable_and_seeded():
    d = make_blobs(200, num_classes=4, noise=0.1, seed=0)
    assert d.images.shape == (200, 3, 8, 8) and set(d.labels.tolist()) <= {0, 1, 2, 3}
    # nearest-template classification is essentially perfect
    centers = np.stack([d.images[d.labels == k].mean(axis=0) for k in range(4)])
    pred = np.argmin(((d.images[:, None] - centers[None]) ** 2).sum(axis=(2, 3, 4)), axis=1)
    assert np.mean(pred == d.labels) == 1.0
    assert np.array_equal(make_blobs(10, seed=0).images, make_blobs(10, seed=0).images)


def test_dataset_validation():
    with pytest.raises(ConfigError):
        Dataset(np.zeros((2, 3, 4, 4)), [0, 5], "train", None, 3)
