import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import MNIST_DIR, have_mnist
from robusteval.dataset import (
    LabeledDataset,
    idx_bytes,
    load_cifar,
    load_dataset,
    load_idx,
    stratified_indices,
    subsample,
    synthetic_dataset,
    write_idx,
)
from robusteval.errors import (
    ConfigurationError,
    DatasetConsistencyError,
    DatasetFormatError,
    TruncatedFileError,
    UnknownDatasetError,
)


def _idx_pair(tmp_path, images, labels):
    n, h, w = images.shape
    img = np.array([0x803, n, h, w], dtype=">u4").tobytes() + images.astype(np.uint8).tobytes()
    lab = np.array([0x801, len(labels)], dtype=">u4").tobytes() + np.asarray(labels, dtype=np.uint8).tobytes()
    ip, lp = tmp_path / "img", tmp_path / "lab"
    ip.write_bytes(img)
    lp.write_bytes(lab)
    return ip, lp


def test_idx_normalizes_bytes(tmp_path):
    pixels = np.array([[[0, 255], [255, 0]], [[255, 255], [0, 0]]])
    ds = load_idx(*_idx_pair(tmp_path, pixels, [3, 7]))
    assert ds.images.shape == (2, 2, 2, 1)
    assert set(np.unique(ds.images)) == {0.0, 1.0}
    np.testing.assert_array_equal(ds.images[..., 0], pixels / 255.0)
    np.testing.assert_array_equal(ds.labels, [3, 7])
    assert ds.num_classes == 10


def test_idx_label_file_as_images_is_format_error(tmp_path):
    ip, lp = _idx_pair(tmp_path, np.zeros((2, 2, 2)), [0, 1])
    with pytest.raises(DatasetFormatError):
        load_idx(lp, lp)


def test_idx_count_mismatch(tmp_path):
    ip, lp = _idx_pair(tmp_path, np.zeros((2, 2, 2)), [0, 1, 2])
    with pytest.raises(DatasetConsistencyError):
        load_idx(ip, lp)


def test_idx_truncated_payload(tmp_path):
    ip, lp = _idx_pair(tmp_path, np.zeros((2, 3, 3)), [0, 1])
    ip.write_bytes(ip.read_bytes()[:-4])
    with pytest.raises(TruncatedFileError):
        load_idx(ip, lp)
    ip.write_bytes(b"\x00\x00")
    with pytest.raises(OSError):
        load_idx(ip, lp)


def test_idx_round_trip_is_bit_identical(tmp_path):
    ds = synthetic_dataset(5, 20, shape=(5, 4, 1), num_classes=4)
    quantized = LabeledDataset(np.rint(ds.images * 255) / 255, ds.labels, 10)
    ip, lp = tmp_path / "i", tmp_path / "l"
    write_idx(quantized, ip, lp)
    back = load_idx(ip, lp)
    np.testing.assert_array_equal(back.images, quantized.images)
    np.testing.assert_array_equal(back.labels, quantized.labels)
    assert idx_bytes(back) == (ip.read_bytes(), lp.read_bytes())


def _cifar_record(label_bytes, rng):
    pixels = rng.integers(0, 256, size=3072, dtype=np.uint8)
    return bytes(label_bytes) + pixels.tobytes(), pixels


def test_cifar10_layout(tmp_path):
    rng = np.random.default_rng(0)
    rec0, px0 = _cifar_record([4], rng)
    rec1, px1 = _cifar_record([9], rng)
    path = tmp_path / "batch.bin"
    path.write_bytes(rec0 + rec1)
    ds = load_cifar(path, "cifar10")
    assert ds.images.shape == (2, 32, 32, 3) and ds.num_classes == 10
    np.testing.assert_array_equal(ds.labels, [4, 9])
    # band-major: red plane first, each plane row-major
    r, c = 5, 17
    for band in range(3):
        assert ds.images[1, r, c, band] == px1[band * 1024 + r * 32 + c] / 255.0


def test_cifar100_keeps_fine_label(tmp_path):
    rng = np.random.default_rng(1)
    rec0, _ = _cifar_record([3, 0], rng)
    rec1, _ = _cifar_record([19, 99], rng)
    path = tmp_path / "train.bin"
    path.write_bytes(rec0 + rec1)
    ds = load_cifar(path, "cifar100")
    np.testing.assert_array_equal(ds.labels, [0, 99])
    assert ds.num_classes == 100


def test_cifar_bad_length_and_label(tmp_path):
    path = tmp_path / "b.bin"
    path.write_bytes(bytes(3072))
    with pytest.raises(DatasetFormatError):
        load_cifar(path, "cifar10")
    path.write_bytes(bytes([10]) + bytes(3072))
    with pytest.raises(DatasetConsistencyError):
        load_cifar(path, "cifar10")


def test_labeled_dataset_invariants():
    with pytest.raises(DatasetConsistencyError):
        LabeledDataset(np.zeros((2, 2, 2, 1)), [0], 2)
    with pytest.raises(DatasetConsistencyError):
        LabeledDataset(np.zeros((1, 2, 2, 1)), [2], 2)
    with pytest.raises(ValueError):
        LabeledDataset(np.full((1, 2, 2, 1), 1.5), [0], 2)
    ds = LabeledDataset(np.zeros((1, 2, 2, 1)), [1], 2)
    with pytest.raises(ValueError):
        ds.images[0, 0, 0, 0] = 0.5


def test_synthetic_determinism_and_errors():
    a = synthetic_dataset(7, 30, shape=(4, 4, 1), num_classes=3)
    b = synthetic_dataset(7, 30, shape=(4, 4, 1), num_classes=3)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.images.min() >= 0 and a.images.max() <= 1
    np.testing.assert_array_equal(np.bincount(a.labels), [10, 10, 10])
    with pytest.raises(ValueError):
        synthetic_dataset(0, 1, num_classes=2)


def test_subsample_full_size_is_permutation():
    ds = synthetic_dataset(1, 24, shape=(3, 3, 1), num_classes=4)
    sub = subsample(ds, len(ds), seed=2)
    key = lambda d: sorted((int(l), img.tobytes()) for l, img in zip(d.labels, d.images))
    assert key(sub) == key(ds)


def test_subsample_one_per_class():
    ds = synthetic_dataset(1, 40, shape=(3, 3, 1), num_classes=4)
    sub = subsample(ds, 4, seed=9)
    assert sorted(sub.labels) == [0, 1, 2, 3]


def test_subsample_too_many():
    ds = synthetic_dataset(1, 10, shape=(3, 3, 1), num_classes=2)
    with pytest.raises(ValueError):
        subsample(ds, 11, seed=0)


@settings(max_examples=60, deadline=None)
@given(
    counts=st.lists(st.integers(0, 30), min_size=2, max_size=6),
    frac=st.floats(0, 1),
    seed=st.integers(0, 2**32 - 1),
)
def test_stratified_indices_balanced(counts, frac, seed):
    labels = np.repeat(np.arange(len(counts)), counts)
    n = int(round(frac * len(labels)))
    idx = stratified_indices(labels, len(counts), n, seed)
    assert len(idx) == n == len(np.unique(idx))
    got = np.bincount(labels[idx], minlength=len(counts))
    assert np.all(got <= counts)
    # water-filling: a class below its availability is never more than one short of any other class
    short = got < np.asarray(counts)
    if short.any():
        assert got.max() - got[short].min() <= 1
    np.testing.assert_array_equal(idx, stratified_indices(labels, len(counts), n, seed))


def test_unknown_dataset_is_configuration_error(tmp_path):
    for name in ("no-such-dataset", None, ""):
        with pytest.raises(UnknownDatasetError) as info:
            load_dataset(name, tmp_path)
        assert isinstance(info.value, ConfigurationError)
        assert info.value.field == "dataset"


@pytest.mark.skipif(not have_mnist(), reason="MNIST desk files not present")
def test_mnist_desk_files():
    test = load_dataset("mnist", MNIST_DIR, "test")
    assert test.images.shape == (1000, 28, 28, 1)
    assert test.labels.min() >= 0 and test.labels.max() <= 9
    assert 0.0 <= test.images.min() and test.images.max() <= 1.0
    np.testing.assert_array_equal(np.bincount(test.labels), [100] * 10)
    train = load_dataset("mnist", MNIST_DIR, "train")
    sub = subsample(train, 1000, seed=1)
    assert np.abs(np.bincount(sub.labels, minlength=10) - 100).max() <= 5
