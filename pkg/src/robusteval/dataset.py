"""Image dataset loading, normalization and subsampling.

Images are held as float64 arrays of shape ``(height, width, bands)`` with
values in ``[0, 1]``; a dataset stacks them into ``(n, height, width, bands)``.
Raw bytes are mapped to intensities by ``x / 255``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import (
    DatasetConsistencyError,
    DatasetFormatError,
    TruncatedFileError,
    UnknownDatasetError,
)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

CIFAR_PIXELS = 32 * 32 * 3
CIFAR_RECORD = {"cifar10": 1 + CIFAR_PIXELS, "cifar100": 2 + CIFAR_PIXELS}
CIFAR_CLASSES = {"cifar10": 10, "cifar100": 100}

IDX_DATASETS = ("mnist", "fashion_mnist")
CIFAR_DATASETS = ("cifar10", "cifar100")
KNOWN_DATASETS = IDX_DATASETS + CIFAR_DATASETS + ("synthetic",)


def as_image(x):
    """Return ``x`` as a float64 ``(h, w, b)`` array, checking the pixel box."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3 or min(x.shape) < 1:
        raise ValueError(f"expected an (h, w, b) image, got shape {x.shape}")
    if not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("image pixels must be finite and lie in [0, 1]")
    return x


@dataclass(frozen=True)
class LabeledDataset:
    """Uniformly shaped images with integer class labels.

    Attributes
    ----------
    images : ndarray
        ``(n, h, w, b)`` float64 intensities in ``[0, 1]``.
    labels : ndarray
        ``(n,)`` int64 class indices in ``[0, num_classes)``.
    num_classes : int
    name : str
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "unnamed"

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if images.ndim != 4 or min(images.shape[1:]) < 1:
            raise ValueError(f"images must be (n, h, w, b), got {images.shape}")
        if len(images) != len(labels) or labels.ndim != 1:
            raise DatasetConsistencyError(
                f"{len(images)} images but {len(labels)} labels"
            )
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DatasetConsistencyError(
                f"labels must lie in [0, {self.num_classes})"
            )
        if images.size and (
            not np.all(np.isfinite(images)) or images.min() < 0 or images.max() > 1
        ):
            raise ValueError("pixels must be finite and in [0, 1]")
        images.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        """Per-image ``(h, w, b)`` shape."""
        return tuple(self.images.shape[1:])

    def take(self, index, name=None):
        index = np.asarray(index, dtype=np.int64)
        return LabeledDataset(
            self.images[index], self.labels[index], self.num_classes, name or self.name
        )


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


def _idx_header(raw, path, magic):
    if len(raw) < 8:
        raise TruncatedFileError(f"{path}: file too short for an IDX header")
    found = int.from_bytes(raw[:4], "big")
    if found != magic:
        raise DatasetFormatError(
            f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}"
        )
    ndim = raw[3]
    if len(raw) < 4 + 4 * ndim:
        raise TruncatedFileError(f"{path}: truncated IDX dimension header")
    dims = np.frombuffer(raw, dtype=">u4", count=ndim, offset=4).astype(np.int64)
    offset = 4 + 4 * ndim
    size = int(np.prod(dims))
    if len(raw) < offset + size:
        raise TruncatedFileError(
            f"{path}: payload has {len(raw) - offset} bytes, header promises {size}"
        )
    payload = np.frombuffer(raw, dtype=np.uint8, count=size, offset=offset)
    return dims, payload


def load_idx(image_path, label_path, num_classes=10, name="mnist"):
    """Load an IDX image/label file pair (MNIST and Fashion-MNIST layout).

    Raises
    ------
    DatasetFormatError
        Wrong magic number in either file.
    DatasetConsistencyError
        Image and label counts differ, or a label is out of range.
    TruncatedFileError
        A file is shorter than its header says.
    """
    dims, pixels = _idx_header(_read(image_path), image_path, IDX_IMAGE_MAGIC)
    ldims, labels = _idx_header(_read(label_path), label_path, IDX_LABEL_MAGIC)
    if len(dims) != 3:
        raise DatasetFormatError(f"{image_path}: expected 3 dimensions, got {len(dims)}")
    if ldims[0] != dims[0]:
        raise DatasetConsistencyError(
            f"{dims[0]} images in {image_path} but {ldims[0]} labels in {label_path}"
        )
    n, rows, cols = (int(d) for d in dims)
    images = pixels.reshape(n, rows, cols, 1) / 255.0
    return LabeledDataset(images, labels.astype(np.int64), num_classes, name)


def idx_bytes(ds):
    """Serialize a single-band dataset to ``(image_bytes, label_bytes)`` in IDX layout."""
    n, h, w, b = ds.images.shape
    if b != 1:
        raise ValueError("IDX images must be single-band")
    if ds.num_classes > 256:
        raise ValueError("IDX labels are single bytes")
    pixels = np.rint(ds.images[..., 0] * 255.0).astype(np.uint8)
    head = np.array([IDX_IMAGE_MAGIC, n, h, w], dtype=">u4").tobytes()
    lhead = np.array([IDX_LABEL_MAGIC, n], dtype=">u4").tobytes()
    return head + pixels.tobytes(), lhead + ds.labels.astype(np.uint8).tobytes()


def write_idx(ds, image_path, label_path):
    image_bytes, label_bytes = idx_bytes(ds)
    with open(image_path, "wb") as fh:
        fh.write(image_bytes)
    with open(label_path, "wb") as fh:
        fh.write(label_bytes)


def load_cifar(path, variant="cifar10"):
    """Load one CIFAR-10 or CIFAR-100 binary batch file.

    CIFAR-10 records are ``<label><3072 pixels>``; CIFAR-100 records are
    ``<coarse><fine><3072 pixels>`` and only the fine label is kept. Pixels
    are stored band-major (1024 red, 1024 green, 1024 blue), each band
    row-major.
    """
    if variant not in CIFAR_RECORD:
        raise UnknownDatasetError(variant)
    raw = _read(path)
    record = CIFAR_RECORD[variant]
    if len(raw) == 0 or len(raw) % record:
        raise DatasetFormatError(
            f"{path}: length {len(raw)} is not a multiple of the {record}-byte record"
        )
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    labels = rows[:, record - CIFAR_PIXELS - 1].astype(np.int64)
    num_classes = CIFAR_CLASSES[variant]
    if labels.max() >= num_classes:
        raise DatasetConsistencyError(
            f"{path}: label {labels.max()} out of range for {variant}"
        )
    pixels = rows[:, record - CIFAR_PIXELS:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return LabeledDataset(pixels / 255.0, labels, num_classes, variant)


def synthetic_dataset(seed, n, shape=(8, 8, 1), num_classes=2, noise=0.05):
    """Deterministic, linearly separable blobs for tests and smoke runs.

    Each class has a random template with pixels in ``[0.2, 0.8]``; an
    image is its class template plus uniform per-pixel noise of amplitude
    ``noise``, clamped to ``[0, 1]``.
    """
    if num_classes < 1 or n < num_classes:
        raise ValueError(f"need n >= num_classes, got n={n}, num_classes={num_classes}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    templates = rng.uniform(0.2, 0.8, size=(num_classes,) + tuple(shape))
    jitter = rng.uniform(-noise, noise, size=(n,) + tuple(shape))
    images = np.clip(templates[labels] + jitter, 0.0, 1.0)
    return LabeledDataset(images, labels, num_classes, "synthetic")


def _balanced_quota(counts, n, rng):
    # water-fill: equal shares while they fit, then one extra each for a random subset
    quota = np.zeros_like(counts)
    remaining = n
    while remaining > 0:
        active = np.flatnonzero(quota < counts)
        share = remaining // len(active)
        if share == 0:
            quota[rng.choice(active, size=remaining, replace=False)] += 1
            break
        grant = np.minimum(counts[active] - quota[active], share)
        quota[active] += grant
        remaining -= int(grant.sum())
    return quota


def stratified_indices(labels, num_classes, n, seed):
    """Indices of ``n`` items balanced across labels where class sizes allow it."""
    labels = np.asarray(labels)
    if n > len(labels) or n < 0:
        raise ValueError(f"cannot draw {n} items from a dataset of {len(labels)}")
    rng = np.random.default_rng(seed)
    counts = np.bincount(labels, minlength=num_classes)
    quota = _balanced_quota(counts, n, rng)
    picked = [
        rng.choice(np.flatnonzero(labels == c), size=quota[c], replace=False)
        for c in range(num_classes)
        if quota[c]
    ]
    if not picked:
        return np.array([], dtype=np.int64)
    return rng.permutation(np.concatenate(picked))


def subsample(ds, n, seed):
    """Draw ``n`` items, balanced across labels where the class sizes allow it."""
    return ds.take(stratified_indices(ds.labels, ds.num_classes, n, seed))


def load_dataset(name, data_dir, split="train"):
    """Load a named dataset from a directory of pre-extracted files.

    Expected layout: ``{train,t10k}-{images-idx3,labels-idx1}-ubyte`` for
    the IDX datasets, ``data_batch_{1..5}.bin`` / ``test_batch.bin`` for
    CIFAR-10 and ``train.bin`` / ``test.bin`` for CIFAR-100.
    """
    if name not in IDX_DATASETS + CIFAR_DATASETS:
        raise UnknownDatasetError(name)
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    if name in IDX_DATASETS:
        prefix = "train" if split == "train" else "t10k"
        return load_idx(
            os.path.join(data_dir, f"{prefix}-images-idx3-ubyte"),
            os.path.join(data_dir, f"{prefix}-labels-idx1-ubyte"),
            name=name,
        )
    if name == "cifar10":
        files = (
            [f"data_batch_{i}.bin" for i in range(1, 6)]
            if split == "train"
            else ["test_batch.bin"]
        )
    else:
        files = ["train.bin" if split == "train" else "test.bin"]
    parts = [load_cifar(os.path.join(data_dir, f), name) for f in files]
    return LabeledDataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        parts[0].num_classes,
        name,
    )
