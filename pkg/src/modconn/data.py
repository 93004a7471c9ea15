"""Datasets: CIFAR binary files, augmentation and synthetic tasks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import CifarFormatError, ConfigError

logger = logging.getLogger(__name__)

IMAGE_SHAPE = (3, 32, 32)
PIXELS = 3 * 32 * 32
RECORD_BYTES = {"cifar10": 1 + PIXELS, "cifar100": 2 + PIXELS}
NUM_CLASSES = {"cifar10": 10, "cifar100": 100}
SPLIT_FILES = {
    "cifar10": {"train": [f"data_batch_{i}.bin" for i in range(1, 6)], "test": ["test_batch.bin"]},
    "cifar100": {"train": ["train.bin"], "test": ["test.bin"]},
}
PAD = 4


@dataclass
class Dataset:
    """Images (N, C, H, W) as float32 with the train-split mean removed, plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str
    mean: np.ndarray | None
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ConfigError(f"dataset needs (N, C, H, W) images and N labels, got {self.images.shape} and {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int | None) -> "Dataset":
        """First ``n`` examples (the whole dataset when ``n`` is None)."""
        if n is None or n >= len(self):
            return self
        return replace(self, images=self.images[:n], labels=self.labels[:n])


# ---------------------------------------------------------------------------
# CIFAR binary format
# ---------------------------------------------------------------------------


def read_cifar_records(path, variant: str = "cifar10", fine: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Raw uint8 images (N, 3, 32, 32) and labels from one binary file.

    CIFAR-100 records carry a coarse and a fine label; ``fine`` picks which.
    """
    if variant not in RECORD_BYTES:
        raise ConfigError(f"unknown CIFAR variant {variant!r}")
    raw = np.fromfile(Path(path), dtype=np.uint8)
    rec = RECORD_BYTES[variant]
    if raw.size % rec:
        offset = raw.size - raw.size % rec
        raise CifarFormatError(f"{path}: {raw.size} bytes is not a multiple of the {rec}-byte record size; truncated record at byte offset {offset}")
    records = raw.reshape(-1, rec)
    label_col = 0 if variant == "cifar10" else (1 if fine else 0)
    n_labels = rec - PIXELS
    labels = records[:, label_col].astype(np.int64)
    images = records[:, n_labels:].reshape(-1, *IMAGE_SHAPE)
    if labels.size and labels.max() >= (NUM_CLASSES[variant] if fine or variant == "cifar10" else 20):
        raise CifarFormatError(f"{path}: label {labels.max()} out of range for {variant}")
    return images, labels


def write_cifar(path, images: np.ndarray, labels, variant: str = "cifar10", coarse_labels=None) -> Path:
    """Write uint8 images (N, 3, 32, 32) in the CIFAR binary record format."""
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.shape[1:] != IMAGE_SHAPE:
        raise ConfigError(f"expected uint8 images of shape (N, 3, 32, 32), got {images.dtype} {images.shape}")
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    cols = [labels]
    if variant == "cifar100":
        coarse = labels if coarse_labels is None else np.asarray(coarse_labels, dtype=np.uint8).reshape(-1, 1)
        cols = [coarse, labels]
    elif variant != "cifar10":
        raise ConfigError(f"unknown CIFAR variant {variant!r}")
    records = np.concatenate(cols + [images.reshape(len(images), -1)], axis=1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records.tofile(path)
    return path


def _split_files(path: Path, variant: str, split: str) -> list[Path]:
    if path.is_file():
        return [path]
    candidates = [path, path / "cifar-10-batches-bin", path / "cifar-100-binary"]
    for root in candidates:
        files = [root / f for f in SPLIT_FILES[variant][split]]
        if all(f.is_file() for f in files):
            return files
    raise FileNotFoundError(f"no CIFAR {variant} {split} files under {path}")


def load_cifar(path, variant: str = "cifar10", split: str = "train", mean: np.ndarray | None = None, subset_size: int | None = None) -> Dataset:
    """Load one split; ``path`` is a single binary file or a directory holding the standard files.

    Pixels are scaled to [0, 1] and the per-pixel ``mean`` is subtracted; if
    no mean is given it is computed from the loaded images (use this only for
    a train split).
    """
    files = _split_files(Path(path), variant, split)
    parts = [read_cifar_records(f, variant) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    if subset_size is not None:
        images, labels = images[:subset_size], labels[:subset_size]
    x = images.astype(np.float32) / 255.0
    if mean is None:
        mean = x.mean(axis=0)
    return Dataset(x - mean, labels, split, mean, NUM_CLASSES[variant])


def load_cifar_splits(path, variant: str = "cifar10", subset_size: int | None = None) -> tuple[Dataset, Dataset]:
    """Train subset (first ``subset_size`` records) and full test split, both normalised by the train-subset mean."""
    train = load_cifar(path, variant, "train", subset_size=subset_size)
    test = load_cifar(path, variant, "test", mean=train.mean)
    return train, test


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def crop_flip(image: np.ndarray, offset: tuple[int, int], flip: bool, pad: int = PAD) -> np.ndarray:
    """Zero-pad by ``pad``, take the crop at ``offset`` (row, col) of the original size, optionally mirror it."""
    c, h, w = image.shape
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    r, q = offset
    if not (0 <= r <= 2 * pad and 0 <= q <= 2 * pad):
        raise ValueError(f"crop offset {offset} outside [0, {2 * pad}]")
    out = padded[:, r : r + h, q : q + w]
    return np.ascontiguousarray(out[:, :, ::-1] if flip else out)


def augment(images: np.ndarray, rng: np.random.Generator, pad: int = PAD) -> np.ndarray:
    """Random padded crop and horizontal flip for each image of a batch (or a single image)."""
    single = images.ndim == 3
    batch = images[None] if single else images
    n = len(batch)
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    out = np.empty_like(batch)
    for i in range(n):
        out[i] = crop_flip(batch[i], tuple(offsets[i]), bool(flips[i]), pad)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------


def make_blobs(
    n: int = 512,
    num_classes: int = 4,
    image_size: int = 8,
    channels: int = 3,
    noise: float = 0.5,
    seed: int = 0,
    split: str = "train",
) -> Dataset:
    """Linearly separable task: each class is a fixed random template plus Gaussian noise."""
    rng = np.random.default_rng(seed)
    templates = rng.standard_normal((num_classes, channels, image_size, image_size))
    data_rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    labels = data_rng.integers(0, num_classes, size=n)
    images = templates[labels] + noise * data_rng.standard_normal((n, channels, image_size, image_size))
    return Dataset(images.astype(np.float32), labels, split, None, num_classes)


def make_synthetic(kind: str = "blobs", **kw):
    """Dispatch to :func:`make_blobs` or :func:`modconn.experiments.make_planted_task`."""
    if kind == "blobs":
        return make_blobs(**kw)
    if kind == "planted":
        from .experiments import make_planted_task

        return make_planted_task(**kw)
    raise ConfigError(f"unknown synthetic dataset kind {kind!r}")
