"""Datasets normalized to [-1, 1]: CIFAR-10 binary batches and synthetic blobs."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

RECORD_BYTES = 3073
RECORDS_PER_FILE = 10_000
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # N×C×H×W, values in [-1, 1]
    labels: np.ndarray  # N ints in [0, num_classes)
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.images.size and (self.images.min() < -1 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [-1, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.images.shape[1:]

    def batches(self, size, rng=None):
        """Yield ``(x, y)`` mini-batches, shuffled when ``rng`` is given."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for lo in range(0, len(self), size):
            idx = order[lo:lo + size]
            yield self.images[idx], self.labels[idx]


def normalize(raw):
    return np.asarray(raw, dtype=np.float64) / 127.5 - 1.0


def denormalize(x):
    return np.clip(np.rint((np.asarray(x) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def _read_batch(path):
    if not path.is_file():
        raise FormatError(f"{path}: missing CIFAR-10 batch file")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % RECORD_BYTES:
        raise FormatError(f"{path}: size {raw.size} is not a multiple of {RECORD_BYTES}-byte records")
    if raw.size // RECORD_BYTES != RECORDS_PER_FILE:
        raise FormatError(f"{path}: expected {RECORDS_PER_FILE} records, found {raw.size // RECORD_BYTES}")
    rec = raw.reshape(-1, RECORD_BYTES)
    return rec[:, 1:].reshape(-1, 3, 32, 32), rec[:, 0].astype(np.int64)


def load_cifar10(directory):
    """Read the five train batches and the test batch from ``directory``."""
    d = Path(directory)
    parts = [_read_batch(d / name) for name in TRAIN_FILES]
    xs, ys = zip(*parts)
    xt, yt = _read_batch(d / TEST_FILE)
    for y, name in zip(ys + (yt,), TRAIN_FILES + (TEST_FILE,)):
        if y.max() > 9:
            raise FormatError(f"{d / name}: label byte {y.max()} out of range")
    train = Dataset(normalize(np.concatenate(xs)), np.concatenate(ys), 10, "train")
    test = Dataset(normalize(xt), yt, 10, "test")
    return train, test


def subset(ds, classes, per_class, seed=0):
    """Class-balanced sample of ``classes`` relabeled to ``0..len(classes)-1``."""
    rng = np.random.default_rng(seed)
    picks, labels = [], []
    for new, c in enumerate(classes):
        if not 0 <= c < ds.num_classes:
            raise ValueError(f"class {c} does not exist")
        idx = np.flatnonzero(ds.labels == c)
        if per_class > idx.size:
            raise ValueError(f"class {c}: requested {per_class}, only {idx.size} available")
        picks.append(rng.choice(idx, size=per_class, replace=False))
        labels.append(np.full(per_class, new))
    order = rng.permutation(per_class * len(classes))
    idx = np.concatenate(picks)[order]
    return Dataset(ds.images[idx], np.concatenate(labels)[order], len(classes), ds.split)


def _blobs(rng, count, size, channels):
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    out = np.zeros((channels, size, size))
    for _ in range(count):
        cy, cx = rng.uniform(0.15, 0.85, 2)
        width = rng.uniform(0.08, 0.2)
        amp = rng.uniform(-1.0, 1.0, channels)
        out += amp[:, None, None] * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
    return out


def synth_dataset(num_classes, n_per_class, image_size=16, seed=0, channels=3,
                  separation=1.0, noise=0.5, split="train"):
    """Gaussian-blob images: a shared background plus class-specific blobs.

    ``separation`` scales the class-specific part against the shared one;
    small values give thin decision margins. Prototypes depend only on
    ``seed``, so splits drawn with the same seed share classes, not samples.
    """
    if image_size < 8:
        raise ValueError("image_size must be at least 8")
    if num_classes < 2 or n_per_class < 1:
        raise ValueError("need at least two classes and one sample per class")
    proto_rng = np.random.default_rng([seed, 0])
    common = _blobs(proto_rng, 4, image_size, channels)
    protos = np.stack([common + separation * _blobs(proto_rng, 3, image_size, channels)
                       for _ in range(num_classes)])
    stream = {"train": 1, "test": 2, "val": 3}.get(split, 4)
    rng = np.random.default_rng([seed, stream])
    labels = np.repeat(np.arange(num_classes), n_per_class)
    rng.shuffle(labels)
    imgs = protos[labels] + noise * rng.standard_normal((labels.size, channels, image_size, image_size))
    return Dataset(np.clip(imgs, -1.0, 1.0), labels, num_classes, split)
