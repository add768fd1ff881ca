"""Dataset loading (IDX, CIFAR-10 binary), synthetic data, and augmentation."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class Split:
    images: np.ndarray  # (count, channels, H, W), float64
    labels: np.ndarray  # (count,), int64

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class Dataset:
    train: Split
    test: Split
    num_classes: int
    mean: np.ndarray  # per channel, from the train split
    std: np.ndarray

    @classmethod
    def from_splits(cls, train: Split, test: Split, num_classes: int | None = None) -> "Dataset":
        if num_classes is None:
            num_classes = int(max(train.labels.max(initial=0), test.labels.max(initial=0))) + 1
        for s in (train, test):
            if len(s) and s.labels.max() >= num_classes:
                raise FormatError(f"label {s.labels.max()} out of range for {num_classes} classes")
            if not np.all(np.isfinite(s.images)):
                raise FormatError("non-finite pixel values")
        axes = (0, 2, 3)
        mean = train.images.mean(axis=axes)
        std = train.images.std(axis=axes)
        std = np.where(std > 0, std, 1.0)
        return cls(train, test, num_classes, mean, std)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.train.images.shape[1:])

    def normalize(self, images: np.ndarray) -> np.ndarray:
        return (images - self.mean[None, :, None, None]) / self.std[None, :, None, None]

    def normalized(self) -> "Dataset":
        """Copy with both splits standardized by the stored train statistics."""
        train = Split(self.normalize(self.train.images), self.train.labels)
        test = Split(self.normalize(self.test.images), self.test.labels)
        return Dataset(train, test, self.num_classes, np.zeros_like(self.mean), np.ones_like(self.std))

    def subset(self, n_train: int | None = None, n_test: int | None = None) -> "Dataset":
        train = Split(self.train.images[:n_train], self.train.labels[:n_train])
        test = Split(self.test.images[:n_test], self.test.labels[:n_test])
        return Dataset(train, test, self.num_classes, self.mean, self.std)

    def digest(self) -> str:
        h = hashlib.sha256()
        for s in (self.train, self.test):
            h.update(np.ascontiguousarray(s.images).tobytes())
            h.update(np.ascontiguousarray(s.labels, dtype=np.int64).tobytes())
        return h.hexdigest()


def _read(path) -> bytes:
    return Path(path).read_bytes()


def load_idx(images_path, labels_path) -> Split:
    """Read an MNIST-style IDX image/label file pair; pixels scaled to [0, 1]."""
    raw_x, raw_y = _read(images_path), _read(labels_path)
    if len(raw_x) < 16 or len(raw_y) < 8:
        raise FormatError("IDX file too short for its header")
    magic, n, rows, cols = struct.unpack(">IIII", raw_x[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"bad IDX image magic {magic:#010x}")
    magic_y, n_y = struct.unpack(">II", raw_y[:8])
    if magic_y != IDX_LABELS_MAGIC:
        raise FormatError(f"bad IDX label magic {magic_y:#010x}")
    if n != n_y:
        raise FormatError(f"image count {n} != label count {n_y}")
    if len(raw_x) != 16 + n * rows * cols:
        raise FormatError(f"image payload is {len(raw_x) - 16} bytes, expected {n * rows * cols}")
    if len(raw_y) != 8 + n:
        raise FormatError(f"label payload is {len(raw_y) - 8} bytes, expected {n}")
    pixels = np.frombuffer(raw_x, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)
    labels = np.frombuffer(raw_y, dtype=np.uint8, offset=8).astype(np.int64)
    return Split(pixels.astype(np.float64) / 255.0, labels)


def load_cifar10_bin(*paths) -> Split:
    """Read CIFAR-10 binary batches: per record one label byte, then R, G, B planes."""
    xs, ys = [], []
    for path in paths:
        raw = _read(path)
        if len(raw) % CIFAR_RECORD:
            raise FormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        ys.append(rec[:, 0].astype(np.int64))
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    if not xs:
        return Split(np.zeros((0, 3, 32, 32)), np.zeros(0, dtype=np.int64))
    return Split(np.concatenate(xs), np.concatenate(ys))


def augment_pad_crop_flip(batch, rng, pad=4, flip_prob=0.5, offsets=None) -> np.ndarray:
    """Zero-pad, crop back to the original size at a random offset, and
    mirror horizontally with probability ``flip_prob``.

    ``offsets`` (count x 2) pins the crop corners instead of sampling them.
    """
    batch = np.asarray(batch, dtype=np.float64)
    n, c, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    if offsets is None:
        offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < flip_prob
    out = np.empty_like(batch)
    for k in range(n):
        dy, dx = offsets[k]
        img = padded[k, :, dy : dy + h, dx : dx + w]
        out[k] = img[:, :, ::-1] if flips[k] else img
    return out


def synth_blobs(
    classes=10,
    per_class=1000,
    image_shape=(1, 12, 12),
    noise=1.0,
    test_per_class=200,
    seed=0,
    pattern_scale=1.0,
) -> Dataset:
    """Gaussian class clusters rendered as small images.

    Each class gets a smooth mean pattern (coarse random grid, upsampled);
    samples are the pattern plus i.i.d. pixel noise of std ``noise``.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    c, h, w = image_shape
    coarse = rng.standard_normal((classes, c, (h + 2) // 3, (w + 2) // 3))
    patterns = np.kron(coarse, np.ones((1, 1, 3, 3)))[:, :, :h, :w] * pattern_scale

    def draw(count):
        labels = np.repeat(np.arange(classes), count)
        labels = labels[rng.permutation(len(labels))]
        images = patterns[labels] + noise * rng.standard_normal((len(labels), c, h, w))
        return Split(images, labels.astype(np.int64))

    train = draw(per_class)
    test = draw(test_per_class)
    return Dataset.from_splits(train, test, classes)


def iterate_batches(split: Split, batch_size: int, rng, shuffle=True):
    n = len(split)
    order = rng.permutation(n) if shuffle else np.arange(n)
    for s in range(0, n, batch_size):
        idx = order[s : s + batch_size]
        yield split.images[idx], split.labels[idx]
