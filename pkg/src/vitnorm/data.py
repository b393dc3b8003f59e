"""Dataset readers and deterministic batching.

Shuffling uses numpy's Philox-4x64 counter-based generator keyed by the run
seed, with the epoch index placed in the first counter word.  The same
(seed, epoch) always yields the same permutation.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 32 * 32 * 3

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


class DataFormatError(ValueError):
    """A dataset file does not match its binary format."""


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [n, H, W, C] float, values in [0, 1] (or [-1, 1] after value_range)
    labels: np.ndarray  # [n] int64
    class_count: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be [n, H, W, C], got {self.images.shape}")
        n = self.images.shape[0]
        if n < 1:
            raise DataFormatError("dataset is empty")
        if self.labels.shape != (n,):
            raise DataFormatError(f"{self.labels.shape[0]} labels for {n} images")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataFormatError(f"labels outside [0, {self.class_count})")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, count: int) -> "Dataset":
        return Dataset(self.images[:count], self.labels[:count], self.class_count)


def _open(path: str | os.PathLike) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def read_idx_array(path: str | os.PathLike) -> np.ndarray:
    """Parse one IDX file of unsigned bytes into an array of its declared shape."""
    raw = _open(path)
    if len(raw) < 4:
        raise DataFormatError(f"{path}: file too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: header truncated, missing {header - len(raw)} bytes")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = 1
    for d in dims:
        expected *= d
        if expected > 2**40:
            raise DataFormatError(f"{path}: dimensions {dims} overflow")
    have = len(raw) - header
    if have < expected:
        raise DataFormatError(f"{path}: payload truncated, missing {expected - have} bytes")
    if have > expected:
        raise DataFormatError(f"{path}: {have - expected} trailing bytes after payload")
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header).reshape(dims)


def read_idx(images_path, labels_path, class_count: int = 10) -> Dataset:
    """Pair an IDX image file with its label file; pixels scaled by 1/255."""
    images = read_idx_array(images_path)
    labels = read_idx_array(labels_path)
    if images.ndim != 3:
        raise DataFormatError(f"{images_path}: expected 3 image dimensions, got {images.ndim}")
    if labels.ndim != 1:
        raise DataFormatError(f"{labels_path}: expected 1 label dimension, got {labels.ndim}")
    pixels = images.astype(np.float32)[..., None] / np.float32(255)
    return Dataset(pixels, labels.astype(np.int64), class_count)


def read_cifar10_bin(paths: Sequence[str | os.PathLike]) -> Dataset:
    """CIFAR-10 binary batches: 1 label byte, then 1024 R, 1024 G, 1024 B bytes."""
    images, labels = [], []
    for path in paths:
        raw = _open(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise DataFormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}-byte records")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(records[:, 0].astype(np.int64))
        planar = records[:, 1:].reshape(-1, 3, 32, 32)
        images.append(planar.transpose(0, 2, 3, 1))
    pixels = np.concatenate(images).astype(np.float32) / np.float32(255)
    return Dataset(pixels, np.concatenate(labels), 10)


def load_mnist(data_dir, split: str = "train") -> Dataset:
    data_dir = Path(data_dir)
    names = MNIST_FILES[split]
    found = []
    for name in names:
        for candidate in (data_dir / name, data_dir / f"{name}.gz"):
            if candidate.exists():
                found.append(candidate)
                break
        else:
            raise FileNotFoundError(f"{name}[.gz] not found in {data_dir}")
    return read_idx(*found)


def load_cifar10(data_dir, split: str = "train") -> Dataset:
    data_dir = Path(data_dir)
    if (data_dir / "cifar-10-batches-bin").is_dir():
        data_dir = data_dir / "cifar-10-batches-bin"
    return read_cifar10_bin([data_dir / name for name in CIFAR_FILES[split]])


def value_range(d: Dataset) -> Dataset:
    """Map [0, 1] pixels to [-1, 1] via 2x - 1.  Not idempotent, so inputs are range-checked."""
    if d.images.min() < 0 or d.images.max() > 1:
        raise ValueError("value_range expects pixels in [0, 1]; was it applied twice?")
    scaled = d.images * d.images.dtype.type(2) - d.images.dtype.type(1)
    return Dataset(scaled, d.labels, d.class_count)


def synthetic_dataset(
    class_count: int = 2,
    n: int = 64,
    height: int = 8,
    width: int = 8,
    channels: int = 1,
    seed: int = 0,
    noise: float = 0.05,
) -> Dataset:
    """Class-conditional blobs a tiny ViT can fit.

    Class k has brightness 0.2 + 0.6 k / (K - 1) plus a fixed zero-mean
    spatial template (so models that standardize patches still see the class)
    and per-pixel Gaussian noise.  Labels cycle through the classes, then are
    shuffled, so class counts differ by at most one.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    shape = (height, width, channels)
    levels = 0.2 + 0.6 * np.arange(class_count) / max(class_count - 1, 1)
    templates = rng.standard_normal((class_count, *shape))
    templates -= templates.mean(axis=(1, 2, 3), keepdims=True)
    templates *= 0.1 / templates.std(axis=(1, 2, 3), keepdims=True)
    labels = rng.permutation(np.arange(n) % class_count)
    images = levels[labels][:, None, None, None] + templates[labels] + noise * rng.standard_normal((n, *shape))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), class_count)


@dataclass(frozen=True)
class BatchPlan:
    seed: int
    batch_size: int

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def permutation(self, n: int, epoch: int) -> np.ndarray:
        counter = np.array([epoch, 0, 0, 0], dtype=np.uint64)
        rng = np.random.Generator(np.random.Philox(key=self.seed, counter=counter))
        return rng.permutation(n)


def one_hot(labels: np.ndarray, class_count: int, dtype=np.float32) -> np.ndarray:
    return np.eye(class_count, dtype=dtype)[labels]


def batches(d: Dataset, plan: BatchPlan, epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of (images, one-hot targets); the final short batch is kept."""
    order = plan.permutation(len(d), epoch)
    for start in range(0, len(d), plan.batch_size):
        idx = order[start : start + plan.batch_size]
        yield d.images[idx], one_hot(d.labels[idx], d.class_count)


def batch_stream(d: Dataset, plan: BatchPlan) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless concatenation of epochs 0, 1, 2, ..."""
    epoch = 0
    while True:
        yield from batches(d, plan, epoch)
        epoch += 1
