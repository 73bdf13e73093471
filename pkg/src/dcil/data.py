"""MNIST (IDX) and CIFAR-10 (binary) loading, batching and augmentation."""
from __future__ import annotations

import gzip
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataFormatError

TRAIN = "train"
TEST = "test"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    TRAIN: ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    TEST: ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    TRAIN: tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    TEST: ("test_batch.bin",),
}
CIFAR_RECORD = 1 + 3 * 32 * 32
STATS_FILE = "dcil_stats.txt"


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W), standardized
    labels: np.ndarray  # (N,) int64
    split: str
    mean: np.ndarray  # per-channel, from the train split
    std: np.ndarray
    num_classes: int = 10
    name: str = ""

    def __len__(self) -> int:
        return len(self.labels)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels outside [0, {self.num_classes})")

    def take(self, idx: np.ndarray) -> "Dataset":
        return replace(self, images=self.images[idx], labels=self.labels[idx])


# --------------------------------------------------------------------------- raw readers

def _open_bytes(path: Path) -> bytes:
    if not path.exists():
        gz = path.with_name(path.name + ".gz")
        if gz.exists():
            with gzip.open(gz, "rb") as f:
                return f.read()
        raise FileNotFoundError(f"missing data file {path}")
    return path.read_bytes()


def read_idx(path: str | os.PathLike, expected_magic: int) -> np.ndarray:
    """Parse an IDX file of unsigned bytes (big-endian header)."""
    path = Path(path)
    raw = _open_bytes(path)
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header, expected at least 4 bytes, got {len(raw)}")
    magic = int.from_bytes(raw[:4], "big")
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header, expected {header} bytes, got {len(raw)}")
    dims = [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes for dims {dims}, got {len(raw)} "
                              f"(payload starts at offset {header})")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def read_mnist_raw(directory: str | os.PathLike, split: str) -> tuple[np.ndarray, np.ndarray]:
    img_name, lbl_name = MNIST_FILES[split]
    directory = Path(directory)
    images = read_idx(directory / img_name, IDX_IMAGES_MAGIC)
    labels = read_idx(directory / lbl_name, IDX_LABELS_MAGIC)
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise DataFormatError(f"{directory}: image dims {images.shape} vs label dims {labels.shape}")
    return images[:, None, :, :], labels.astype(np.int64)


def read_cifar_batch(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    raw = _open_bytes(path)
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise DataFormatError(f"{path}: {len(raw)} bytes is not a whole number of {CIFAR_RECORD}-byte records")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        i = int(bad[0])
        raise DataFormatError(f"{path}: label {labels[i]} at offset {i * CIFAR_RECORD} outside 0..9")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def read_cifar10_raw(directory: str | os.PathLike, split: str,
                     records_per_file: int | None = 10000) -> tuple[np.ndarray, np.ndarray]:
    parts = []
    for name in CIFAR_FILES[split]:
        images, labels = read_cifar_batch(Path(directory) / name)
        if records_per_file is not None and len(labels) != records_per_file:
            raise DataFormatError(f"{name}: {len(labels)} records, expected {records_per_file}")
        parts.append((images, labels))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


# --------------------------------------------------------------------------- normalization

def channel_stats(images_u8: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = images_u8.astype(np.float64) / 255.0
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def write_stats(path: Path, mean: np.ndarray, std: np.ndarray) -> None:
    lines = [f"mean_{c}={m!r}" for c, m in enumerate(mean.tolist())]
    lines += [f"std_{c}={s!r}" for c, s in enumerate(std.tolist())]
    path.write_text("\n".join(lines) + "\n")


def read_stats(path: Path) -> tuple[np.ndarray, np.ndarray]:
    kv = {}
    for line in path.read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            kv[k.strip()] = float(v)
    n = sum(k.startswith("mean_") for k in kv)
    try:
        return (np.array([kv[f"mean_{c}"] for c in range(n)]), np.array([kv[f"std_{c}"] for c in range(n)]))
    except KeyError as e:
        raise DataFormatError(f"{path}: incomplete stats file, missing {e}") from None


def _train_stats(directory: Path, reader, cache: bool) -> tuple[np.ndarray, np.ndarray]:
    sidecar = directory / STATS_FILE
    if sidecar.exists():
        return read_stats(sidecar)
    mean, std = channel_stats(reader(directory, TRAIN)[0])
    if cache:
        try:
            write_stats(sidecar, mean, std)
        except OSError:
            pass  # read-only dataset directory
    return mean, std


def standardize(images_u8: np.ndarray, mean: np.ndarray, std: np.ndarray, dtype=np.float32) -> np.ndarray:
    x = images_u8.astype(np.float64) / 255.0
    x = (x - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)
    return x.astype(dtype)


def _load(directory, split, reader, name, dtype, cache_stats) -> Dataset:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory {directory} does not exist")
    mean, std = _train_stats(directory, reader, cache_stats)
    images, labels = reader(directory, split)
    return Dataset(standardize(images, mean, std, dtype), labels, split, mean, std, 10, name)


def load_mnist(directory, split: str = TRAIN, dtype=np.float32, cache_stats: bool = True) -> Dataset:
    """Load an MNIST split standardized by train-split channel statistics."""
    return _load(directory, split, read_mnist_raw, "mnist", dtype, cache_stats)


def load_cifar10(directory, split: str = TRAIN, dtype=np.float32, cache_stats: bool = True) -> Dataset:
    return _load(directory, split, read_cifar10_raw, "cifar10", dtype, cache_stats)


LOADERS = {"mnist": load_mnist, "cifar10": load_cifar10}


# --------------------------------------------------------------------------- subsets and batches

def subset(ds: Dataset, k: int, seed: int = 0) -> Dataset:
    """Class-stratified subsample of size ``k``.

    Each class gets ``floor(k * n_c / N)`` samples; leftover slots go to the
    classes with the largest fractional remainders (ties by class index).
    """
    n = len(ds)
    if not 0 < k <= n:
        raise ValueError(f"subset size must be in (0, {n}], got {k}")
    if k == n:
        return ds.take(np.arange(n))
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(ds.labels, return_counts=True)
    exact = k * counts / n
    quota = np.floor(exact).astype(int)
    rem = k - quota.sum()
    order = sorted(range(len(classes)), key=lambda i: (-(exact[i] - quota[i]), i))
    for i in order[:rem]:
        quota[i] += 1
    chosen = []
    for c, q in zip(classes, quota):
        idx = np.flatnonzero(ds.labels == c)
        chosen.append(idx[rng.permutation(len(idx))[:q]])
    return ds.take(np.sort(np.concatenate(chosen)))


def epoch_rng(seed: int, epoch: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, stream])


class BatchIterator:
    """Shuffled minibatches; the order depends only on ``(seed, epoch)``."""

    def __init__(self, ds: Dataset, batch_size: int, seed: int, shuffle: bool = True):
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.ds = ds
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle = shuffle

    def __len__(self) -> int:
        return -(-len(self.ds) // self.batch_size)

    def indices(self, epoch: int) -> np.ndarray:
        if not self.shuffle:
            return np.arange(len(self.ds))
        return epoch_rng(self.seed, epoch).permutation(len(self.ds))

    def epoch(self, epoch: int):
        order = self.indices(epoch)
        for start in range(0, len(order), self.batch_size):
            idx = order[start:start + self.batch_size]
            yield self.ds.images[idx], self.ds.labels[idx]


# --------------------------------------------------------------------------- augmentation

NONE = "none"
CIFAR = "cifar"


def hflip(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1].copy()


def random_crop(images: np.ndarray, rng: np.random.Generator, pad: int = 4):
    """Reflect-pad then crop back to the original size; returns (images, offsets)."""
    B, C, H, W = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    offsets = rng.integers(0, 2 * pad + 1, size=(B, 2))
    out = np.empty_like(images)
    for b, (dy, dx) in enumerate(offsets):
        out[b] = padded[b, :, dy:dy + H, dx:dx + W]
    return out, offsets


def augment(images: np.ndarray, policy: str, rng: np.random.Generator | None) -> np.ndarray:
    if policy == NONE:
        return images
    if policy != CIFAR:
        raise ValueError(f"unknown augmentation policy {policy!r}")
    out, _ = random_crop(images, rng)
    flip = rng.random(len(out)) < 0.5
    out[flip] = out[flip][..., ::-1]
    return out
