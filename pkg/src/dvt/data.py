"""MNIST / CIFAR-10 readers and light augmentation."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}
CIFAR_RECORD = 1 + 3 * 32 * 32

FETCH_HELP = {
    "mnist": (
        "MNIST files not found in {dir}. Place the four uncompressed IDX files "
        "(train-images-idx3-ubyte, train-labels-idx1-ubyte, t10k-images-idx3-ubyte, "
        "t10k-labels-idx1-ubyte) there, e.g. by gunzipping the published archives, "
        "or rebuild them with tools/mnist_idx_from_pickle.py."
    ),
    "cifar10": (
        "CIFAR-10 files not found in {dir}. Extract the 'CIFAR-10 binary version' "
        "archive so data_batch_1.bin ... data_batch_5.bin and test_batch.bin sit there."
    ),
}


class DataError(ValueError):
    """Dataset file missing, truncated or malformed."""


@dataclass
class DatasetHandle:
    name: str
    split: str
    images: np.ndarray  # [n, C, H, W] in [0, 1]
    labels: np.ndarray  # [n]
    classes: int = 10

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "DatasetHandle":
        return DatasetHandle(self.name, self.split, self.images[idx], self.labels[idx], self.classes)


def _read(path: Path, what: str) -> bytes:
    if not path.exists():
        raise FileNotFoundError(f"{what}: {path} does not exist")
    return path.read_bytes()


def parse_idx_images(raw: bytes, name: str = "images") -> np.ndarray:
    if len(raw) < 16:
        raise DataError(f"{name}: header needs 16 bytes, file has {len(raw)}")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != 0x00000803:
        raise DataError(f"{name}: magic 0x{magic:08x}, expected 0x00000803")
    expected = 16 + n * rows * cols
    if len(raw) != expected:
        raise DataError(f"{name}: expected {expected} bytes for {n}x{rows}x{cols}, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)


def parse_idx_labels(raw: bytes, name: str = "labels") -> np.ndarray:
    if len(raw) < 8:
        raise DataError(f"{name}: header needs 8 bytes, file has {len(raw)}")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != 0x00000801:
        raise DataError(f"{name}: magic 0x{magic:08x}, expected 0x00000801")
    if len(raw) != 8 + n:
        raise DataError(f"{name}: expected {8 + n} bytes for {n} labels, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)


def load_mnist(directory, split: str = "train") -> DatasetHandle:
    directory = Path(directory)
    img_name, lbl_name = MNIST_FILES[split]
    images = parse_idx_images(_read(directory / img_name, "mnist"), img_name)
    labels = parse_idx_labels(_read(directory / lbl_name, "mnist"), lbl_name)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{img_name} has {images.shape[0]} images but {lbl_name} {labels.shape[0]} labels")
    if labels.size and labels.max() > 9:
        raise DataError(f"{lbl_name}: label {labels.max()} outside 0..9")
    return DatasetHandle("mnist", split, images / 255.0, labels, 10)


def parse_cifar_batch(raw: bytes, name: str = "batch") -> tuple[np.ndarray, np.ndarray]:
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise DataError(f"{name}: length {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataError(f"{name}: label byte {labels.max()} outside 0..9")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10(directory, split: str = "train") -> DatasetHandle:
    directory = Path(directory)
    xs, ys = [], []
    for fname in CIFAR_FILES[split]:
        x, y = parse_cifar_batch(_read(directory / fname, "cifar10"), fname)
        xs.append(x)
        ys.append(y)
    return DatasetHandle("cifar10", split, np.concatenate(xs) / 255.0, np.concatenate(ys), 10)


LOADERS = {"mnist": load_mnist, "cifar10": load_cifar10}


def load_dataset(name: str, directory, split: str) -> DatasetHandle:
    if name not in LOADERS:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(LOADERS)}")
    try:
        return LOADERS[name](directory, split)
    except FileNotFoundError as exc:
        raise FileNotFoundError(FETCH_HELP[name].format(dir=directory)) from exc


def train_val_split(ds: DatasetHandle, val_fraction: float, seed: int) -> tuple[DatasetHandle, DatasetHandle]:
    """Seeded held-out split; the val part is used for threshold solving."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must lie in [0, 1)")
    perm = np.random.default_rng([seed, 7]).permutation(len(ds))
    n_val = int(round(val_fraction * len(ds)))
    val = ds.subset(np.sort(perm[:n_val]))
    train = ds.subset(np.sort(perm[n_val:]))
    val.split = "val"
    return train, val


AUGMENT_POLICIES = ("none", "crop-flip")


def hflip(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1]


def augment(batch: np.ndarray, policy: str, seed) -> np.ndarray:
    """``crop-flip``: random crop after 4-px reflect padding, then flip with p=0.5."""
    if policy not in AUGMENT_POLICIES:
        raise ValueError(f"unknown augmentation policy {policy!r}")
    if policy == "none":
        return batch
    rng = np.random.default_rng(seed)
    n, _, h, w = batch.shape
    pad = 4
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(batch)
    for i in range(n):
        crop = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = crop[..., ::-1] if flip[i] else crop
    return out
