#!/usr/bin/env python3
"""Rebuild the four MNIST IDX files from the classic ``mnist.pkl.gz`` pickle.

The pickle (train/valid/test tuples of float32 rows holding ``byte / 256``)
is the original 60k training set split 50k/10k in file order, so joining
train and valid restores the published training order exactly.

    python tools/mnist_idx_from_pickle.py mnist.pkl.gz /data/mnist

The pickle can also be read straight out of a wheel that bundles it::

    python tools/mnist_idx_from_pickle.py some.whl:mnist/data/mnist.pkl.gz /data/mnist
"""

import argparse
import gzip
import pickle
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np


def _read_source(source: str) -> bytes:
    if ":" in source and source.split(":", 1)[0].endswith(".whl"):
        wheel, member = source.split(":", 1)
        with zipfile.ZipFile(wheel) as zf:
            return zf.read(member)
    return Path(source).read_bytes()


def _to_bytes(rows) -> np.ndarray:
    scaled = np.asarray(rows, dtype=np.float64) * 256.0
    as_int = np.rint(scaled)
    if np.abs(scaled - as_int).max() != 0 or as_int.max() > 255 or as_int.min() < 0:
        raise ValueError("pickle pixels are not exact multiples of 1/256")
    return as_int.astype(np.uint8)


def write_idx_images(path: Path, pixels: np.ndarray) -> None:
    n = pixels.shape[0]
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        f.write(pixels.reshape(n, 784).tobytes())


def write_idx_labels(path: Path, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("source", help="mnist.pkl.gz path, or WHEEL:member")
    parser.add_argument("out_dir", type=Path)
    args = parser.parse_args(argv)

    raw = _read_source(args.source)
    (tr_x, tr_y), (va_x, va_y), (te_x, te_y) = pickle.loads(
        gzip.decompress(raw), encoding="latin1"
    )
    train_x = _to_bytes(np.concatenate([tr_x, va_x]))
    train_y = np.concatenate([tr_y, va_y])
    test_x = _to_bytes(te_x)

    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx_images(args.out_dir / "train-images-idx3-ubyte", train_x)
    write_idx_labels(args.out_dir / "train-labels-idx1-ubyte", train_y)
    write_idx_images(args.out_dir / "t10k-images-idx3-ubyte", test_x)
    write_idx_labels(args.out_dir / "t10k-labels-idx1-ubyte", np.asarray(te_y))
    print(f"wrote {len(train_y)} train / {len(te_y)} test samples to {args.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
