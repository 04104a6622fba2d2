import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dvt import tensor as T  # noqa: E402
from dvt.tensor import Tensor  # noqa: E402

MNIST_DIR = Path(os.environ.get("DVT_MNIST_DIR", os.environ.get("DVT_DATA_DIR", "/root/data/mnist")))


def mnist_available() -> bool:
    return (MNIST_DIR / "train-images-idx3-ubyte").exists() and (MNIST_DIR / "t10k-images-idx3-ubyte").exists()


def gradcheck(fn, inputs, *, eps=1e-5, rtol=1e-4, atol=1e-7, max_entries=None, rng=None):
    """Central-difference check of d fn(*inputs) / d inputs.

    ``fn`` maps Tensors to a scalar Tensor. With ``max_entries`` only that many
    randomly chosen coordinates of each input are probed. Returns the worst
    ``|analytic - numeric| / max(|analytic|, |numeric|)`` over the probes that
    fail the absolute tolerance.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.requires_grad = True
    T.backward(fn(*inputs))
    analytic = [t.grad.copy() for t in inputs]
    worst = 0.0
    for t, g in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = rng.choice(flat.size, max_entries, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            with T.no_grad():
                up = fn(*inputs).item()
            flat[c] = orig - eps
            with T.no_grad():
                down = fn(*inputs).item()
            flat[c] = orig
            num = (up - down) / (2 * eps)
            ana = g.reshape(-1)[c]
            err = abs(ana - num)
            if err > atol:
                rel = err / max(abs(ana), abs(num))
                worst = max(worst, rel)
                assert rel <= rtol, f"grad mismatch at {c}: analytic {ana}, numeric {num} (rel {rel:.2e})"
    return worst


def rand_tensor(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, shape))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def idx_images(images: np.ndarray) -> bytes:
    n, h, w = images.shape
    return np.array([0x803, n, h, w], dtype=">u4").tobytes() + images.astype(np.uint8).tobytes()


def idx_labels(labels: np.ndarray) -> bytes:
    return np.array([0x801, len(labels)], dtype=">u4").tobytes() + labels.astype(np.uint8).tobytes()


def write_fake_mnist(directory: Path, n_train=120, n_test=40, seed=0) -> Path:
    """Tiny MNIST-format dataset: each class lights up its own pair of rows."""
    rng = np.random.default_rng(seed)
    directory.mkdir(parents=True, exist_ok=True)
    for split, n in (("train", n_train), ("t10k", n_test)):
        labels = rng.integers(0, 10, n)
        images = rng.integers(0, 60, (n, 28, 28))
        for i, y in enumerate(labels):
            images[i, 2 + 2 * y : 4 + 2 * y] = 255
        (directory / f"{split}-images-idx3-ubyte").write_bytes(idx_images(images))
        (directory / f"{split}-labels-idx1-ubyte").write_bytes(idx_labels(labels))
    return directory
