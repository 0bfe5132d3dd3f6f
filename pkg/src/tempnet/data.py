"""Datasets: MNIST from IDX files, synthetic XOR and two-moons."""

from __future__ import annotations

import hashlib
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

# sha256 of the uncompressed reference files
MNIST_SHA256 = {
    "train-images-idx3-ubyte": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "train-labels-idx1-ubyte": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "t10k-images-idx3-ubyte": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "t10k-labels-idx1-ubyte": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    n_classes: int

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return self.train_x.shape[1:]


def read_idx(path, expect_magic: int | None = None) -> np.ndarray:
    """Parse an unsigned-byte IDX file (big-endian header)."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise DataError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", data[:4])[0]
    if expect_magic is not None and magic != expect_magic:
        raise DataError(f"{path}: magic {magic}, expected {expect_magic}")
    if magic >> 8 != 0x08:
        raise DataError(f"{path}: only unsigned-byte IDX files are supported (magic {magic:#x})")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])
    off = 4 + 4 * ndim
    n = int(np.prod(dims))
    if len(data) - off != n:
        raise DataError(f"{path}: payload has {len(data) - off} bytes, header says {n}")
    return np.frombuffer(data, dtype=np.uint8, offset=off).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    a = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + a.tobytes())


def data_dir(explicit=None) -> Path:
    d = explicit or os.environ.get("TEMP_DATA_DIR")
    if not d:
        raise DataError("no dataset directory: pass --data-dir or set TEMP_DATA_DIR")
    return Path(d)


def verify_mnist(directory) -> dict[str, bool]:
    out = {}
    for name, digest in MNIST_SHA256.items():
        p = Path(directory) / name
        out[name] = p.exists() and hashlib.sha256(p.read_bytes()).hexdigest() == digest
    return out


def load_mnist(directory=None, n_train: int | None = None, n_val: int = 5000,
               n_test: int | None = None, flat: bool = True) -> Dataset:
    """MNIST with pixels scaled to [0, 1].

    The last ``n_val`` images of the training file are held out for
    validation; ``n_train`` then truncates the remaining training images.
    """
    d = data_dir(directory)
    missing = [f for f in MNIST_FILES.values() if not (d / f).exists()]
    if missing:
        raise DataError(f"{d}: missing MNIST files {missing}")
    for name, ok in verify_mnist(d).items():
        if not ok:
            log.warning("%s does not match the reference checksum", name)
    xtr = read_idx(d / MNIST_FILES["train_images"], IDX_IMAGES_MAGIC)
    ytr = read_idx(d / MNIST_FILES["train_labels"], IDX_LABELS_MAGIC)
    xte = read_idx(d / MNIST_FILES["test_images"], IDX_IMAGES_MAGIC)
    yte = read_idx(d / MNIST_FILES["test_labels"], IDX_LABELS_MAGIC)
    if len(xtr) != len(ytr) or len(xte) != len(yte):
        raise DataError("image/label counts differ")

    def prep(x):
        x = x.astype(np.float64) / 255.0
        return x.reshape(len(x), -1) if flat else x[..., None]

    split = len(xtr) - n_val
    train_x, train_y = prep(xtr[:split]), ytr[:split].astype(np.int64)
    val_x, val_y = prep(xtr[split:]), ytr[split:].astype(np.int64)
    if n_train is not None:
        train_x, train_y = train_x[:n_train], train_y[:n_train]
    test_x, test_y = prep(xte), yte.astype(np.int64)
    if n_test is not None:
        test_x, test_y = test_x[:n_test], test_y[:n_test]
    return Dataset(train_x, train_y, val_x, val_y, test_x, test_y, 10)


def xor_samples(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform points in [-1, 1]^2; class 1 when the coordinates differ in sign."""
    x = rng.uniform(-1.0, 1.0, size=(n, 2))
    y = (np.signbit(x[:, 0]) != np.signbit(x[:, 1])).astype(np.int64)
    return x, y


def moon_samples(n: int, rng: np.random.Generator, noise: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Two interleaving half circles, rescaled so the clean curves span [-1, 1]^2."""
    from sklearn.datasets import make_moons

    x, y = make_moons(n_samples=n, noise=noise, random_state=int(rng.integers(2**31 - 1)))
    x = (x - np.array([0.5, 0.25])) / np.array([1.5, 0.75])
    return x, y.astype(np.int64)


def synthetic(task: str, n_train: int, n_val: int, n_test: int, seed: int, noise: float = 0.1) -> Dataset:
    rng = np.random.default_rng(seed)
    if task == "xor":
        gen = xor_samples
    elif task == "moon":
        def gen(n, r):
            return moon_samples(n, r, noise)
    else:
        raise ValueError(f"unknown synthetic task {task!r}")
    parts = [gen(n, rng) for n in (n_train, n_val, n_test)]
    return Dataset(*parts[0], *parts[1], *parts[2], n_classes=2)
