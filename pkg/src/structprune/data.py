"""Batches, the synthetic desk-scale image set and a flat binary loader."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, InputError


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs)
        self.targets = np.asarray(self.targets)
        if len(self.inputs) < 1:
            raise InputError("empty batch")
        if len(self.targets) != len(self.inputs):
            raise InputError("inputs and targets differ in length")

    def __len__(self):
        return len(self.inputs)

    def take(self, idx):
        return Batch(self.inputs[idx], self.targets[idx])

    def chunks(self, size):
        """Consecutive sub-batches of at most ``size`` samples."""
        n = len(self)
        for lo in range(0, n, size):
            yield Batch(self.inputs[lo:lo + size], self.targets[lo:lo + size])


Dataset = Batch


def subsample(dataset: Batch, n_prime, seed) -> Batch:
    """Uniform sample of ``n_prime`` points without replacement."""
    n = len(dataset)
    if n_prime < 1 or n_prime > n:
        raise InputError(f"subsample size {n_prime} outside [1, {n}]")
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=n_prime, replace=False)
    return dataset.take(idx)


def synthetic_images(n, shape=(3, 16, 16), classes=10, seed=0, noise=0.6, proto_seed=1234):
    """Class-conditional smooth textures with random shifts and noise.

    Class prototypes come from ``proto_seed`` so that train/test splits drawn
    with different ``seed`` share the same classes.
    """
    c, h, w = shape
    prng = np.random.default_rng(proto_seed)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    protos = np.zeros((classes, c, h, w))
    for k in range(classes):
        for ch in range(c):
            for _ in range(3):
                fy, fx = prng.uniform(0.3, 1.6, size=2)
                ph = prng.uniform(0, 2 * np.pi)
                amp = prng.normal()
                protos[k, ch] += amp * np.cos(fy * yy + fx * xx + ph)
    protos /= protos.std(axis=(1, 2, 3), keepdims=True)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=n)
    dy = rng.integers(-2, 3, size=n)
    dx = rng.integers(-2, 3, size=n)
    x = np.empty((n, c, h, w))
    for i in range(n):
        x[i] = np.roll(protos[labels[i]], (dy[i], dx[i]), axis=(1, 2))
    x *= rng.uniform(0.7, 1.3, size=(n, 1, 1, 1))
    x += noise * rng.normal(size=x.shape)
    return Batch(x.astype(np.float64), labels.astype(np.int64))


def linear_blobs(n, d=8, classes=2, seed=0, margin=3.0):
    """Linearly separable Gaussian blobs for flat-input models."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(classes, d))
    centers *= margin / np.linalg.norm(centers, axis=1, keepdims=True)
    labels = rng.integers(0, classes, size=n)
    x = centers[labels] + 0.5 * rng.normal(size=(n, d))
    return Batch(x, labels.astype(np.int64))


# Flat binary image set: magic, version, N, C, H, W, classes (all little-endian
# uint32 after the magic), then N int32 labels, then N*C*H*W float32 pixels.
IMG_MAGIC = b"SPRNIMG1"


def save_image_set(path, batch: Batch, classes=None):
    x = np.asarray(batch.inputs, dtype="<f4")
    y = np.asarray(batch.targets, dtype="<i4")
    n, c, h, w = x.shape
    classes = int(y.max()) + 1 if classes is None else classes
    with open(path, "wb") as fh:
        fh.write(IMG_MAGIC)
        fh.write(struct.pack("<6I", 1, n, c, h, w, classes))
        fh.write(y.tobytes())
        fh.write(x.tobytes())


def load_image_set(path) -> Batch:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    if raw[:8] != IMG_MAGIC or len(raw) < 32:
        raise DataError(f"{path}: not an image set file")
    version, n, c, h, w, classes = struct.unpack_from("<6I", raw, 8)
    need = 32 + 4 * n + 4 * n * c * h * w
    if version != 1 or len(raw) != need:
        raise DataError(f"{path}: corrupt image set (expected {need} bytes, got {len(raw)})")
    y = np.frombuffer(raw, "<i4", n, 32).astype(np.int64)
    x = np.frombuffer(raw, "<f4", n * c * h * w, 32 + 4 * n).reshape(n, c, h, w).astype(np.float64)
    if n and (y.min() < 0 or y.max() >= classes):
        raise DataError(f"{path}: label out of range")
    return Batch(x, y)
