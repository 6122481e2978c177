"""Datasets: seeded Gaussian mixtures and the CIFAR-10 binary batches."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, FormatError

CIFAR_RECORD = 3073
CIFAR_PIXELS = 3072
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"

_SPLIT_STREAM = {"train": 1, "test": 2}


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ContractError("inputs and labels disagree on N")
        if not np.all(np.isfinite(self.inputs)):
            raise ContractError("dataset inputs contain non-finite values")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ContractError("label out of range")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return int(np.prod(self.inputs.shape[1:]))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.n_classes, self.split,
                       dict(self.provenance, subset=len(idx)))


def gmm_means(n_classes, dim, separation, seed):
    """Class means on a random orthonormal frame; every pair sits ``separation`` apart."""
    rng = np.random.default_rng([seed, 0])
    q, r = np.linalg.qr(rng.standard_normal((dim, n_classes)))
    q = q * np.sign(np.diag(r))  # make the frame unique
    return (separation / np.sqrt(2.0)) * q.T


def gen_gmm(n_classes=10, dim=32, separation=6.0, n_per_class=200, seed=0, split="train") -> Dataset:
    """Isotropic unit-variance Gaussian clusters, exactly ``n_per_class`` per class.

    Train and test splits of the same seed share the class means and draw
    independent samples.
    """
    if n_classes < 2 or dim < 2 or not separation > 0 or n_per_class < 1:
        raise ConfigError("gen_gmm needs n_classes >= 2, dim >= 2, separation > 0, n_per_class >= 1")
    if n_classes > dim:
        raise ConfigError(f"an orthonormal frame for {n_classes} classes needs dim >= {n_classes}")
    if split not in _SPLIT_STREAM:
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    means = gmm_means(n_classes, dim, separation, seed)
    rng = np.random.default_rng([seed, _SPLIT_STREAM[split]])
    labels = np.repeat(np.arange(n_classes), n_per_class)
    x = means[labels] + rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    prov = dict(kind="gmm", n_classes=n_classes, dim=dim, separation=separation,
                n_per_class=n_per_class, seed=seed)
    return Dataset(x[order], labels[order], n_classes, split, prov)


def read_cifar_batch(path):
    """Raw ``(labels uint8[N], pixels uint8[N, 3072])`` from one binary batch file."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise FormatError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD} bytes")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{path}: record {int(bad[0])} has label byte {int(labels[bad[0]])} > 9")
    return labels.copy(), rec[:, 1:].copy()


def write_cifar_batch(path, labels, pixels):
    """Inverse of :func:`read_cifar_batch`. ``pixels`` may be uint8 or [0, 1] floats."""
    labels = np.asarray(labels)
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        pixels = np.rint(pixels.reshape(len(labels), -1) * 255.0).astype(np.uint8)
    pixels = pixels.reshape(len(labels), CIFAR_PIXELS)
    out = np.empty((len(labels), CIFAR_RECORD), dtype=np.uint8)
    out[:, 0] = labels
    out[:, 1:] = pixels
    out.tofile(path)


def load_cifar10(directory, split="train") -> Dataset:
    """Pixels scaled to [0, 1], planar R, G, B, each 32 x 32 row-major."""
    if split == "train":
        files = CIFAR_TRAIN_FILES
    elif split == "test":
        files = (CIFAR_TEST_FILE,)
    else:
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    labels, pixels = [], []
    for name in files:
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            raise FormatError(f"missing CIFAR-10 batch file {path}")
        lab, pix = read_cifar_batch(path)
        labels.append(lab)
        pixels.append(pix)
    x = np.concatenate(pixels).astype(np.float64) / 255.0
    y = np.concatenate(labels).astype(np.int64)
    return Dataset(x, y, 10, split, dict(kind="cifar10", dir=str(directory), files=list(files)))


def _as_images(batch):
    x = np.asarray(batch)
    if x.ndim == 2 and x.shape[1] == CIFAR_PIXELS:
        return x.reshape(-1, 3, 32, 32), True
    if x.ndim == 4 and x.shape[1:] == (3, 32, 32):
        return x, False
    raise ContractError(f"expected N x 3072 or N x 3 x 32 x 32 images, got shape {x.shape}")


def crop(images, offsets, pad=4):
    """Reflect-pad by ``pad`` and cut 32 x 32 windows at per-image (dy, dx) offsets."""
    x, flat = _as_images(images)
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    out = np.empty_like(x)
    for i, (dy, dx) in enumerate(np.asarray(offsets).reshape(-1, 2)):
        out[i] = padded[i, :, dy:dy + 32, dx:dx + 32]
    return out.reshape(-1, CIFAR_PIXELS) if flat else out


def hflip(images, mask=None):
    """Mirror the width axis of the images selected by ``mask`` (all by default)."""
    x, flat = _as_images(images)
    out = x.copy()
    sel = np.ones(len(x), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    out[sel] = out[sel][..., ::-1]
    return out.reshape(-1, CIFAR_PIXELS) if flat else out


def augment(batch, seed, pad=4, flip="random"):
    """Random reflect-padded crop, then horizontal flip.

    ``flip`` is ``"random"`` (probability 1/2), ``"always"`` or ``"never"``.
    """
    x, _ = _as_images(batch)
    rng = np.random.default_rng(seed)
    offsets = rng.integers(0, 2 * pad + 1, size=(len(x), 2))
    out = crop(batch, offsets, pad)
    if flip == "random":
        mask = rng.random(len(x)) < 0.5
    elif flip == "always":
        mask = np.ones(len(x), dtype=bool)
    elif flip == "never":
        return out
    else:
        raise ConfigError(f"unknown flip mode {flip!r}")
    return hflip(out, mask)
