"""Datasets: CIFAR-10 binary batches and a seeded synthetic stand-in."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_CLASSES = 10


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "test"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=T.FLOAT)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim < 2 or self.images.shape[0] != self.labels.shape[0]:
            raise ConfigError(f"{self.images.shape[0] if self.images.ndim else 0} images "
                              f"but {self.labels.shape[0]} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ConfigError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split)


def load_cifar10_bin(paths, split="test") -> Dataset:
    """Read CIFAR-10 binary batch files (label byte + 3072 pixel bytes per record)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise FormatError(f"cannot read {path}: {exc}") from exc
        if len(raw) % CIFAR_RECORD:
            raise FormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        bad = np.flatnonzero(rec[:, 0] >= CIFAR_CLASSES)
        if bad.size:
            i = int(bad[0])
            raise FormatError(f"{path}: record {i} has label {rec[i, 0]} (expected 0-9)")
        labels.append(rec[:, 0].astype(np.int64))
        images.append((rec[:, 1:].astype(T.FLOAT) / T.FLOAT(255)).reshape(-1, *CIFAR_SHAPE))
    if not images:
        raise ConfigError("no CIFAR-10 files given")
    return Dataset(np.concatenate(images), np.concatenate(labels), CIFAR_CLASSES, split)


def _smooth_field(rng, shape, grid):
    """Random low-frequency image: a coarse grid upsampled bilinearly."""
    c, h, w = shape
    coarse = rng.uniform(0.0, 1.0, size=(c, grid, grid))
    ys = np.linspace(0, grid - 1, h)
    xs = np.linspace(0, grid - 1, w)
    y0 = np.clip(np.floor(ys).astype(int), 0, grid - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, grid - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = coarse[:, y0][:, :, x0]
    b = coarse[:, y0][:, :, x0 + 1]
    cc = coarse[:, y0 + 1][:, :, x0]
    d = coarse[:, y0 + 1][:, :, x0 + 1]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * cc + fx * d)


def make_synthetic(num_classes, samples_per_class, shape=(3, 16, 16), rng_seed=0, split="train",
                   contrast=0.3, motif_size=5, amplitude=0.35, clutter=0.3, noise=0.03,
                   distractors=1, margin=2) -> Dataset:
    """Class-conditional images: a class motif stamped on smooth clutter.

    Every class owns one random +-1 pattern of ``motif_size`` squared pixels.
    A sample is mid-grey plus a smooth clutter field and pixel noise, with
    its class motif and ``distractors`` motifs from a shared decoy bank
    added at random positions (kept ``margin`` pixels from the border) with
    random positive per-channel colour at ``amplitude``. The image is then
    pulled toward mid-grey by ``contrast`` and clamped to [0, 1].

    ``contrast`` sets how much pixel budget separates classes, and with it
    how hard a fixed-epsilon attack is; motifs depend only on ``rng_seed``,
    so train and test splits share them.
    """
    c, h, w = shape
    if num_classes < 1 or samples_per_class < 0 or min(shape) < 1:
        raise ConfigError("num_classes, samples_per_class and shape must be positive")
    hi_y, hi_x = h - motif_size - margin, w - motif_size - margin
    if margin < 0 or hi_y < margin or hi_x < margin:
        raise ConfigError(f"motif_size {motif_size} with margin {margin} does not fit in {h}x{w}")
    decoys = 8
    bank = (T.make_rng(rng_seed).random((num_classes + decoys, motif_size, motif_size)) < 0.5) * 2.0 - 1.0
    split_key = {"train": 0, "test": 1}.get(split, 2 + sum(split.encode()))
    rng = T.derive_rng(rng_seed, split_key)
    n = num_classes * samples_per_class
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    images = np.empty((n,) + tuple(shape), dtype=np.float64)
    for i in range(n):
        img = 0.5 + clutter * (_smooth_field(rng, shape, 4) - 0.5) + noise * rng.standard_normal(shape)
        picks = [labels[i], *(num_classes + rng.integers(0, decoys, size=distractors))]
        for m in picks:
            y0, x0 = rng.integers(margin, hi_y + 1), rng.integers(margin, hi_x + 1)
            colour = rng.uniform(0.5, 1.0, size=c)
            img[:, y0:y0 + motif_size, x0:x0 + motif_size] += amplitude * colour[:, None, None] * bank[m][None]
        images[i] = 0.5 + contrast * (img - 0.5)
    order = rng.permutation(n)
    return Dataset(np.clip(images[order], 0.0, 1.0), labels[order], num_classes, split)
