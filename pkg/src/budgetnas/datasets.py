"""Hermetic toy datasets: generated on the fly or loaded from the shipped asset."""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.x)

    def subset(self, idx):
        return Dataset(self.x[idx], self.y[idx])

    def batches(self, batch_size, rng=None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.x[idx], self.y[idx]

    def split(self, fraction, seed=0):
        """Random (first, second) split with ``fraction`` of the examples in the first part."""
        order = np.random.default_rng(seed).permutation(len(self))
        cut = int(round(fraction * len(self)))
        return self.subset(np.sort(order[:cut])), self.subset(np.sort(order[cut:]))


def two_moons(n=400, noise=0.1, seed=0, dim=2) -> Dataset:
    """Two interleaving half circles; extra dims (``dim > 2``) are pure noise."""
    rng = np.random.default_rng(seed)
    n0 = n // 2
    t0 = rng.uniform(0, np.pi, n0)
    t1 = rng.uniform(0, np.pi, n - n0)
    a = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    b = np.stack([1 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([a, b]) + rng.normal(0, noise, (n, 2))
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    if dim > 2:
        x = np.concatenate([x, rng.normal(0, 1, (n, dim - 2))], axis=1)
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n - n0, dtype=np.int64)])
    order = rng.permutation(n)
    return Dataset(x[order].astype(np.float32), y[order])


def digits(flatten=False, classes=None) -> Dataset:
    """1797 8x8 grey-level digit images scaled to [-1, 1], shape (1, 8, 8) per image."""
    with resources.files("budgetnas").joinpath("data/digits8x8.npz").open("rb") as f:
        data = np.load(f)
        images, labels = data["images"].astype(np.float32), data["labels"].astype(np.int64)
    x = images / 8.0 - 1.0
    if classes is not None:
        keep = np.isin(labels, classes)
        x, labels = x[keep], np.searchsorted(np.sort(classes), labels[keep])
    x = x.reshape(len(x), 64) if flatten else x[:, None, :, :]
    return Dataset(np.ascontiguousarray(x), labels)


def load_dataset(name, seed=0, **kwargs) -> Dataset:
    if name == "two_moons":
        return two_moons(seed=seed, **kwargs)
    if name == "digits":
        return digits(**kwargs)
    raise ValueError(f"unknown dataset {name!r}")
