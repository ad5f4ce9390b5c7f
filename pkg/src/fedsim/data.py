"""Synthetic datasets, Dirichlet non-IID splits and poisoning transforms."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    grid: Optional[tuple[int, int]] = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2 or x.shape[0] != y.size:
            raise ValueError(f"features {x.shape} do not match {y.size} labels")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(x)):
            raise ValueError("features contain NaN or Inf")
        if self.grid is not None and self.grid[0] * self.grid[1] != x.shape[1]:
            raise ValueError(f"grid {self.grid} does not match feature width {x.shape[1]}")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, features=self.features[idx], labels=self.labels[idx])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["label"] + [f"f{j}" for j in range(self.dim)])
            for label, row in zip(self.labels, self.features):
                writer.writerow([int(label)] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, n_classes: Optional[int] = None, grid=None) -> "Dataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader)]
            if not header or header[0] != "label":
                raise ValueError(f"{path}: first column must be 'label'")
            rows = [r for r in reader if r]
        labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
        features = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)
        features = features.reshape(len(rows), len(header) - 1)
        if n_classes is None:
            n_classes = int(labels.max()) + 1 if labels.size else 1
        return cls(features, labels, n_classes, grid)


@dataclass(frozen=True)
class TriggerSpec:
    """A rectangular patch stamped in the bottom-right corner of the feature grid."""

    patch_rows: int = 5
    patch_cols: int = 5
    patch_value: Optional[float] = None
    target_label: int = 0

    def resolved(self, dataset: Dataset) -> "TriggerSpec":
        """Fill in ``patch_value`` from the dataset maximum when unset."""
        if self.patch_value is not None:
            return self
        return replace(self, patch_value=float(dataset.features.max()))


@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int
    beta: float
    seed: int

    def __post_init__(self):
        if self.n_clients < 2:
            raise ValueError("a partition needs at least 2 clients")
        if not self.beta > 0:
            raise ValueError("beta must be positive")


def make_blobs(classes: int, dim: int, per_class: int, spread: float, seed: int,
               scale: float = 1.0, grid=None, layout: str = "stripes") -> Dataset:
    """Gaussian blobs around one-hot-like centres.

    ``layout="stripes"`` centres class ``c`` on ``scale`` times the indicator
    of coordinates ``j % classes == c``. ``layout="top"`` gives each class a
    contiguous block inside the first half of the features, so the second
    half (the bottom rows of a square grid) carries noise only. Rows are
    shuffled with the seed.
    """
    if classes < 2 or dim < 2:
        raise ValueError("need at least 2 classes and 2 dimensions")
    rng = np.random.default_rng(seed)
    centers = np.zeros((classes, dim))
    if layout == "stripes":
        for c in range(classes):
            centers[c, np.arange(dim) % classes == c] = scale
    elif layout == "top":
        width = dim // (2 * classes)
        if width < 1:
            raise ValueError(f"dim {dim} too small for a top layout with {classes} classes")
        for c in range(classes):
            centers[c, c * width:(c + 1) * width] = scale
    else:
        raise ValueError(f"unknown blob layout {layout!r}")
    labels = np.repeat(np.arange(classes), per_class)
    features = centers[labels] + spread * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    if grid is None:
        side = math.isqrt(dim)
        grid = (side, side) if side * side == dim else None
    return Dataset(features[order], labels[order], classes, grid)


def dirichlet_partition(dataset: Dataset, spec: PartitionSpec) -> list[list[int]]:
    """Split each class across clients with Dir(beta) proportions.

    Every index ends up with exactly one client. Clients that end up with no
    data receive one sample from the currently largest client.
    """
    rng = np.random.default_rng(spec.seed)
    buckets: list[list[int]] = [[] for _ in range(spec.n_clients)]
    for c in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        q = rng.dirichlet(np.full(spec.n_clients, spec.beta))
        cuts = (np.cumsum(q)[:-1] * idx.size).astype(np.int64)
        for client, part in enumerate(np.split(idx, cuts)):
            buckets[client].extend(part.tolist())
    for client in range(spec.n_clients):
        if not buckets[client]:
            donor = max(range(spec.n_clients), key=lambda k: (len(buckets[k]), -k))
            if len(buckets[donor]) < 2:
                raise ValueError("not enough samples to give every client one")
            buckets[client].append(buckets[donor].pop())
    return [sorted(b) for b in buckets]


def _poison_rows(n: int, gamma_p: float, rng) -> np.ndarray:
    if not 0.0 <= gamma_p <= 1.0:
        raise ValueError(f"gamma_p must lie in [0, 1], got {gamma_p}")
    count = math.floor(gamma_p * n)
    return np.sort(rng.choice(n, size=count, replace=False))


def poison_label_flip(dataset: Dataset, gamma_p: float, seed) -> Dataset:
    """Resample the labels of a random ``floor(gamma_p * n)`` rows to a different class."""
    rng = np.random.default_rng(seed)
    rows = _poison_rows(len(dataset), gamma_p, rng)
    labels = dataset.labels.copy()
    if rows.size:
        shift = rng.integers(1, dataset.n_classes, size=rows.size)
        labels[rows] = (labels[rows] + shift) % dataset.n_classes
    return replace(dataset, labels=labels)


def trigger_coords(grid: tuple[int, int], trigger: TriggerSpec) -> np.ndarray:
    """Flat feature indices covered by the bottom-right patch."""
    if grid is None:
        raise ValueError("dataset has no grid layout for a trigger patch")
    h, w = grid
    if trigger.patch_rows > h or trigger.patch_cols > w or min(trigger.patch_rows, trigger.patch_cols) < 1:
        raise ValueError(f"{trigger.patch_rows}x{trigger.patch_cols} patch does not fit a {h}x{w} grid")
    rows = np.arange(h - trigger.patch_rows, h)
    cols = np.arange(w - trigger.patch_cols, w)
    return (rows[:, None] * w + cols[None, :]).reshape(-1)


def apply_trigger(features, trigger: TriggerSpec, grid: tuple[int, int]) -> np.ndarray:
    if trigger.patch_value is None:
        raise ValueError("trigger patch_value is unresolved")
    out = np.array(features, dtype=np.float64, copy=True)
    out[:, trigger_coords(grid, trigger)] = trigger.patch_value
    return out


def poison_backdoor(dataset: Dataset, gamma_p: float, trigger: TriggerSpec, seed) -> Dataset:
    """Stamp the trigger on ``floor(gamma_p * n)`` random rows and relabel them in place."""
    trigger = trigger.resolved(dataset)
    if not 0 <= trigger.target_label < dataset.n_classes:
        raise ValueError("trigger target label out of range")
    coords = trigger_coords(dataset.grid, trigger)
    rng = np.random.default_rng(seed)
    rows = _poison_rows(len(dataset), gamma_p, rng)
    features = dataset.features.copy()
    labels = dataset.labels.copy()
    features[np.ix_(rows, coords)] = trigger.patch_value
    labels[rows] = trigger.target_label
    return replace(dataset, features=features, labels=labels)

