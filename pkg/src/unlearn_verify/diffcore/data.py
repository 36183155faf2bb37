"""Datasets of feature vectors in [0,1]^d with integer class labels.

A `Dataset` is an immutable, stably-indexed table of examples. Mutating
operations (`without`, `replace_features`) return new datasets. CSV files
carry d float feature columns followed by one integer label column.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LabeledExample:
    """One (features, label) pair. Features are finite floats in [0, 1]."""

    features: np.ndarray
    label: int

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        if feats.ndim != 1:
            raise ValueError(f"features must be a 1-D vector, got shape {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features must be finite")
        if feats.size and (feats.min() < 0.0 or feats.max() > 1.0):
            raise ValueError("features must lie in [0, 1]")
        if int(self.label) < 0:
            raise ValueError(f"label must be non-negative, got {self.label}")
        feats.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "label", int(self.label))


class Dataset:
    """Ordered collection of labeled examples with fixed d and class count."""

    def __init__(self, features: np.ndarray, labels: np.ndarray, n_classes: int):
        features = np.ascontiguousarray(features, dtype=np.float64)
        labels = np.ascontiguousarray(labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {features.shape}")
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise ValueError("labels must be 1-D and match the number of rows")
        if n_classes < 1:
            raise ValueError(f"n_classes must be positive, got {n_classes}")
        if features.size and not np.all(np.isfinite(features)):
            raise ValueError("features must be finite")
        if features.size and (features.min() < 0.0 or features.max() > 1.0):
            raise ValueError("features must lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise ValueError(f"labels must lie in [0, {n_classes})")
        features.flags.writeable = False
        labels.flags.writeable = False
        self._features = features
        self._labels = labels
        self._n_classes = int(n_classes)

    @property
    def features(self) -> np.ndarray:
        return self._features

    @property
    def labels(self) -> np.ndarray:
        return self._labels

    @property
    def n_classes(self) -> int:
        return self._n_classes

    @property
    def d(self) -> int:
        return self._features.shape[1]

    def __len__(self) -> int:
        return self._features.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self._n_classes == other._n_classes
            and self._features.shape == other._features.shape
            and np.array_equal(self._features, other._features)
            and np.array_equal(self._labels, other._labels)
        )

    def example(self, i: int) -> LabeledExample:
        return LabeledExample(self._features[i], int(self._labels[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self.example(i)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self._features[idx], self._labels[idx], self._n_classes)

    def without(self, indices) -> "Dataset":
        """New dataset with the given rows removed; remaining order preserved."""
        idx = np.asarray(sorted(set(int(i) for i in indices)), dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= len(self)):
            raise IndexError(f"index out of range for dataset of size {len(self)}")
        keep = np.ones(len(self), dtype=bool)
        keep[idx] = False
        return Dataset(self._features[keep], self._labels[keep], self._n_classes)

    def replace_features(self, indices, new_features: np.ndarray) -> "Dataset":
        """New dataset with rows at `indices` swapped for `new_features`. Labels untouched."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= len(self)):
            raise IndexError(f"index out of range for dataset of size {len(self)}")
        feats = self._features.copy()
        feats[idx] = new_features
        return Dataset(feats, self._labels, self._n_classes)

    # -- CSV interchange ------------------------------------------------

    @classmethod
    def from_csv(cls, path, n_classes: int | None = None, skip_header: bool = False) -> "Dataset":
        raw = np.loadtxt(path, delimiter=",", skiprows=1 if skip_header else 0, ndmin=2)
        if raw.shape[1] < 2:
            raise ValueError("CSV needs at least one feature column and one label column")
        features = raw[:, :-1]
        labels_f = raw[:, -1]
        if not np.allclose(labels_f, np.round(labels_f)):
            raise ValueError("label column must hold integers")
        labels = labels_f.astype(np.int64)
        if n_classes is None:
            n_classes = int(labels.max()) + 1 if labels.size else 1
        return cls(features, labels, n_classes)

    def to_csv(self, path) -> None:
        table = np.column_stack([self._features, self._labels.astype(np.float64)])
        fmt = ["%.17g"] * self.d + ["%d"]
        np.savetxt(path, table, delimiter=",", fmt=fmt)

    def describe(self) -> str:
        return json.dumps({"n": len(self), "d": self.d, "n_classes": self._n_classes})


def make_blobs(
    n: int,
    d: int,
    n_classes: int,
    spread: float = 0.15,
    seed: int = 0,
    center_low: float = 0.2,
    center_high: float = 0.8,
) -> Dataset:
    """Gaussian clusters in [0,1]^d, one per class, balanced and interleaved.

    Cluster centers are drawn uniformly in [center_low, center_high]^d and
    samples are clipped back into the unit box.
    """
    if n < 1 or d < 1 or n_classes < 1:
        raise ValueError("n, d and n_classes must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(center_low, center_high, size=(n_classes, d))
    labels = np.arange(n, dtype=np.int64) % n_classes
    features = centers[labels] + rng.normal(0.0, spread, size=(n, d))
    return Dataset(np.clip(features, 0.0, 1.0), labels, n_classes)


def make_rings(
    n: int,
    seed: int = 0,
    inner_radius: float = 0.12,
    outer_radius: float = 0.30,
    width: float = 0.04,
    noise: float = 0.01,
) -> Dataset:
    """Two concentric annuli in [0,1]^2, centered at (0.5, 0.5).

    Not linearly separable; exercises the MLP path.
    """
    if n < 2:
        raise ValueError("need at least 2 samples")
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % 2
    radii = np.where(labels == 0, inner_radius, outer_radius) + rng.uniform(-width, width, n)
    angles = rng.uniform(0.0, 2.0 * np.pi, n)
    xy = 0.5 + np.column_stack([radii * np.cos(angles), radii * np.sin(angles)])
    xy += rng.normal(0.0, noise, size=xy.shape)
    return Dataset(np.clip(xy, 0.0, 1.0), labels, 2)
