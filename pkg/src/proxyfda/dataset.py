"""Labeled feature sets: the unit that probing, OTDD and the dump files work on."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LabeledFeatureSet:
    """``features`` is d x N (one sample per column); ``labels`` has length N."""

    features: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be d x N, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[1],):
            raise ValueError("need exactly one label per column")
        if self.features.shape[1] < 1:
            raise ValueError("a feature set needs at least one sample")
        if np.any(self.labels < 0):
            raise ValueError("labels must be non-negative")

    @property
    def d(self) -> int:
        return self.features.shape[0]

    @property
    def size(self) -> int:
        return self.features.shape[1]

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def subset(self, index, name: str | None = None) -> "LabeledFeatureSet":
        return LabeledFeatureSet(self.features[:, index], self.labels[index], self.name if name is None else name)

    def with_features(self, features: np.ndarray, name: str | None = None) -> "LabeledFeatureSet":
        return LabeledFeatureSet(features, self.labels.copy(), self.name if name is None else name)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledFeatureSet):
            return NotImplemented
        return (self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))
