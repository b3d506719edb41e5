"""In-batch kNN graphs built on pre-trained features and transferred to fine-tuned ones."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .numerics import DegenerateInputError, Tensor, as_tensor, take

__all__ = ["ConfigError", "FeatureBatch", "NeighborGraph", "cosine_similarity_matrix",
           "build_neighbor_graph", "split_by_graph"]


class ConfigError(ValueError):
    """Invalid hyper-parameter or configuration value."""


@dataclass
class FeatureBatch:
    """A d x B block of embeddings, one sample per column."""

    features: np.ndarray | Tensor
    labels: np.ndarray
    origin: Literal["pretrained", "finetuned"] = "pretrained"
    sample_ids: np.ndarray | None = None

    def __post_init__(self):
        vals = self.features.value if isinstance(self.features, Tensor) else np.asarray(self.features, dtype=np.float64)
        if not isinstance(self.features, Tensor):
            self.features = vals
        if vals.ndim != 2:
            raise ValueError(f"features must be d x B, got shape {vals.shape}")
        if vals.shape[1] < 2:
            raise ValueError("a batch needs at least two columns")
        if not np.all(np.isfinite(vals)):
            raise ValueError("features contain non-finite values")
        if np.any(np.linalg.norm(vals, axis=0) == 0.0):
            raise DegenerateInputError("batch contains a zero-norm column")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (vals.shape[1],):
            raise ValueError("one label per column required")
        if self.sample_ids is None:
            self.sample_ids = np.arange(vals.shape[1])
        if self.origin not in ("pretrained", "finetuned"):
            raise ValueError(f"unknown origin {self.origin!r}")

    @property
    def values(self) -> np.ndarray:
        return self.features.value if isinstance(self.features, Tensor) else self.features

    @property
    def d(self) -> int:
        return self.values.shape[0]

    @property
    def size(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class NeighborGraph:
    """Per-anchor neighbor / non-neighbor indices and pre-trained similarities.

    Row ``i`` of ``neighbors`` holds R_i in ascending column order, with the
    matching similarities in ``w_pos``; ``non_neighbors``/``w_neg`` hold every
    other column except ``i``, also ascending.
    """

    k: int
    neighbors: np.ndarray
    w_pos: np.ndarray
    non_neighbors: np.ndarray
    w_neg: np.ndarray
    similarity: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.neighbors.shape[0]

    def weight_matrix(self) -> np.ndarray:
        """B x B signed weights: +w for neighbors, -w for the rest, 0 on the diagonal."""
        b = self.size
        w = np.zeros((b, b))
        rows = np.arange(b)[:, None]
        w[rows, self.neighbors] = self.w_pos
        w[rows, self.non_neighbors] = -self.w_neg
        return w


def cosine_similarity_matrix(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=0)
    if np.any(norm == 0.0):
        raise DegenerateInputError("zero-norm column")
    u = x / norm
    return u.T @ u


def knn_indices(sim: np.ndarray, k: int) -> np.ndarray:
    """Top-k columns per row, self excluded, ties to the lower index; rows sorted ascending."""
    b = sim.shape[0]
    s = sim.copy()
    np.fill_diagonal(s, -np.inf)
    order = np.argsort(-s, axis=1, kind="stable")[:, :k]
    return np.sort(order, axis=1)


def build_neighbor_graph(batch: FeatureBatch, k: int) -> NeighborGraph:
    b = batch.size
    if not 1 <= k <= b - 2:
        raise ConfigError(f"neighborhood size K={k} must satisfy 1 <= K <= B-2 = {b - 2}")
    sim = cosine_similarity_matrix(batch.values)
    nbr = knn_indices(sim, k)
    member = np.zeros((b, b), dtype=bool)
    member[np.arange(b)[:, None], nbr] = True
    np.fill_diagonal(member, True)
    rest = np.nonzero(~member)[1].reshape(b, b - k - 1)
    rows = np.arange(b)[:, None]
    return NeighborGraph(
        k=k,
        neighbors=nbr,
        w_pos=sim[rows, nbr],
        non_neighbors=rest,
        w_neg=sim[rows, rest],
        similarity=sim,
    )


def split_by_graph(batch: FeatureBatch, graph: NeighborGraph, anchor: int) -> tuple[Tensor, Tensor]:
    """Fine-tuned columns at R_anchor and at the remaining non-anchor columns."""
    if batch.size != graph.size:
        raise ValueError(f"batch has {batch.size} columns but graph was built for {graph.size}")
    if not 0 <= anchor < graph.size:
        raise IndexError(f"anchor {anchor} out of range")
    x = as_tensor(batch.features)
    return take(x, (slice(None), graph.neighbors[anchor])), take(x, (slice(None), graph.non_neighbors[anchor]))
