"""Class-balanced batch sampling with greedy hard class mining."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _backend
from .dataset import LabeledFeatureSet
from .fda import LossScalars
from .graph import ConfigError, FeatureBatch, cosine_similarity_matrix

__all__ = ["BatchSpec", "CandidatePool", "MinedBatch", "augment_few_shot", "sample_candidates",
           "hard_mine_batch", "random_class_batch"]

Encoder = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class BatchSpec:
    """``m`` classes x ``n`` samples per batch, mined from ``C`` candidate classes."""

    m: int = 16
    n: int = 4
    C: int | None = None

    def __post_init__(self):
        if self.C is None:
            object.__setattr__(self, "C", 4 * self.m)
        if self.m < 2:
            raise ConfigError("need m >= 2 classes per batch")
        if self.n < 1:
            raise ConfigError("need n >= 1 samples per class")
        if self.C < self.m:
            raise ConfigError(f"candidate pool C={self.C} smaller than m={self.m}")

    @property
    def B(self) -> int:
        return self.m * self.n


@dataclass
class CandidatePool:
    """C classes x n samples, laid out class-major (class ``c`` owns columns c*n .. c*n+n-1)."""

    classes: np.ndarray
    n: int
    inputs: np.ndarray
    pretrained: np.ndarray
    finetuned: np.ndarray
    sample_ids: np.ndarray
    padded: np.ndarray

    @property
    def C(self) -> int:
        return len(self.classes)

    def columns(self, pool_index) -> np.ndarray:
        pool_index = np.atleast_1d(pool_index)
        return (pool_index[:, None] * self.n + np.arange(self.n)).ravel()


@dataclass
class MinedBatch:
    pretrained: FeatureBatch
    finetuned: FeatureBatch
    inputs: np.ndarray
    classes: np.ndarray
    pool_index: np.ndarray
    trace: list = field(default_factory=list)


def augment_few_shot(samples: np.ndarray, n: int, sigma: float | None = None, rng=None) -> np.ndarray:
    """Pad ``samples`` (d x s) to exactly ``n`` columns with jittered copies.

    Copies cycle through the originals. If every input column is unit-norm the
    padded columns are renormalized. ``sigma`` defaults to 5% of the mean norm.
    """
    samples = np.asarray(samples, dtype=np.float64)
    s = samples.shape[1]
    if s < 1:
        raise ValueError("need at least one sample to augment")
    if s >= n:
        return samples[:, :n].copy()
    rng = np.random.default_rng(rng)
    norms = np.linalg.norm(samples, axis=0)
    if sigma is None:
        sigma = 0.05 * float(norms.mean())
    src = samples[:, np.arange(n - s) % s]
    if sigma == 0:
        return np.concatenate([samples, src], axis=1)
    extra = src + sigma * rng.standard_normal(src.shape)
    if np.all(np.abs(norms - 1.0) <= 1e-9):
        extra = extra / np.linalg.norm(extra, axis=0)
    return np.concatenate([samples, extra], axis=1)


def sample_candidates(dataset: LabeledFeatureSet, spec: BatchSpec, seed=None,
                      encoders: tuple[Encoder, Encoder] | None = None,
                      sigma_aug: float | None = None) -> CandidatePool:
    """Draw ``spec.C`` distinct classes and ``spec.n`` samples from each.

    ``encoders`` is ``(pretrained, finetuned)``; without it the dataset's
    features serve as both views.
    """
    rng = np.random.default_rng(seed)
    classes = dataset.classes
    if len(classes) < spec.C:
        raise ConfigError(f"dataset has {len(classes)} classes but C={spec.C}; lower C")
    chosen = np.sort(rng.choice(classes, size=spec.C, replace=False))
    blocks, ids, padded = [], [], []
    for c in chosen:
        idx = np.flatnonzero(dataset.labels == c)
        take = np.sort(rng.choice(idx, size=min(spec.n, idx.size), replace=False))
        cols = augment_few_shot(dataset.features[:, take], spec.n, sigma_aug, rng)
        blocks.append(cols)
        ids.append(np.concatenate([take, np.full(spec.n - take.size, -1)]))
        padded.append(spec.n - take.size)
    inputs = np.concatenate(blocks, axis=1)
    if encoders is None:
        pre, fin = inputs, inputs.copy()
    else:
        pre, fin = encoders[0](inputs), encoders[1](inputs)
    return CandidatePool(chosen, spec.n, inputs, pre, fin, np.concatenate(ids), np.asarray(padded))


def _assemble(pool: CandidatePool, order: list[int], trace: list) -> MinedBatch:
    order = np.asarray(order)
    cols = pool.columns(order)
    labels = np.repeat(pool.classes[order], pool.n)
    ids = pool.sample_ids[cols]
    return MinedBatch(
        pretrained=FeatureBatch(pool.pretrained[:, cols], labels, "pretrained", ids),
        finetuned=FeatureBatch(pool.finetuned[:, cols], labels, "finetuned", ids),
        inputs=pool.inputs[:, cols],
        classes=pool.classes[order],
        pool_index=order,
        trace=trace,
    )


def hard_mine_batch(pool: CandidatePool, spec: BatchSpec, scalars: LossScalars, rng=None) -> MinedBatch:
    """Seed with a random class, then repeatedly add the class with the largest class-wise loss.

    The loss is the alignment loss of the candidate's samples inside the trial
    batch (selected classes + candidate) with K = n, evaluated on pre-trained
    embeddings only. Ties go to the lower pool index.
    """
    if spec.m > pool.C:
        raise ConfigError(f"pool has {pool.C} classes, cannot mine m={spec.m}")
    if pool.n < 2:
        raise ConfigError("hard mining needs n >= 2 (K = n must leave at least one non-neighbor)")
    rng = np.random.default_rng(rng)
    sim = cosine_similarity_matrix(pool.pretrained)
    inv_tau, bias = scalars.values()
    selected = [int(rng.integers(pool.C))]
    trace = []
    while len(selected) < spec.m:
        cands = np.array([c for c in range(pool.C) if c not in selected], dtype=np.int64)
        scores = _backend.mining_scores(sim, np.asarray(selected, dtype=np.int64), cands, pool.n, pool.n,
                                        inv_tau, bias)
        pick = int(cands[int(np.argmax(scores))])
        trace.append({"selected": list(selected), "candidates": cands.tolist(),
                      "scores": scores.tolist(), "chosen": pick})
        selected.append(pick)
    return _assemble(pool, selected, trace)


def random_class_batch(pool: CandidatePool, spec: BatchSpec, rng=None) -> MinedBatch:
    """Uniform class selection; the control for hard mining."""
    rng = np.random.default_rng(rng)
    order = rng.choice(pool.C, size=spec.m, replace=False)
    return _assemble(pool, [int(c) for c in order], [])
