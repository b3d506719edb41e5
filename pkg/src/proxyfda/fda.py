"""Feature distribution alignment loss, the combined objective and the feature-L2 baseline."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import numerics as nx
from .graph import FeatureBatch, NeighborGraph
from .numerics import Parameter, Tensor

__all__ = ["LossScalars", "Objective", "REGULARIZERS", "sigmoid_pair_loss", "fda_loss",
           "fda_loss_batch", "pointwise_l2_loss", "pointwise_l2_per_sample", "combined_objective"]

REGULARIZERS = ("none", "pointwise-l2", "fda", "proxy-fda")


class LossScalars:
    """Learnable temperature and bias shared by every sigmoid-style loss in a run.

    The temperature is stored as ``t`` with ``tau = exp(-t)`` so it stays positive;
    ``inv_tau`` is the differentiable ``exp(t)``.
    """

    def __init__(self, inv_tau: float = 10.0, bias: float = 10.0):
        if inv_tau <= 0:
            raise ValueError("inverse temperature must be positive")
        self.t = Parameter(np.array(math.log(inv_tau)), name="log_inv_tau")
        self.b = Parameter(np.array(float(bias)), name="bias")

    @property
    def params(self) -> list[Parameter]:
        return [self.t, self.b]

    @property
    def tau(self) -> float:
        return float(np.exp(-self.t.value))

    @property
    def inv_tau(self) -> Tensor:
        return nx.exp(self.t)

    def values(self) -> tuple[float, float]:
        """(1/tau, b) as plain floats; 1/tau may be inf after a diverged update."""
        with np.errstate(over="ignore"):
            return float(np.exp(self.t.value)), float(self.b.value)


@dataclass(frozen=True)
class Objective:
    lam: float = 1.0
    regularizer: Literal["none", "pointwise-l2", "fda", "proxy-fda"] = "fda"

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.regularizer!r}")


def sigmoid_pair_loss(cos, weights, scalars: LossScalars) -> Tensor:
    """mean_j softplus(w_j * (-cos_j / tau + b)) over the last axis."""
    cos = nx.as_tensor(cos)
    z = nx.mul(weights, nx.add(nx.neg(nx.mul(cos, scalars.inv_tau)), scalars.b))
    return nx.mean(nx.softplus(z), axis=-1)


def fda_loss(anchor: int, finetuned: FeatureBatch, graph: NeighborGraph, scalars: LossScalars) -> Tensor:
    """Alignment loss of one anchor: neighbors weighted by +w, the rest by -w."""
    if finetuned.size != graph.size:
        raise ValueError(f"batch has {finetuned.size} columns, graph expects {graph.size}")
    x = nx.as_tensor(finetuned.features)
    others = np.concatenate([graph.neighbors[anchor], graph.non_neighbors[anchor]])
    w = np.concatenate([graph.w_pos[anchor], -graph.w_neg[anchor]])
    xi = nx.take(x, (slice(None), [anchor]))
    xo = nx.take(x, (slice(None), others))
    cos = nx.reshape(nx.cosine_matrix(xi, xo), (len(others),))
    return sigmoid_pair_loss(cos, w, scalars)


def fda_loss_batch(finetuned: FeatureBatch, graph: NeighborGraph, scalars: LossScalars) -> Tensor:
    """Per-anchor alignment losses for the whole batch, shape (B,)."""
    if finetuned.size != graph.size:
        raise ValueError(f"batch has {finetuned.size} columns, graph expects {graph.size}")
    b = graph.size
    x = nx.as_tensor(finetuned.features)
    cos = nx.cosine_matrix(x, x)
    w = graph.weight_matrix()
    off = 1.0 - np.eye(b)
    z = nx.mul(w, nx.add(nx.neg(nx.mul(cos, scalars.inv_tau)), scalars.b))
    return nx.mul(nx.tsum(nx.mul(nx.softplus(z), off), axis=1), 1.0 / (b - 1))


def pointwise_l2_per_sample(finetuned, pretrained) -> Tensor:
    """||x_i - x_hat_i||^2 per column."""
    x = nx.as_tensor(finetuned.features if isinstance(finetuned, FeatureBatch) else finetuned)
    xh = pretrained.values if isinstance(pretrained, FeatureBatch) else np.asarray(pretrained, dtype=np.float64)
    if x.shape != xh.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {xh.shape}")
    return nx.tsum(nx.square(nx.sub(x, xh)), axis=0)


def pointwise_l2_loss(finetuned, pretrained) -> Tensor:
    return nx.mean(pointwise_l2_per_sample(finetuned, pretrained))


def combined_objective(task_losses, reg_losses, obj: Objective) -> Tensor:
    """(1/B) sum_i (task_i + lambda * reg_i)."""
    task = nx.as_tensor(task_losses)
    if obj.regularizer == "none" or reg_losses is None:
        return nx.mean(task)
    reg = nx.as_tensor(reg_losses)
    if task.shape != reg.shape:
        raise ValueError(f"length mismatch: {task.shape} vs {reg.shape}")
    return nx.mean(nx.add(task, nx.mul(reg, obj.lam)))
