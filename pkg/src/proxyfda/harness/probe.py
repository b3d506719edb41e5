"""Linear probing: multinomial logistic regression on frozen features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from ..dataset import LabeledFeatureSet

__all__ = ["ProbeConfig", "ProbeHead", "ProbeError", "linear_probe", "train_probe", "delta_lp"]


class ProbeError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeConfig:
    l2: float = 1e-2
    tol: float = 1e-6
    max_epochs: int = 2000
    seed: int = 0


@dataclass
class ProbeHead:
    """``logits = weight @ x + bias``; row ``r`` scores class ``classes[r]``."""

    weight: np.ndarray
    bias: np.ndarray
    classes: np.ndarray
    epochs: int = 0
    grad_norm: float = 0.0

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.weight @ features + self.bias[:, None], axis=0)]

    def accuracy(self, fs: LabeledFeatureSet) -> float:
        return float(np.mean(self.predict(fs.features) == fs.labels))


def train_probe(train: LabeledFeatureSet, config: ProbeConfig = ProbeConfig()) -> ProbeHead:
    """Full-batch accelerated gradient descent with step 1/L on the L2-regularized cross-entropy.

    Starts from zero weights, so ``config.seed`` only matters for API symmetry:
    the result is a deterministic function of the data.
    """
    classes, y = np.unique(train.labels, return_inverse=True)
    x = np.vstack([train.features, np.ones((1, train.size))])
    n, c = train.size, len(classes)
    onehot = np.zeros((c, n))
    onehot[y, np.arange(n)] = 1.0
    lip = 0.5 * np.linalg.norm(x, 2) ** 2 / n + config.l2
    step = 1.0 / lip
    reg = np.ones_like(x[:, :1].T)
    reg[0, -1] = 0.0  # bias is not penalized

    def grad(w):
        p = softmax(w @ x, axis=0)
        return (p - onehot) @ x.T / n + config.l2 * w * reg

    w = np.zeros((c, x.shape[0]))
    z = w.copy()
    t = 1.0
    g_norm = np.inf
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        g = grad(z)
        w_next = z - step * g
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        z = w_next + ((t - 1.0) / t_next) * (w_next - w)
        w, t = w_next, t_next
        if epoch % 10 == 0:
            g_norm = float(np.linalg.norm(grad(w)))
            if g_norm <= config.tol:
                break
    return ProbeHead(w[:, :-1].copy(), w[:, -1].copy(), classes, epoch, g_norm)


def probe_loss(head: ProbeHead, fs: LabeledFeatureSet) -> float:
    idx = np.searchsorted(head.classes, fs.labels)
    return float(-log_softmax(head.weight @ fs.features + head.bias[:, None], axis=0)[idx, np.arange(fs.size)].mean())


def linear_probe(train: LabeledFeatureSet, test: LabeledFeatureSet,
                 config: ProbeConfig = ProbeConfig()) -> tuple[ProbeHead, float]:
    """Fit on ``train``; return the head and its accuracy on ``test``."""
    missing = np.setdiff1d(test.classes, train.classes)
    if missing.size:
        raise ProbeError(f"classes {missing.tolist()} appear in the test set but not in training")
    head = train_probe(train, config)
    return head, head.accuracy(test)


def delta_lp(pretrained_acc: float, finetuned_acc: float) -> float:
    """Change in probe accuracy; negative means forgetting."""
    for a in (pretrained_acc, finetuned_acc):
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"accuracy {a} outside [0, 1]")
    return finetuned_acc - pretrained_acc
