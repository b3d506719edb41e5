"""Small trainable encoders with a frozen pre-trained copy."""
from __future__ import annotations

import copy
import hashlib
import math

import numpy as np

from .. import numerics as nx
from ..graph import ConfigError
from ..numerics import Parameter, Tensor

__all__ = ["Encoder", "ENCODER_KINDS"]

ENCODER_KINDS = ("identity", "linear", "mlp")


class Encoder:
    """d -> d feature map.

    ``linear`` is ``W x + c`` starting at the identity. ``mlp`` is
    ``x + W2 tanh(W1 x + b1) + b2`` with a random first layer and a zero
    second layer, so it also starts at the identity while having a nonlinear
    path to fine-tune. With ``normalize`` the output is projected to the unit
    sphere.
    """

    def __init__(self, kind: str = "mlp", d: int = 32, hidden: int = 64, normalize: bool = True,
                 seed=0, gain: float = 1.0):
        if kind not in ENCODER_KINDS:
            raise ConfigError(f"unknown encoder kind {kind!r}; choose from {ENCODER_KINDS}")
        self.kind, self.d, self.hidden, self.normalize = kind, d, hidden, normalize
        rng = np.random.default_rng(seed)
        if kind == "identity":
            self.params: list[Parameter] = []
        elif kind == "linear":
            self.params = [Parameter(np.eye(d), name="enc.w"), Parameter(np.zeros((d, 1)), name="enc.c")]
        else:
            self.params = [
                Parameter(rng.normal(0.0, gain / math.sqrt(d), size=(hidden, d)), name="enc.w1"),
                Parameter(np.zeros((hidden, 1)), name="enc.b1"),
                Parameter(np.zeros((d, hidden)), name="enc.w2"),
                Parameter(np.zeros((d, 1)), name="enc.b2"),
            ]

    def forward(self, x) -> Tensor:
        """Differentiable features for the d x N input ``x``."""
        x = nx.as_tensor(x)
        if self.kind == "identity":
            out = x
        elif self.kind == "linear":
            w, c = self.params
            out = nx.add(nx.matmul(w, x), c)
        else:
            w1, b1, w2, b2 = self.params
            out = nx.add(x, nx.add(nx.matmul(w2, nx.tanh(nx.add(nx.matmul(w1, x), b1))), b2))
        return nx.l2_normalize(out, axis=0) if self.normalize else out

    def encode(self, x: np.ndarray) -> np.ndarray:
        return self.forward(np.asarray(x, dtype=np.float64)).value

    __call__ = encode

    def frozen_copy(self) -> "Encoder":
        """Independent snapshot whose parameters are excluded from training."""
        twin = copy.copy(self)
        twin.params = [Parameter(p.value, name=p.name, requires_grad=False) for p in self.params]
        return twin

    def digest(self) -> str:
        h = hashlib.sha256(self.kind.encode())
        for p in self.params:
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.value).tobytes())
        return h.hexdigest()
