"""Instance-wise proxy generation and the proxy-augmented alignment loss.

All functions accept either one anchor (``X`` of shape d x K) or a stack of
anchors (A x d x K). The stacked form is what the training loop uses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .fda import LossScalars
from .graph import ConfigError, FeatureBatch, NeighborGraph
from .numerics import Parameter, Tensor

__all__ = ["proxy_counts", "ProxyGenerator", "ProxySet", "generate_proxies", "variance_loss",
           "proxy_side_losses", "proxy_training_loss", "proxy_fda_loss", "proxy_fda_loss_batch",
           "gather_sets", "proxy_regularizer", "diversity", "DiversityTracker"]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def proxy_counts(k: int, batch_size: int, s: float) -> tuple[int, int]:
    """(n_pos, n_neg) = round(s*K), round(s*(B-K-1)), each at least 1."""
    return max(1, _round_half_up(s * k)), max(1, _round_half_up(s * (batch_size - k - 1)))


class ProxyGenerator:
    """One masked attention layer followed by two pointwise-conv pooling heads."""

    def __init__(self, d: int, n_pos: int, n_neg: int, attn_dim: int = 16, hidden: int = 32,
                 seed: int = 0):
        if n_pos < 1 or n_neg < 1:
            raise ConfigError("proxy counts must be >= 1")
        rng = np.random.default_rng(seed)
        self.d, self.n_pos, self.n_neg = d, n_pos, n_neg
        self.attn_dim, self.hidden = attn_dim, hidden

        def init(name, rows, cols):
            return Parameter(rng.normal(0.0, 1.0 / math.sqrt(cols), size=(rows, cols)), name=name)

        self.wq = init("gen.wq", attn_dim, d)
        self.wk = init("gen.wk", attn_dim, d)
        self.wv = init("gen.wv", attn_dim, d)
        self.wo = init("gen.wo", d, attn_dim)
        self.heads = {}
        for side, n_out in (("pos", n_pos), ("neg", n_neg)):
            self.heads[side] = (
                init(f"gen.{side}.w1", hidden, d),
                Parameter(np.zeros((hidden, 1)), name=f"gen.{side}.b1"),
                init(f"gen.{side}.w2", n_out, hidden),
            )

    @property
    def params(self) -> list[Parameter]:
        out = [self.wq, self.wk, self.wv, self.wo]
        for side in ("pos", "neg"):
            out.extend(self.heads[side])
        return out

    def num_parameters(self) -> int:
        return int(sum(p.value.size for p in self.params))

    def attend(self, xpos, xneg) -> tuple[Tensor, Tensor]:
        """Masked self-attention over [X+, X-] with a residual connection."""
        k = xpos.shape[-1]
        tokens = nx.concat([xpos, xneg], axis=-1)
        t = tokens.shape[-1]
        q = nx.matmul(self.wq, tokens)
        key = nx.matmul(self.wk, tokens)
        v = nx.matmul(self.wv, tokens)
        scores = nx.mul(nx.matmul(nx.swap(q), key), 1.0 / math.sqrt(self.attn_dim))
        block = np.zeros((t, t), dtype=bool)
        block[:k, :k] = True
        block[k:, k:] = True
        attn = nx.softmax(scores, axis=-1, mask=np.broadcast_to(block, scores.shape))
        mixed = nx.add(tokens, nx.matmul(self.wo, nx.matmul(v, nx.swap(attn))))
        sl = [slice(None)] * mixed.ndim
        sl[-1] = slice(0, k)
        pos = nx.take(mixed, tuple(sl))
        sl[-1] = slice(k, t)
        return pos, nx.take(mixed, tuple(sl))

    def pool_weights(self, xdot: Tensor, side: str) -> Tensor:
        """Softmax-over-tokens pooling weights, shape (..., n_out, tokens).

        The second layer has no bias: a per-row constant cancels in the softmax.
        """
        w1, b1, w2 = self.heads[side]
        h = nx.tanh(nx.add(nx.matmul(w1, xdot), b1))
        return nx.softmax(nx.matmul(w2, h), axis=-1)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.params}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.params:
            if state[p.name].shape != p.shape:
                raise ValueError(f"shape mismatch for {p.name}")
            p.value = np.array(state[p.name], dtype=np.float64)


@dataclass
class ProxySet:
    """Generated proxies and pooled similarities.

    ``pos``/``neg`` are (..., d, n); ``w_pos``/``w_neg`` are (..., n).
    ``s_pos``/``s_neg`` are the pooling weights laid out (..., n, tokens);
    ``xdot_pos``/``xdot_neg`` the attention outputs they pool.
    """

    pos: Tensor
    neg: Tensor
    w_pos: Tensor
    w_neg: Tensor
    s_pos: Tensor
    s_neg: Tensor
    xdot_pos: Tensor
    xdot_neg: Tensor

    def detached(self) -> "ProxySet":
        return ProxySet(*(nx.detach(t) for t in (self.pos, self.neg, self.w_pos, self.w_neg,
                                                 self.s_pos, self.s_neg, self.xdot_pos, self.xdot_neg)))


def generate_proxies(xpos, xneg, w_pos, w_neg, gen: ProxyGenerator) -> ProxySet:
    xpos, xneg = nx.as_tensor(xpos), nx.as_tensor(xneg)
    if xpos.shape[-1] < 1 or xneg.shape[-1] < 1:
        raise ValueError("proxy generation needs non-empty positive and negative sets")
    w_pos = np.asarray(w_pos.value if isinstance(w_pos, Tensor) else w_pos, dtype=np.float64)
    w_neg = np.asarray(w_neg.value if isinstance(w_neg, Tensor) else w_neg, dtype=np.float64)
    if w_pos.shape[-1] != xpos.shape[-1] or w_neg.shape[-1] != xneg.shape[-1]:
        raise ValueError("similarity vectors must match the set sizes")
    xdot_pos, xdot_neg = gen.attend(xpos, xneg)
    s_pos = gen.pool_weights(xdot_pos, "pos")
    s_neg = gen.pool_weights(xdot_neg, "neg")
    pos = nx.matmul(xdot_pos, nx.swap(s_pos))
    neg = nx.matmul(xdot_neg, nx.swap(s_neg))
    wp = nx.reshape(nx.matmul(s_pos, w_pos[..., None]), s_pos.shape[:-1])
    wn = nx.reshape(nx.matmul(s_neg, w_neg[..., None]), s_neg.shape[:-1])
    return ProxySet(pos, neg, wp, wn, s_pos, s_neg, xdot_pos, xdot_neg)


def variance_loss(p, eps: float = 1e-4) -> Tensor:
    """mean over dimensions of max(0, 1 - sqrt(Var across proxies + eps))."""
    p = nx.as_tensor(p)
    if p.shape[-1] < 2:
        raise ValueError("variance loss needs at least two proxies")
    std = nx.sqrt(nx.add(nx.var(p, axis=-1), eps))
    return nx.mean(nx.hinge(nx.sub(1.0, std)), axis=-1)


def _manifold_term(p: Tensor, same: np.ndarray, other: np.ndarray, scalars: LossScalars) -> Tensor:
    x = np.concatenate([same, other], axis=-1)
    signs = np.concatenate([np.ones(same.shape[-1]), -np.ones(other.shape[-1])])
    cos = nx.cosine_matrix(p, x)
    z = nx.mul(signs, nx.add(nx.neg(nx.mul(cos, scalars.inv_tau)), scalars.b))
    return nx.mean(nx.softplus(z), axis=(-2, -1))


def proxy_side_losses(proxies: ProxySet, xpos, xneg, scalars: LossScalars, alpha: float = 5.0,
                      eps: float = 1e-4) -> tuple[Tensor, Tensor]:
    """(L_P+, L_P-). Real features are treated as constants."""
    xp = nx.as_tensor(xpos).value
    xn = nx.as_tensor(xneg).value
    lp = _manifold_term(proxies.pos, xp, xn, scalars)
    ln = _manifold_term(proxies.neg, xn, xp, scalars)
    if alpha:
        lp = nx.add(lp, nx.mul(variance_loss(proxies.pos, eps), alpha))
        ln = nx.add(ln, nx.mul(variance_loss(proxies.neg, eps), alpha))
    return lp, ln


def proxy_training_loss(proxies: ProxySet, xpos, xneg, scalars: LossScalars, alpha: float = 5.0,
                        eps: float = 1e-4) -> Tensor:
    lp, ln = proxy_side_losses(proxies, xpos, xneg, scalars, alpha, eps)
    return nx.add(lp, ln)


def _check_counts(proxies: ProxySet) -> None:
    if proxies.pos.shape[-1] != proxies.w_pos.shape[-1] or proxies.neg.shape[-1] != proxies.w_neg.shape[-1]:
        raise ValueError("proxy count does not match the number of similarity estimates")


def proxy_fda_loss(anchor: int, finetuned: FeatureBatch, graph: NeighborGraph, proxies: ProxySet,
                   scalars: LossScalars) -> Tensor:
    """Alignment loss of one anchor over the real columns plus (detached) proxies."""
    _check_counts(proxies)
    if finetuned.size != graph.size:
        raise ValueError(f"batch has {finetuned.size} columns, graph expects {graph.size}")
    x = nx.as_tensor(finetuned.features)
    ppos, pneg = proxies.pos.value, proxies.neg.value
    others = nx.concat([
        nx.take(x, (slice(None), graph.neighbors[anchor])),
        ppos,
        nx.take(x, (slice(None), graph.non_neighbors[anchor])),
        pneg,
    ], axis=-1)
    w = np.concatenate([graph.w_pos[anchor], proxies.w_pos.value, -graph.w_neg[anchor], -proxies.w_neg.value])
    xi = nx.take(x, (slice(None), [anchor]))
    cos = nx.reshape(nx.cosine_matrix(xi, others), (w.size,))
    z = nx.mul(w, nx.add(nx.neg(nx.mul(cos, scalars.inv_tau)), scalars.b))
    return nx.mean(nx.softplus(z))


def proxy_fda_loss_batch(finetuned: FeatureBatch, graph: NeighborGraph, proxies: ProxySet,
                         scalars: LossScalars) -> Tensor:
    """Per-anchor proxy-augmented losses, shape (B,). ``proxies`` is stacked over anchors."""
    _check_counts(proxies)
    b = graph.size
    x = nx.as_tensor(finetuned.features)
    ppos, pneg = proxies.pos.value, proxies.neg.value
    if ppos.shape[0] != b or pneg.shape[0] != b:
        raise ValueError("expected one proxy set per anchor")
    n_pos, n_neg = ppos.shape[-1], pneg.shape[-1]
    denom = (b - 1) + n_pos + n_neg

    u = nx.l2_normalize(x, axis=0)
    cos = nx.matmul(nx.swap(u), u)
    zr = nx.mul(graph.weight_matrix(), nx.add(nx.neg(nx.mul(cos, scalars.inv_tau)), scalars.b))
    real = nx.tsum(nx.mul(nx.softplus(zr), 1.0 - np.eye(b)), axis=1)

    p = np.concatenate([ppos, pneg], axis=-1)
    pn = p / np.linalg.norm(p, axis=1, keepdims=True)
    ui = nx.reshape(nx.swap(u), (b, 1, x.shape[0]))
    cos_p = nx.reshape(nx.matmul(ui, pn), (b, n_pos + n_neg))
    wp = np.concatenate([proxies.w_pos.value, -proxies.w_neg.value], axis=-1)
    zp = nx.mul(wp, nx.add(nx.neg(nx.mul(cos_p, scalars.inv_tau)), scalars.b))
    prox = nx.tsum(nx.softplus(zp), axis=1)
    return nx.mul(nx.add(real, prox), 1.0 / denom)


def gather_sets(x, graph: NeighborGraph) -> tuple[Tensor, Tensor, np.ndarray, np.ndarray]:
    """Stack every anchor's X+ and X- into (B, d, K) and (B, d, B-K-1)."""
    x = nx.as_tensor(x)
    xt = nx.swap(x)  # B x d
    pos = nx.swap(nx.take(xt, graph.neighbors))
    neg = nx.swap(nx.take(xt, graph.non_neighbors))
    return pos, neg, graph.w_pos, graph.w_neg


def proxy_regularizer(finetuned: FeatureBatch, graph: NeighborGraph, gen: ProxyGenerator,
                      scalars: LossScalars, alpha: float = 5.0,
                      eps: float = 1e-4) -> tuple[Tensor, Tensor, ProxySet]:
    """One training step's (proxy loss, per-anchor regularizer, proxies).

    The generator sees detached features, so the proxy loss never reaches the
    encoder; the regularizer sees detached proxies, so it never reaches the
    generator.
    """
    x = nx.as_tensor(finetuned.features)
    xpos, xneg, wp, wn = gather_sets(nx.detach(x), graph)
    proxies = generate_proxies(xpos, xneg, wp, wn, gen)
    proxy_loss = nx.mean(proxy_training_loss(proxies, xpos, xneg, scalars, alpha, eps))
    reg = proxy_fda_loss_batch(finetuned, graph, proxies.detached(), scalars)
    return proxy_loss, reg, proxies


def diversity(pos, neg) -> float:
    """Mean over sides of the average per-dimension standard deviation across proxies.

    Stacked inputs are averaged over anchors.
    """
    vals = []
    for p in (pos, neg):
        p = p.value if isinstance(p, Tensor) else np.asarray(p)
        vals.append(np.sqrt(p.var(axis=-1)).mean(axis=-1))
    return float(np.mean((vals[0] + vals[1]) / 2.0))


class DiversityTracker:
    """Running mean of :func:`diversity` over training steps."""

    def __init__(self):
        self.count = 0
        self.value = 0.0

    def update(self, pos, neg) -> float:
        self.count += 1
        self.value += (diversity(pos, neg) - self.value) / self.count
        return self.value
