"""Optimal transport dataset distance with per-class K-means pseudolabels."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import _backend
from .dataset import LabeledFeatureSet

__all__ = ["MarginalError", "SinkhornConvergenceError", "TransportPlan", "Pseudolabels", "OTDDReport",
           "kmeans", "kmeans_per_class", "exact_ot", "sinkhorn_ot", "label_distance", "otdd",
           "EXACT_MAX_POINTS"]

EXACT_MAX_POINTS = 300


class MarginalError(ValueError):
    pass


class SinkhornConvergenceError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"Sinkhorn did not converge after {iterations} iterations (residual {residual:.3e})")


@dataclass
class TransportPlan:
    coupling: np.ndarray
    cost: float
    mu: np.ndarray
    nu: np.ndarray
    iterations: int = 0


@dataclass
class Pseudolabels:
    """``pairs[index[i]]`` is the (class, cluster) of sample ``i``."""

    pairs: list[tuple[int, int]]
    index: np.ndarray

    def as_pairs(self) -> np.ndarray:
        return np.asarray(self.pairs, dtype=np.int64)[self.index]

    def members(self, p: int) -> np.ndarray:
        return np.flatnonzero(self.index == p)


@dataclass
class OTDDReport:
    distance: float
    label_distances: np.ndarray
    source_labels: Pseudolabels
    target_labels: Pseudolabels
    solver: str
    p: float
    epsilon: float | None = None


def _check_marginals(cost, mu, nu):
    cost = np.asarray(cost, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    if cost.shape != (mu.size, nu.size):
        raise MarginalError(f"cost shape {cost.shape} does not match marginals ({mu.size}, {nu.size})")
    if np.any(mu < 0) or np.any(nu < 0):
        raise MarginalError("marginals must be non-negative")
    if abs(mu.sum() - 1.0) > 1e-9 or abs(nu.sum() - 1.0) > 1e-9:
        raise MarginalError(f"marginals must each sum to 1 (got {mu.sum():.12g}, {nu.sum():.12g})")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    return cost, mu, nu


def exact_ot(cost, mu, nu) -> TransportPlan:
    """Optimal coupling by the transportation simplex."""
    cost, mu, nu = _check_marginals(cost, mu, nu)
    plan, pivots = _backend.transport_simplex(cost, mu, nu)
    return TransportPlan(plan, float(np.sum(plan * cost)), mu, nu, int(pivots))


def sinkhorn_ot(cost, mu, nu, epsilon: float, max_iter: int = 1_000_000, tol: float = 1e-6,
                anneal: bool = True) -> TransportPlan:
    """Entropic OT by log-domain Sinkhorn; ``cost`` is <plan, cost> of the regularized plan.

    With ``anneal`` the potentials are warm-started along a geometric schedule
    of epsilons ending at ``epsilon``; only the final stage must meet ``tol``.
    ``max_iter`` bounds the total iteration count.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    cost, mu, nu = _check_marginals(cost, mu, nu)
    with np.errstate(divide="ignore"):
        la, lb = np.log(mu), np.log(nu)
    schedule = [float(epsilon)]
    if anneal:
        top = float(np.ptp(cost)) if cost.size else 0.0
        while schedule[-1] * 4.0 < top:
            schedule.append(schedule[-1] * 4.0)
        schedule.reverse()
    f, g = np.zeros(cost.shape[0]), np.zeros(cost.shape[1])
    used = 0
    res = np.inf
    for stage, eps in enumerate(schedule):
        last = stage == len(schedule) - 1
        budget = max_iter - used if last else min(max_iter - used, 2000)
        f, g, it, res = _backend.sinkhorn_log(cost, la, lb, eps, int(budget), tol if last else 1e-3, f, g)
        used += it
    if not res <= tol:
        raise SinkhornConvergenceError(res, used)
    plan = _round_to_marginals(np.exp((f[:, None] + g[None, :] - cost) / epsilon), mu, nu)
    return TransportPlan(plan, float(np.sum(plan * cost)), mu, nu, int(used))


def _round_to_marginals(plan: np.ndarray, mu: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """Project a near-feasible plan onto the transport polytope.

    Rows and columns are shrunk to fit their marginals, then the leftover mass
    is added back as a rank-one correction.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(plan.sum(1) > 0, np.minimum(mu / plan.sum(1), 1.0), 0.0)
    plan = plan * r[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(plan.sum(0) > 0, np.minimum(nu / plan.sum(0), 1.0), 0.0)
    plan = plan * c[None, :]
    er = mu - plan.sum(1)
    ec = nu - plan.sum(0)
    total = er.sum()
    if total > 0:
        plan = plan + np.outer(er, ec) / total
    return plan


def kmeans(x: np.ndarray, k: int, rng, max_iter: int = 100, tol: float = 1e-10) -> np.ndarray:
    """Lloyd iterations from k-means++ seeds on the rows of ``x``. Returns compact labels."""
    n = x.shape[0]
    if n <= k:
        return np.arange(n)
    centers = [x[int(rng.integers(n))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    while len(centers) < k:
        total = d2.sum()
        if total <= 0:
            break
        idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
        idx = min(idx, n - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    centers = np.array(centers)
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(dist, axis=1)
        new = centers.copy()
        for c in range(len(centers)):
            pts = x[assign == c]
            if len(pts):
                new[c] = pts.mean(axis=0)
        shift = float(np.abs(new - centers).max())
        centers = new
        if shift <= tol:
            break
    dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assign = np.argmin(dist, axis=1)
    _, compact = np.unique(assign, return_inverse=True)
    return compact


def kmeans_per_class(fs: LabeledFeatureSet, k: int = 3, seed: int = 0, max_iter: int = 100,
                     tol: float = 1e-10) -> Pseudolabels:
    """Split every class into up to ``k`` clusters; each class is seeded independently."""
    if k < 1:
        raise ValueError("k must be >= 1")
    x = fs.features.T
    pairs: list[tuple[int, int]] = []
    index = np.empty(fs.size, dtype=np.int64)
    for c in fs.classes:
        members = np.flatnonzero(fs.labels == c)
        rng = np.random.default_rng([seed, int(c)])
        lab = kmeans(x[members], k, rng, max_iter, tol)
        offset = len(pairs)
        pairs.extend((int(c), int(j)) for j in range(lab.max() + 1))
        index[members] = offset + lab
    return Pseudolabels(pairs, index)


def _exact_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))


def label_distance(features_a: np.ndarray, features_b: np.ndarray, p: float = 2) -> float:
    """p-Wasserstein distance between two point clouds (d x n, d x m) with uniform weights."""
    a = np.asarray(features_a, dtype=np.float64).T
    b = np.asarray(features_b, dtype=np.float64).T
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("label distance needs non-empty sets")
    cost = _exact_dist(a, b) ** p
    plan = exact_ot(cost, np.full(a.shape[0], 1.0 / a.shape[0]), np.full(b.shape[0], 1.0 / b.shape[0]))
    return float(max(plan.cost, 0.0) ** (1.0 / p))


def otdd(source: LabeledFeatureSet, target: LabeledFeatureSet, p: float = 2, k: int = 3,
         solver: Literal["auto", "exact", "sinkhorn"] = "auto", epsilon: float | None = None,
         seed: int = 0) -> OTDDReport:
    """Dataset distance whose ground cost mixes point distance and pseudo-class Wasserstein distance."""
    if source.d != target.d:
        raise ValueError(f"feature dimension mismatch: {source.d} vs {target.d}")
    ps = kmeans_per_class(source, k, seed)
    pt = kmeans_per_class(target, k, seed)
    xs, xt = source.features.T, target.features.T
    dy = np.empty((len(ps.pairs), len(pt.pairs)))
    for i in range(len(ps.pairs)):
        a = xs[ps.members(i)]
        for j in range(len(pt.pairs)):
            dy[i, j] = label_distance(a.T, xt[pt.members(j)].T, p)
    cost = _exact_dist(xs, xt) ** p + dy[np.ix_(ps.index, pt.index)] ** p
    mu = np.full(source.size, 1.0 / source.size)
    nu = np.full(target.size, 1.0 / target.size)
    if solver == "auto":
        solver = "exact" if max(source.size, target.size) <= EXACT_MAX_POINTS else "sinkhorn"
    if solver == "exact":
        plan = exact_ot(cost, mu, nu)
        epsilon = None
    elif solver == "sinkhorn":
        if epsilon is None:
            epsilon = 0.05 * float(cost.mean())
        plan = sinkhorn_ot(cost, mu, nu, epsilon)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    return OTDDReport(float(max(plan.cost, 0.0) ** (1.0 / p)), dy, ps, pt, solver, p, epsilon)
