"""Finite-difference audit of every differentiable loss path."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .fda import LossScalars, fda_loss, pointwise_l2_loss
from .graph import FeatureBatch, build_neighbor_graph, split_by_graph
from .numerics import GradCheckReport, Parameter, finite_difference_check
from .proxy import ProxyGenerator, generate_proxies, proxy_counts, proxy_fda_loss, proxy_training_loss

__all__ = ["CASES", "CaseResult", "run_suite"]

CASES = ("fda_loss", "pointwise_l2_loss", "proxy_training_loss", "proxy_fda_loss", "generator_path")


@dataclass
class CaseResult:
    case: str
    instance: int
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _instance(rng, d, b, k, s):
    pre = rng.standard_normal((d, b))
    fin = pre + 0.3 * rng.standard_normal((d, b))
    labels = np.repeat(np.arange(b // 2 + 1), 2)[:b]
    graph = build_neighbor_graph(FeatureBatch(pre, labels), k)
    scalars = LossScalars(float(rng.uniform(2.0, 12.0)), float(rng.uniform(-2.0, 2.0)))
    n_pos, n_neg = proxy_counts(k, b, s)
    gen = ProxyGenerator(d, n_pos, n_neg, seed=int(rng.integers(2**31)))
    return pre, fin, labels, graph, scalars, gen


def _case(name, rng, d, b, k, s, step, tol):
    pre, fin, labels, graph, scalars, gen = _instance(rng, d, b, k, s)
    anchor = int(rng.integers(b))
    if name == "fda_loss":
        x = Parameter(fin, name="x")
        return finite_difference_check(
            lambda: fda_loss(anchor, FeatureBatch(x, labels, "finetuned"), graph, scalars),
            [x] + scalars.params, step, tol)
    if name == "pointwise_l2_loss":
        x = Parameter(fin, name="x")
        return finite_difference_check(lambda: pointwise_l2_loss(x, pre), [x], step, tol)
    xpos, xneg = split_by_graph(FeatureBatch(fin, labels, "finetuned"), graph, anchor)
    wp, wn = graph.w_pos[anchor], graph.w_neg[anchor]
    if name == "proxy_training_loss":
        return finite_difference_check(
            lambda: proxy_training_loss(generate_proxies(xpos, xneg, wp, wn, gen), xpos, xneg, scalars),
            gen.params + scalars.params, step, tol)
    if name == "proxy_fda_loss":
        proxies = generate_proxies(xpos, xneg, wp, wn, gen).detached()
        x = Parameter(fin, name="x")
        return finite_difference_check(
            lambda: proxy_fda_loss(anchor, FeatureBatch(x, labels, "finetuned"), graph, proxies, scalars),
            [x] + scalars.params, step, tol)
    if name == "generator_path":
        probe = generate_proxies(xpos, xneg, wp, wn, gen)
        r = [rng.standard_normal(t.shape) for t in (probe.pos, probe.neg, probe.w_pos, probe.w_neg)]

        def fn():
            p = generate_proxies(xpos, xneg, wp, wn, gen)
            parts = [nx.tsum(nx.mul(t, ri)) for t, ri in zip((p.pos, p.neg, p.w_pos, p.w_neg), r)]
            return nx.add(nx.add(parts[0], parts[1]), nx.add(parts[2], parts[3]))
        return finite_difference_check(fn, gen.params, step, tol)
    raise ValueError(f"unknown case {name!r}")


def run_suite(instances: int = 20, seed: int = 0, d: int = 8, b: int = 12, k: int = 5, s: float = 0.4,
              step: float = 1e-5, tol: float = 1e-4, cases=CASES) -> list[CaseResult]:
    """``instances`` random problems per case; each case draws from its own seeded stream."""
    out = []
    for ci, name in enumerate(cases):
        rng = np.random.default_rng([seed, ci])
        for i in range(instances):
            out.append(CaseResult(name, i, _case(name, rng, d, b, k, s, step, tol)))
    return out
