"""Compiled vs pure-Python kernel timings.

    python benchmarks/bench_kernels.py [--repeat 3]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from proxyfda import _kernels_py

try:
    from proxyfda import _kernels
except ImportError:  # extension not built
    _kernels = None


def _best(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def cases(rng):
    for n in (50, 200):
        x, y = rng.random((n, 2)), rng.random((n, 2))
        cost = np.sqrt(((x[:, None] - y[None]) ** 2).sum(-1))
        a = np.full(n, 1.0 / n)
        yield f"transport_simplex {n}x{n}", "transport_simplex", (cost, a, a)
    feats = rng.standard_normal((32, 64 * 4)) + 2.0
    feats /= np.linalg.norm(feats, axis=0)
    sim = feats.T @ feats
    yield "mining_scores C=64 n=4 |S|=8", "mining_scores", (sim, np.arange(8), np.arange(8, 64), 4, 4, 10.0, 10.0)
    n = 100
    x, y = rng.random((n, 2)), rng.random((n, 2))
    cost = np.sqrt(((x[:, None] - y[None]) ** 2).sum(-1))
    la = np.full(n, -np.log(n))
    yield "sinkhorn_log 100x100 eps=0.05 x500", "sinkhorn_log", (cost, la, la, 0.05, 500, 0.0, np.zeros(n), np.zeros(n))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':38s} {'python':>10s} {'compiled':>10s} {'speedup':>8s}  agree")
    for label, name, call in cases(rng):
        tp, outp = _best(lambda: getattr(_kernels_py, name)(*call), args.repeat)
        if _kernels is None:
            print(f"{label:38s} {tp:10.4f} {'n/a':>10s}")
            continue
        tc, outc = _best(lambda: getattr(_kernels, name)(*call), args.repeat)
        a = outp[0] if isinstance(outp, tuple) else outp
        b = outc[0] if isinstance(outc, tuple) else outc
        agree = np.allclose(a, b, rtol=1e-9, atol=1e-12)
        print(f"{label:38s} {tp:10.4f} {tc:10.4f} {tp / tc:7.1f}x  {agree}")


if __name__ == "__main__":
    main()
