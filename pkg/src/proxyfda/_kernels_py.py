"""Pure-Python versions of the compiled kernels in ``_kernels.pyx``.

Same algorithms, same argument order, same tie-breaking. Selected by
``proxyfda._backend`` when the extension is missing or
``PROXYFDA_BACKEND=python`` is set.
"""
from __future__ import annotations

import numpy as np
from scipy.special import logsumexp


def transport_simplex(cost, a, b, max_iter=-1):
    """Exact transportation simplex (u-v method on the basis tree).

    Returns ``(plan, pivots)``. Starts from the north-west corner rule, enters
    the most negative reduced cost and falls back to Bland's rule for the rest
    of the solve once a run of degenerate pivots is seen.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    a = np.array(a, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    n, m = cost.shape
    nb = n + m - 1
    if max_iter < 0:
        max_iter = 100 * n * m + 1000
    rows = np.empty(nb, dtype=np.int64)
    cols = np.empty(nb, dtype=np.int64)
    flow = np.empty(nb)

    i = j = 0
    for k in range(nb):
        f = min(a[i], b[j])
        rows[k], cols[k], flow[k] = i, j, f
        a[i] -= f
        b[j] -= f
        if i == n - 1:
            j += 1
        elif j == m - 1:
            i += 1
        elif a[i] <= b[j]:
            i += 1
        else:
            j += 1

    scale = max(1.0, float(np.abs(cost).max())) if cost.size else 1.0
    tol = 1e-11 * scale
    bland = False
    streak = 0
    nodes = n + m
    for pivot in range(max_iter + 1):
        adj = [[] for _ in range(nodes)]
        for k in range(nb):
            adj[rows[k]].append(k)
            adj[n + cols[k]].append(k)
        u = np.zeros(n)
        v = np.zeros(m)
        parent_edge = np.full(nodes, -1, dtype=np.int64)
        parent = np.full(nodes, -1, dtype=np.int64)
        depth = np.zeros(nodes, dtype=np.int64)
        seen = np.zeros(nodes, dtype=bool)
        seen[0] = True
        queue = [0]
        head = 0
        while head < len(queue):
            node = queue[head]
            head += 1
            for k in adj[node]:
                other = n + cols[k] if node < n else rows[k]
                if seen[other]:
                    continue
                seen[other] = True
                parent[other], parent_edge[other], depth[other] = node, k, depth[node] + 1
                if node < n:
                    v[cols[k]] = cost[rows[k], cols[k]] - u[rows[k]]
                else:
                    u[rows[k]] = cost[rows[k], cols[k]] - v[cols[k]]
                queue.append(other)

        red = cost - u[:, None] - v[None, :]
        flat = red.ravel()
        if bland:
            hits = np.flatnonzero(flat < -tol)
            enter = int(hits[0]) if hits.size else -1
        else:
            enter = int(np.argmin(flat))
            if flat[enter] >= -tol:
                enter = -1
        if enter < 0:
            break
        if pivot == max_iter:
            raise RuntimeError(f"transport simplex did not converge in {max_iter} pivots")
        p, q = divmod(enter, m)

        x, y = n + q, p
        up_q, up_p = [], []
        while depth[x] > depth[y]:
            up_q.append(parent_edge[x])
            x = parent[x]
        while depth[y] > depth[x]:
            up_p.append(parent_edge[y])
            y = parent[y]
        while x != y:
            up_q.append(parent_edge[x])
            x = parent[x]
            up_p.append(parent_edge[y])
            y = parent[y]
        path = up_q + up_p[::-1]

        theta = np.inf
        leave = -1
        leave_key = -1
        for idx in range(0, len(path), 2):
            k = path[idx]
            key = rows[k] * m + cols[k]
            if flow[k] < theta or (flow[k] == theta and key < leave_key):
                theta, leave, leave_key = flow[k], k, key
        for idx, k in enumerate(path):
            if idx % 2 == 0:
                flow[k] -= theta
            else:
                flow[k] += theta
        rows[leave], cols[leave], flow[leave] = p, q, theta

        if theta == 0.0:
            streak += 1
            if streak > nodes:
                bland = True
        else:
            streak = 0

    plan = np.zeros((n, m))
    np.add.at(plan, (rows, cols), np.maximum(flow, 0.0))
    return plan, pivot


def mining_scores(sim, selected, candidates, n, k, inv_tau, bias):
    """Class-wise alignment loss of each candidate class against the selected ones.

    ``sim`` is the pool's pre-trained cosine matrix with classes laid out in
    contiguous blocks of ``n`` columns. The trial batch is the selected classes
    in selection order followed by the candidate.
    """
    sim = np.asarray(sim, dtype=np.float64)
    selected = np.asarray(selected, dtype=np.int64)
    block = np.arange(n)
    base = (selected[:, None] * n + block).ravel()
    out = np.empty(len(candidates))
    for ci, c in enumerate(candidates):
        cols = np.concatenate([base, c * n + block])
        bsz = cols.size
        s = sim[np.ix_(cols[-n:], cols)]
        anchors = np.arange(bsz - n, bsz)
        masked = s.copy()
        masked[np.arange(n), anchors] = -np.inf
        order = np.argsort(-masked, axis=1, kind="stable")[:, :k]
        w = -s
        np.put_along_axis(w, order, np.take_along_axis(s, order, axis=1), axis=1)
        z = w * (-s * inv_tau + bias)
        terms = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
        terms[np.arange(n), anchors] = 0.0
        out[ci] = terms.sum() / (bsz - 1)
    return out


def sinkhorn_log(cost, log_a, log_b, eps, max_iter, tol, f0, g0, check_every=10):
    """Log-domain Sinkhorn from potentials ``(f0, g0)``. Returns ``(f, g, iterations, residual)``.

    ``residual`` is the L1 row-marginal violation after the last column update.
    """
    cost = np.asarray(cost, dtype=np.float64)
    a = np.exp(log_a)
    f = np.array(f0, dtype=np.float64)
    g = np.array(g0, dtype=np.float64)
    residual = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        f = eps * log_a - eps * logsumexp((g[None, :] - cost) / eps, axis=1)
        g = eps * log_b - eps * logsumexp((f[:, None] - cost) / eps, axis=0)
        if it % check_every == 0 or it == max_iter:
            rows = np.exp((f[:, None] + g[None, :] - cost) / eps).sum(axis=1)
            residual = float(np.abs(rows - a).sum())
            if residual <= tol:
                break
    return f, g, it, residual
