# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels. Semantics mirror ``_kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, fabs, INFINITY

cnp.import_array()


def transport_simplex(cost, a, b, long max_iter=-1):
    cdef double[:, ::1] c = np.ascontiguousarray(cost, dtype=np.float64)
    cdef double[::1] ra = np.array(a, dtype=np.float64)
    cdef double[::1] rb = np.array(b, dtype=np.float64)
    cdef Py_ssize_t n = c.shape[0], m = c.shape[1]
    cdef Py_ssize_t nb = n + m - 1, nodes = n + m
    if max_iter < 0:
        max_iter = 100 * n * m + 1000

    cdef cnp.int64_t[::1] rows = np.empty(nb, dtype=np.int64)
    cdef cnp.int64_t[::1] cols = np.empty(nb, dtype=np.int64)
    cdef double[::1] flow = np.empty(nb)
    cdef double[::1] u = np.zeros(n)
    cdef double[::1] v = np.zeros(m)
    cdef cnp.int64_t[::1] deg = np.zeros(nodes + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] fill = np.zeros(nodes, dtype=np.int64)
    cdef cnp.int64_t[::1] adj = np.zeros(2 * nb, dtype=np.int64)
    cdef cnp.int64_t[::1] parent = np.zeros(nodes, dtype=np.int64)
    cdef cnp.int64_t[::1] pedge = np.zeros(nodes, dtype=np.int64)
    cdef cnp.int64_t[::1] depth = np.zeros(nodes, dtype=np.int64)
    cdef cnp.int64_t[::1] queue = np.zeros(nodes, dtype=np.int64)
    cdef cnp.uint8_t[::1] seen = np.zeros(nodes, dtype=np.uint8)
    cdef cnp.int64_t[::1] path = np.zeros(nodes, dtype=np.int64)
    cdef cnp.int64_t[::1] upp = np.zeros(nodes, dtype=np.int64)

    cdef Py_ssize_t i = 0, j = 0, k, e, node, other, head, tail, x, y, lq, lp, plen, idx
    cdef Py_ssize_t p, q, enter, leave
    cdef long pivot = 0, key, leave_key
    cdef double f, scale = 1.0, tol, r, best, theta
    cdef bint bland = False
    cdef long streak = 0

    for k in range(nb):
        f = ra[i] if ra[i] < rb[j] else rb[j]
        rows[k] = i
        cols[k] = j
        flow[k] = f
        ra[i] -= f
        rb[j] -= f
        if i == n - 1:
            j += 1
        elif j == m - 1:
            i += 1
        elif ra[i] <= rb[j]:
            i += 1
        else:
            j += 1

    for i in range(n):
        for j in range(m):
            if fabs(c[i, j]) > scale:
                scale = fabs(c[i, j])
    tol = 1e-11 * scale

    while True:
        for node in range(nodes + 1):
            deg[node] = 0
        for k in range(nb):
            deg[rows[k] + 1] += 1
            deg[n + cols[k] + 1] += 1
        for node in range(nodes):
            deg[node + 1] += deg[node]
            fill[node] = deg[node]
        for k in range(nb):
            adj[fill[rows[k]]] = k
            fill[rows[k]] += 1
            adj[fill[n + cols[k]]] = k
            fill[n + cols[k]] += 1

        for node in range(nodes):
            seen[node] = 0
        seen[0] = 1
        parent[0] = -1
        pedge[0] = -1
        depth[0] = 0
        u[0] = 0.0
        queue[0] = 0
        head = 0
        tail = 1
        while head < tail:
            node = queue[head]
            head += 1
            for e in range(deg[node], deg[node + 1]):
                k = adj[e]
                if node < n:
                    other = n + cols[k]
                else:
                    other = rows[k]
                if seen[other]:
                    continue
                seen[other] = 1
                parent[other] = node
                pedge[other] = k
                depth[other] = depth[node] + 1
                if node < n:
                    v[cols[k]] = c[rows[k], cols[k]] - u[rows[k]]
                else:
                    u[rows[k]] = c[rows[k], cols[k]] - v[cols[k]]
                queue[tail] = other
                tail += 1

        enter = -1
        best = -tol
        for i in range(n):
            for j in range(m):
                r = c[i, j] - u[i] - v[j]
                if bland:
                    if r < -tol:
                        enter = i * m + j
                        break
                elif r < best:
                    best = r
                    enter = i * m + j
            if bland and enter >= 0:
                break
        if enter < 0:
            break
        if pivot == max_iter:
            raise RuntimeError(f"transport simplex did not converge in {max_iter} pivots")
        pivot += 1
        p = enter // m
        q = enter % m

        x = n + q
        y = p
        lq = 0
        lp = 0
        while depth[x] > depth[y]:
            path[lq] = pedge[x]
            lq += 1
            x = parent[x]
        while depth[y] > depth[x]:
            upp[lp] = pedge[y]
            lp += 1
            y = parent[y]
        while x != y:
            path[lq] = pedge[x]
            lq += 1
            x = parent[x]
            upp[lp] = pedge[y]
            lp += 1
            y = parent[y]
        for idx in range(lp):
            path[lq + idx] = upp[lp - 1 - idx]
        plen = lq + lp

        theta = INFINITY
        leave = -1
        leave_key = -1
        for idx in range(0, plen, 2):
            k = path[idx]
            key = rows[k] * m + cols[k]
            if flow[k] < theta or (flow[k] == theta and key < leave_key):
                theta = flow[k]
                leave = k
                leave_key = key
        for idx in range(plen):
            k = path[idx]
            if idx % 2 == 0:
                flow[k] -= theta
            else:
                flow[k] += theta
        rows[leave] = p
        cols[leave] = q
        flow[leave] = theta

        if theta == 0.0:
            streak += 1
            if streak > nodes:
                bland = True
        else:
            streak = 0

    plan = np.zeros((n, m))
    cdef double[:, ::1] pv = plan
    for k in range(nb):
        if flow[k] > 0.0:
            pv[rows[k], cols[k]] += flow[k]
    return plan, pivot


cdef inline double _softplus(double z) nogil:
    if z > 0:
        return z + log1p(exp(-z))
    return log1p(exp(z))


def mining_scores(sim, selected, candidates, Py_ssize_t n, Py_ssize_t k, double inv_tau, double bias):
    cdef double[:, ::1] s = np.ascontiguousarray(sim, dtype=np.float64)
    cdef cnp.int64_t[::1] sel = np.ascontiguousarray(selected, dtype=np.int64)
    cdef cnp.int64_t[::1] cand = np.ascontiguousarray(candidates, dtype=np.int64)
    cdef Py_ssize_t ns = sel.shape[0], nc = cand.shape[0]
    cdef Py_ssize_t bsz = (ns + 1) * n
    cdef cnp.int64_t[::1] cols = np.empty(bsz, dtype=np.int64)
    cdef cnp.uint8_t[::1] isnb = np.zeros(bsz, dtype=np.uint8)
    out = np.empty(nc)
    cdef double[::1] ov = out
    cdef Py_ssize_t ci, a, t, jj, pos, bestj, col_a
    cdef double total, sv, bestv, w

    for t in range(ns):
        for jj in range(n):
            cols[t * n + jj] = sel[t] * n + jj

    for ci in range(nc):
        for jj in range(n):
            cols[ns * n + jj] = cand[ci] * n + jj
        total = 0.0
        for a in range(bsz - n, bsz):
            col_a = cols[a]
            for pos in range(bsz):
                isnb[pos] = 0
            # k passes of argmax; first index wins ties
            for t in range(k):
                bestj = -1
                bestv = -INFINITY
                for pos in range(bsz):
                    if pos == a or isnb[pos]:
                        continue
                    sv = s[col_a, cols[pos]]
                    if bestj < 0 or sv > bestv:
                        bestv = sv
                        bestj = pos
                isnb[bestj] = 1
            for pos in range(bsz):
                if pos == a:
                    continue
                sv = s[col_a, cols[pos]]
                w = sv if isnb[pos] else -sv
                total += _softplus(w * (-sv * inv_tau + bias))
        ov[ci] = total / (bsz - 1)
    return out


def sinkhorn_log(cost, log_a, log_b, double eps, long max_iter, double tol, f0, g0, long check_every=10):
    cdef double[:, ::1] c = np.ascontiguousarray(cost, dtype=np.float64)
    cdef double[::1] la = np.ascontiguousarray(log_a, dtype=np.float64)
    cdef double[::1] lb = np.ascontiguousarray(log_b, dtype=np.float64)
    cdef Py_ssize_t n = c.shape[0], m = c.shape[1], i, j
    f_arr = np.array(f0, dtype=np.float64)
    g_arr = np.array(g0, dtype=np.float64)
    cdef double[::1] f = f_arr
    cdef double[::1] g = g_arr
    cdef double mx, acc, z, residual = INFINITY, row
    cdef long it = 0

    for it in range(1, max_iter + 1):
        for i in range(n):
            mx = -INFINITY
            for j in range(m):
                z = (g[j] - c[i, j]) / eps
                if z > mx:
                    mx = z
            acc = 0.0
            for j in range(m):
                acc += exp((g[j] - c[i, j]) / eps - mx)
            f[i] = eps * la[i] - eps * (mx + log(acc))
        for j in range(m):
            mx = -INFINITY
            for i in range(n):
                z = (f[i] - c[i, j]) / eps
                if z > mx:
                    mx = z
            acc = 0.0
            for i in range(n):
                acc += exp((f[i] - c[i, j]) / eps - mx)
            g[j] = eps * lb[j] - eps * (mx + log(acc))
        if it % check_every == 0 or it == max_iter:
            residual = 0.0
            for i in range(n):
                row = 0.0
                for j in range(m):
                    row += exp((f[i] + g[j] - c[i, j]) / eps)
                residual += fabs(row - exp(la[i]))
            if residual <= tol:
                break
    return f_arr, g_arr, it, residual
