"""Numba kernels for the hot loops: min-ratio decoding and the store/carry chain.

Both the runtime sketch and the training simulation go through ``carry_stream``
so that sequential stores, mini-batch stores and training see identical carry
decisions for identical inputs.
"""

import numpy as np
from numba import njit

# Relative slack on the carry quotient. Repeated float additions of the same
# basis (A + A + A + A) can land one ulp below 4A; without slack such a cell
# would miss its carry.
CARRY_RTOL = 1e-6


@njit(cache=True)
def min_ratio_rows(memory, eo, ed, eps):
    """Per-row minimum of memory / (eo[j] outer ed[j] + eps).

    Returns ``(values, argmin)`` where argmin is the flat row-major index of
    the first minimising cell.
    """
    n = eo.shape[0]
    h, w = memory.shape
    values = np.empty(n, dtype=np.float64)
    argmin = np.empty(n, dtype=np.int64)
    for j in range(n):
        best = np.inf
        best_idx = 0
        for p in range(h):
            ep = eo[j, p]
            for q in range(w):
                r = memory[p, q] / (ep * ed[j, q] + eps)
                if r < best:
                    best = r
                    best_idx = p * w + q
        values[j] = best
        argmin[j] = best_idx
    return values, argmin


@njit(cache=True)
def _min_ratio(memory, basis):
    h, w = memory.shape
    best = np.inf
    for p in range(h):
        for q in range(w):
            r = memory[p, q] / basis[p, q]
            if r < best:
                best = r
    return best


@njit(cache=True)
def _aggregate(out, emb_o, emb_d, idx_o, idx_d, weights, start, stop, eps, weighted):
    """out <- sum_e c_e * (E_o[e] outer E_d[e] + eps), c_e = w_e or 1 (w_e > 0)."""
    h, w = out.shape
    out[:, :] = 0.0
    total = 0.0
    for e in range(start, stop):
        we = weights[e]
        if we <= 0.0:
            continue
        c = we if weighted else 1.0
        total += c
        ro = idx_o[e]
        rd = idx_d[e]
        for p in range(h):
            a = c * emb_o[ro, p]
            if a == 0.0:
                continue
            for q in range(w):
                out[p, q] += a * emb_d[rd, q]
    if total > 0.0:
        for p in range(h):
            for q in range(w):
                out[p, q] += eps * total
    return total


@njit(cache=True)
def carry_stream(memories, active, emb_o, emb_d, idx_o, idx_d, weights,
                 batch_size, theta, tau, eps, expand, coef, record):
    """Store a stream in mini-batches with conservative carry and expansion.

    memories : (n_max, H, W) float64, updated in place
    emb_o, emb_d : (n_max, n_nodes, H|W) per-layer embeddings of unique nodes
    idx_o, idx_d : per-edge row into the embedding tables
    coef : (n_max, n_edges) per-edge basis coefficients, filled when ``record``

    Each layer-``i`` memory ends up equal to ``sum_e coef[i, e] * A_e^(i)`` up
    to the non-negativity clamp. Returns the new active layer count.
    """
    n_max, h, w = memories.shape
    n = weights.shape[0]
    add = np.empty((h, w))
    cur = np.empty((h, w))
    nxt = np.empty((h, w))
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        if _aggregate(add, emb_o[0], emb_d[0], idx_o, idx_d, weights,
                      start, stop, eps, True) <= 0.0:
            continue
        mem = memories[0]
        for p in range(h):
            for q in range(w):
                mem[p, q] += add[p, q]
        if record:
            for e in range(start, stop):
                if weights[e] > 0.0:
                    coef[0, e] += weights[e]
        _aggregate(cur, emb_o[0], emb_d[0], idx_o, idx_d, weights,
                   start, stop, eps, False)
        layer = 0
        while layer + 1 < active:
            ratio = _min_ratio(memories[layer], cur)
            t = np.floor(ratio / theta * (1.0 + CARRY_RTOL))
            if t <= 0.0:
                break
            _aggregate(nxt, emb_o[layer + 1], emb_d[layer + 1], idx_o, idx_d,
                       weights, start, stop, eps, False)
            lo = memories[layer]
            hi = memories[layer + 1]
            for p in range(h):
                for q in range(w):
                    hi[p, q] += t * nxt[p, q]
                    v = lo[p, q] - theta * t * cur[p, q]
                    lo[p, q] = v if v > 0.0 else 0.0
            if record:
                for e in range(start, stop):
                    if weights[e] > 0.0:
                        coef[layer, e] -= theta * t
                        coef[layer + 1, e] += t
            cur, nxt = nxt, cur
            layer += 1
        if expand and active < n_max:
            top = memories[active - 1]
            s = 0.0
            for p in range(h):
                for q in range(w):
                    s += top[p, q]
            if s / (h * w) > tau:
                memories[active, :, :] = 0.0
                active += 1
    return active


@njit(cache=True)
def _dense(x, w, b):
    n, k = x.shape
    m = w.shape[1]
    out = np.empty((n, m))
    for r in range(n):
        for c in range(m):
            acc = b[c]
            for j in range(k):
                acc += x[r, j] * w[j, c]
            out[r, c] = acc
    return out


@njit(cache=True)
def _bn_relu(x, mean, var, gamma, beta, bn_eps):
    n, d = x.shape
    for c in range(d):
        scale = gamma[c] / np.sqrt(var[c] + bn_eps)
        for r in range(n):
            v = (x[r, c] - mean[c]) * scale + beta[c]
            x[r, c] = v if v > 0.0 else 0.0
    return x


@njit(cache=True)
def encoder_infer(codes, w1, b1, m1, v1, g1, s1, w2, b2, m2, v2, g2, s2, w3, b3, bn_eps):
    """Inference-mode encoder forward with a fixed per-row summation order.

    Each row's result is independent of how many other rows share the call,
    which keeps embeddings bit-identical across batch compositions.
    """
    x = _bn_relu(_dense(codes, w1, b1), m1, v1, g1, s1, bn_eps)
    x = _bn_relu(_dense(x, w2, b2), m2, v2, g2, s2, bn_eps)
    x = _dense(x, w3, b3)
    n, d = x.shape
    for r in range(n):
        for c in range(d):
            if x[r, c] < 0.0:
                x[r, c] = 0.0
    return x


@njit(cache=True)
def scatter_rows(n_out, rows_out, table, rows_in, coef):
    """out[rows_out[k]] += coef[k] * table[rows_in[k]] for every k, in order."""
    out = np.zeros((n_out, table.shape[1]))
    for k in range(rows_out.shape[0]):
        c = coef[k]
        if c == 0.0:
            continue
        ro = rows_out[k]
        ri = rows_in[k]
        for j in range(table.shape[1]):
            out[ro, j] += c * table[ri, j]
    return out
