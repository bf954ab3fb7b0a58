"""numba-compiled versions of the hot kernels; same signatures as ``_numpy``."""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _adam_flat(w, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    for i in range(w.shape[0]):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * (gi * gi)
        m[i] = mi
        v[i] = vi
        w[i] -= lr * (mi / bc1) / (math.sqrt(vi / bc2) + eps)


def adam_update(w, g, m, v, lr, beta1, beta2, eps, step):
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    _adam_flat(w.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
               lr, beta1, beta2, eps, bc1, bc2)


@njit(cache=True)
def _elu_forward_flat(z, out):
    for i in range(z.shape[0]):
        zi = z[i]
        out[i] = zi if zi > 0.0 else math.expm1(zi)


@njit(cache=True)
def _elu_backward_flat(z, out, grad, res):
    for i in range(z.shape[0]):
        res[i] = grad[i] if z[i] > 0.0 else grad[i] * (out[i] + 1.0)


def elu_forward(z):
    z = np.ascontiguousarray(z)
    out = np.empty_like(z)
    _elu_forward_flat(z.reshape(-1), out.reshape(-1))
    return out


def elu_backward(z, out, grad):
    z = np.ascontiguousarray(z)
    res = np.empty_like(z)
    _elu_backward_flat(z.reshape(-1), np.ascontiguousarray(out).reshape(-1),
                       np.ascontiguousarray(grad).reshape(-1), res.reshape(-1))
    return res


@njit(cache=True)
def _im2col(x, k, pad, cols):
    n, c, h, w = x.shape
    ho = h + 2 * pad - k + 1
    wo = w + 2 * pad - k + 1
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                row = (b * ho + i) * wo + j
                col = 0
                for ch in range(c):
                    for di in range(k):
                        for dj in range(k):
                            ii = i + di - pad
                            jj = j + dj - pad
                            if 0 <= ii < h and 0 <= jj < w:
                                cols[row, col] = x[b, ch, ii, jj]
                            else:
                                cols[row, col] = 0.0
                            col += 1


@njit(cache=True)
def _col2im(cols, k, pad, dx):
    n, c, h, w = dx.shape
    ho = h + 2 * pad - k + 1
    wo = w + 2 * pad - k + 1
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                row = (b * ho + i) * wo + j
                col = 0
                for ch in range(c):
                    for di in range(k):
                        for dj in range(k):
                            ii = i + di - pad
                            jj = j + dj - pad
                            if 0 <= ii < h and 0 <= jj < w:
                                dx[b, ch, ii, jj] += cols[row, col]
                            col += 1


def im2col(x, k, pad):
    n, c, h, w = x.shape
    ho = h + 2 * pad - k + 1
    wo = w + 2 * pad - k + 1
    cols = np.empty((n * ho * wo, c * k * k))
    _im2col(np.ascontiguousarray(x), k, pad, cols)
    return cols


def col2im(cols, shape, k, pad):
    dx = np.zeros(shape)
    _col2im(np.ascontiguousarray(cols), k, pad, dx)
    return dx


@njit(cache=True)
def _sweep_sorted(d, s):
    n = d.shape[0]
    n_same = 0.0
    for i in range(n):
        n_same += s[i]
    n_uniq = 0
    for i in range(n):
        if i == 0 or d[i] != d[i - 1]:
            n_uniq += 1
    thr = np.empty(n_uniq + 1)
    acc = np.empty(n_uniq + 1)
    thr[0] = -np.inf
    acc[0] = (n - n_same) / n
    same_in = 0.0
    slot = 0
    i = 0
    while i < n:
        j = i
        while j < n and d[j] == d[i]:
            same_in += s[j]
            j += 1
        slot += 1
        diff_out = (n - j) - (n_same - same_in)
        acc[slot] = (same_in + diff_out) / n
        if j < n:
            thr[slot] = (d[i] + d[j]) / 2.0
        else:
            thr[slot] = np.inf
        i = j
    return thr, acc


def threshold_sweep(dist, same):
    order = np.argsort(dist, kind="stable")
    return _sweep_sorted(np.ascontiguousarray(dist[order]),
                         same[order].astype(np.float64))


@njit(cache=True)
def _cosine_rows(a, b, dist, grad, degenerate):
    n, d = a.shape
    for r in range(n):
        na = 0.0
        nb = 0.0
        dot = 0.0
        for c in range(d):
            na += a[r, c] * a[r, c]
            nb += b[r, c] * b[r, c]
            dot += a[r, c] * b[r, c]
        na = math.sqrt(na)
        nb = math.sqrt(nb)
        if na == 0.0 or nb == 0.0:
            degenerate[r] = True
            dist[r] = 1.0
            for c in range(d):
                grad[r, c] = 0.0
            continue
        cos = dot / (na * nb)
        dist[r] = min(max(1.0 - cos, 0.0), 2.0)  # rounding can push |cos| past 1
        for c in range(d):
            grad[r, c] = -(b[r, c] / (na * nb) - (cos / (na * na)) * a[r, c])


def cosine_rows(a, b):
    n = a.shape[0]
    dist = np.empty(n)
    grad = np.empty(a.shape)
    degenerate = np.zeros(n, dtype=np.bool_)
    _cosine_rows(np.ascontiguousarray(a), np.ascontiguousarray(b), dist, grad, degenerate)
    return dist, grad, degenerate
