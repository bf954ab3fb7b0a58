"""Pure-numpy reference versions of the hot kernels."""

import numpy as np


def adam_update(w, g, m, v, lr, beta1, beta2, eps, step):
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    w -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def elu_forward(z):
    return np.where(z > 0.0, z, np.expm1(np.minimum(z, 0.0)))


def elu_backward(z, out, grad):
    return np.where(z > 0.0, grad, grad * (out + 1.0))


def im2col(x, k, pad):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = h + 2 * pad - k + 1
    wo = w + 2 * pad - k + 1
    cols = np.empty((n, ho, wo, c, k, k))
    for di in range(k):
        for dj in range(k):
            cols[:, :, :, :, di, dj] = xp[:, :, di:di + ho, dj:dj + wo].transpose(0, 2, 3, 1)
    return cols.reshape(n * ho * wo, c * k * k)


def col2im(cols, shape, k, pad):
    n, c, h, w = shape
    ho = h + 2 * pad - k + 1
    wo = w + 2 * pad - k + 1
    cols = cols.reshape(n, ho, wo, c, k, k)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for di in range(k):
        for dj in range(k):
            xp[:, :, di:di + ho, dj:dj + wo] += cols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return xp[:, :, pad:pad + h, pad:pad + w]


def threshold_sweep(dist, same):
    """Accuracy of the rule ``same iff dist <= t`` for every candidate t.

    Candidates are -inf, the midpoints between consecutive distinct
    distances, and +inf, in increasing order.
    """
    order = np.argsort(dist, kind="stable")
    d = dist[order]
    s = same[order].astype(np.float64)
    n = d.shape[0]
    uniq, last = np.unique(d, return_index=False, return_counts=True)
    ends = np.cumsum(last)
    n_same = s.sum()
    cum_same = np.concatenate(([0.0], np.cumsum(s)))
    # predicted-same block is d[:e] for e in {0, ends...}
    e = np.concatenate(([0], ends))
    same_in = cum_same[e]
    diff_out = (n - e) - (n_same - same_in)
    acc = (same_in + diff_out) / n
    mids = (uniq[:-1] + uniq[1:]) / 2.0
    thr = np.concatenate(([-np.inf], mids, [np.inf]))
    return thr, acc


def cosine_rows(a, b):
    na = np.sqrt(np.sum(a * a, axis=1))
    nb = np.sqrt(np.sum(b * b, axis=1))
    degenerate = (na == 0.0) | (nb == 0.0)
    safe_na = np.where(degenerate, 1.0, na)
    safe_nb = np.where(degenerate, 1.0, nb)
    dot = np.sum(a * b, axis=1)
    cos = np.where(degenerate, 0.0, dot / (safe_na * safe_nb))
    dist = np.clip(1.0 - cos, 0.0, 2.0)  # rounding can push |cos| past 1
    grad = -(b / (safe_na * safe_nb)[:, None] - (cos / (safe_na * safe_na))[:, None] * a)
    grad[degenerate] = 0.0
    return dist, grad, degenerate
