"""Scalar losses returning ``(value, d value / d pred)``."""

import numpy as np

from omnifuse import kernels

BCE_CLAMP = 1e-7
LOSS_KINDS = ("mse", "sse", "bce", "softmax_ce", "cosine", "vae_kl")


def _same_shape(pred, target, kind):
    if pred.shape != target.shape:
        raise ValueError(f"{kind}: shape mismatch {pred.shape} vs {target.shape}")


def mse(pred, target):
    """Mean over all entries of the squared error."""
    _same_shape(pred, target, "mse")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def sse(pred, target):
    """Squared Euclidean distance per row, averaged over rows."""
    _same_shape(pred, target, "sse")
    diff = pred - target
    n = diff.shape[0]
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def bce(prob, target):
    _same_shape(prob, target, "bce")
    if np.any((target != 0.0) & (target != 1.0)):
        raise ValueError("bce: targets must be 0 or 1")
    p = np.clip(prob, BCE_CLAMP, 1.0 - BCE_CLAMP)
    value = -np.mean(target * np.log(p) + (1.0 - target) * np.log1p(-p))
    grad = (p - target) / (p * (1.0 - p)) / p.size
    # the clamp is flat outside the band
    grad = np.where((prob < BCE_CLAMP) | (prob > 1.0 - BCE_CLAMP), 0.0, grad)
    return float(value), grad


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_ce(logits, labels):
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ValueError("softmax_ce: need one class index per row")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise ValueError("softmax_ce: class index out of range")
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    value = np.mean(logsum - z[rows, labels.astype(np.int64)])
    grad = softmax(logits)
    grad[rows, labels.astype(np.int64)] -= 1.0
    return float(value), grad / n


def cosine(pred, target):
    """Mean over rows of ``1 - cos(pred_i, target_i)``; zero-norm rows count as 1."""
    _same_shape(pred, target, "cosine")
    dist, grad, _ = kernels.cosine_rows(pred, target)
    n = pred.shape[0]
    return float(dist.mean()), grad / n


def vae_kl(stats, target=None):
    """KL(N(mu, sigma^2) || N(0, 1)) summed over latent dims, averaged over rows.

    ``stats`` is ``[mu | logvar]`` side by side.
    """
    d = stats.shape[1] // 2
    mu, logvar = stats[:, :d], stats[:, d:]
    n = stats.shape[0]
    value = -0.5 * np.sum(1.0 + logvar - mu * mu - np.exp(logvar)) / n
    grad = np.concatenate([mu, 0.5 * (np.exp(logvar) - 1.0)], axis=1) / n
    return float(value), grad


_LOSSES = {"mse": mse, "sse": sse, "bce": bce, "softmax_ce": softmax_ce, "cosine": cosine, "vae_kl": vae_kl}


def loss_and_grad(kind, pred, target):
    try:
        fn = _LOSSES[kind]
    except KeyError:
        raise ValueError(f"unknown loss kind {kind!r}") from None
    return fn(np.asarray(pred, dtype=np.float64), target if target is None else np.asarray(target))


def loss_eval(kind, pred, target):
    return loss_and_grad(kind, pred, target)[0]
