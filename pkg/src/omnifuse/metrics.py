"""Scoring: reconstruction rRMSE, task metrics, missing samples, pair verification."""

from dataclasses import dataclass, field

import numpy as np

from omnifuse import kernels

METRIC_KINDS = ("accuracy", "mae", "error_rate", "pair_accuracy", "rrmse")
HIGHER_IS_BETTER = {"accuracy": True, "pair_accuracy": True, "mae": False, "error_rate": False, "rrmse": False}


@dataclass
class MetricReport:
    metric: str
    value: float
    n_samples: int
    n_missing: int = 0
    fold_values: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"{self.metric}: non-finite metric value")
        if self.n_missing > self.n_samples:
            raise ValueError("n_missing exceeds n_samples")


def better(metric, a, b):
    """True when value ``a`` is at least as good as ``b`` under ``metric``."""
    return a >= b if HIGHER_IS_BETTER[metric] else a <= b


def rrmse(recon, target):
    """RMSE divided by the target's pooled standard deviation.

    The pooled std is the square root of the per-dimension (population)
    variances averaged over dimensions. It is computed with the same
    reduction as the numerator, so predicting the per-dimension mean scores
    exactly 1.
    """
    recon = np.asarray(recon, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if recon.shape != target.shape:
        raise ValueError(f"rrmse: shape mismatch {recon.shape} vs {target.shape}")
    if target.ndim == 1:
        recon, target = recon[:, None], target[:, None]
    if target.shape[0] < 2:
        raise ValueError("rrmse: need at least 2 samples")
    pooled = np.sqrt(np.mean((target.mean(axis=0) - target) ** 2))
    if pooled == 0.0:
        raise ValueError("rrmse: target has zero variance")
    return float(np.sqrt(np.mean((recon - target) ** 2)) / pooled)


def task_metric(kind, preds, labels):
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape[0] == 0:
        raise ValueError(f"{kind}: empty input")
    if preds.shape[0] != labels.shape[0]:
        raise ValueError(f"{kind}: {preds.shape[0]} predictions for {labels.shape[0]} labels")
    if kind == "accuracy":
        return float(np.mean(preds == labels))
    if kind == "mae":
        return float(np.mean(np.abs(preds.astype(np.float64) - labels)))
    if kind == "error_rate":
        probs = preds.astype(np.float64)
        wrong = (probs >= 0.5) != (labels >= 0.5)
        # missing rows carry NaN and are scored wrong on every bit
        wrong |= np.isnan(probs)
        return float(np.mean(wrong))
    raise ValueError(f"unknown task metric {kind!r}")


def apply_missing_policy(kind, preds, missing, label_range=None):
    """Overwrite predictions of missing samples.

    Classification: class ``-1`` (never correct). Binary attributes: NaN
    (every bit wrong). Regression: the midpoint of ``label_range``.
    """
    missing = np.asarray(missing, dtype=bool)
    out = np.array(preds, copy=True)
    if not missing.any():
        return out
    if kind == "classification":
        out[missing] = -1
    elif kind == "binary-attrs":
        out = out.astype(np.float64)
        out[missing] = np.nan
    elif kind == "regression":
        if label_range is None:
            raise ValueError("regression task needs a label range for missing samples")
        lo, hi = label_range
        out = out.astype(np.float64)
        out[missing] = (lo + hi) / 2.0
    else:
        raise ValueError(f"no missing-sample rule for task kind {kind!r}")
    return out


def score_task(kind, metric, preds, labels, missing=None, label_range=None):
    n = len(labels)
    if missing is None:
        missing = np.zeros(n, dtype=bool)
    adjusted = apply_missing_policy(kind, preds, missing, label_range)
    return MetricReport(metric, task_metric(metric, adjusted, labels), n, int(np.sum(missing)))


def pair_distances(embeddings, left, right, normalize=False):
    e = np.asarray(embeddings, dtype=np.float64)
    if normalize:
        norms = np.linalg.norm(e, axis=1, keepdims=True)
        e = e / np.where(norms == 0.0, 1.0, norms)
    return np.linalg.norm(e[left] - e[right], axis=1)


def best_threshold(dist, same):
    """Accuracy-maximising threshold for ``same iff dist <= t``; smallest on ties."""
    thr, acc = kernels.threshold_sweep(np.asarray(dist, dtype=np.float64), np.asarray(same, dtype=bool))
    k = int(np.argmax(acc))
    return float(thr[k]), float(acc[k])


def pair_verification(embeddings, left, right, same, n_folds=10, normalize=False):
    """Fold-held-out threshold protocol on L2 distances between pairs."""
    if n_folds < 2:
        raise ValueError("pair_verification needs at least 2 folds")
    same = np.asarray(same, dtype=bool)
    if len(same) < n_folds:
        raise ValueError("fewer pairs than folds")
    dist = pair_distances(embeddings, np.asarray(left), np.asarray(right), normalize)
    return verify_distances(dist, same, n_folds)


def verify_distances(dist, same, n_folds=10):
    dist = np.asarray(dist, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    folds = np.array_split(np.arange(len(same)), n_folds)
    values, flags = [], []
    for k, held in enumerate(folds):
        rest = np.concatenate([f for j, f in enumerate(folds) if j != k])
        t, _ = best_threshold(dist[rest], same[rest])
        values.append(float(np.mean((dist[held] <= t) == same[held])))
        if same[held].all() or not same[held].any():
            flags.append(f"fold {k}: single class")
    return MetricReport("pair_accuracy", float(np.mean(values)), len(same), 0, values, flags)
