"""Task heads on top of frozen or fine-tuned encoders, and the BT/BCT selection baselines."""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from omnifuse.engine import Adam, Dense, Sequential, loss_and_grad, param_hash
from omnifuse.metrics import HIGHER_IS_BETTER, apply_missing_policy, pair_verification, task_metric
from omnifuse.tasks import decode_outputs, encode_targets, loss_kind_for, output_act_for, output_dim

MODES = ("CF", "WF")
MAX_SUBSET_MODALITIES = 12


class EncoderMutated(AssertionError):
    pass


@dataclass
class TransferConfig:
    epochs: int = 100
    lr: float = 3e-3
    batch_size: int = 128
    encoder_lr_scale: float = 0.1
    n_folds: int = 10


@dataclass
class FrozenEncoder:
    """Inference-only encoder given by a function, e.g. the full teacher path.

    ``fingerprint`` returns a hash of every weight the function reads.
    """

    encode: object
    fingerprint: object
    out_width: int


@dataclass
class TransferResult:
    metric: str
    value: float
    val_value: float
    n: int
    n_missing: int
    history: dict = field(default_factory=dict)
    head: Sequential = None
    encoder: object = None


def build_head(d_e, task, rng, n_out=None, world_cfg=None):
    """Two dense layers: ``d_e -> ceil(d_e/2)`` with batchnorm and elu, then the output layer."""
    if d_e < 2:
        raise ValueError("head input width must be >= 2")
    if n_out is None:
        from omnifuse.world import WorldConfig

        n_out = output_dim(task, world_cfg or WorldConfig())
    hidden = math.ceil(d_e / 2)
    layers = [
        Dense(d_e, hidden, "elu", batchnorm=True, rng=rng.split("head.0")),
        Dense(hidden, n_out, output_act_for(task.kind), rng=rng.split("head.1")),
    ]
    return Sequential(layers, name="head")


def _backbone(encoder):
    """The trainable network inside a student, MT model or bare Sequential."""
    if encoder is None or isinstance(encoder, FrozenEncoder):
        return None
    if isinstance(encoder, Sequential):
        return encoder
    if hasattr(encoder, "backbone"):
        return encoder.backbone
    raise TypeError(f"unsupported encoder type {type(encoder).__name__}")


def _fingerprint(encoder):
    if encoder is None:
        return ""
    if isinstance(encoder, FrozenEncoder):
        return encoder.fingerprint()
    return param_hash(_backbone(encoder))


def _features(encoder, x):
    if encoder is None:
        return x
    if isinstance(encoder, FrozenEncoder):
        return encoder.encode(x)
    return _backbone(encoder).forward(x)


def _out_width(encoder, x):
    if encoder is None:
        return x.shape[1]
    if isinstance(encoder, FrozenEncoder):
        return encoder.out_width
    return _backbone(encoder).out_width


def _train_target(task, data):
    labels = data.labels[task.target]
    if task.kind == "identity-pairs":
        return encode_targets("classification", labels)
    return encode_targets(task.kind, labels, task.label_range)


def _predict(task, head, feats):
    return decode_outputs(task.kind, head.forward(feats), task.label_range)


def _val_rows(task, data):
    if task.kind == "identity-pairs":
        left, right, _ = data.pairs["val"]
        return np.unique(np.concatenate([left, right]))
    return data.indices("val")


def _val_score(task, data, head, feats, n_folds):
    va = data.indices("val")
    if task.kind == "identity-pairs":
        left, right, same = data.pairs["val"]
        return pair_verification(feats, left, right, same, n_folds, normalize=True).value
    return task_metric(task.metric, _predict(task, head, feats[va]), data.labels[task.target][va])


def _test_report(task, data, head, feats, n_folds):
    """Test metric with the missing-sample policy applied."""
    te = data.indices("test")
    missing = data.missing[te]
    if task.kind == "identity-pairs":
        left, right, same = data.pairs["test"]
        ok = ~(data.missing[left] | data.missing[right])
        value = pair_verification(feats, left[ok], right[ok], same[ok], n_folds, normalize=True).value
        n_pairs, n_miss = len(same), int(np.sum(~ok))
        # a missing pair counts as a wrong decision
        return value * (n_pairs - n_miss) / n_pairs, n_pairs, n_miss
    preds = _predict(task, head, feats[te])
    preds = apply_missing_policy(task.kind, preds, missing, task.label_range)
    return task_metric(task.metric, preds, data.labels[task.target][te]), len(te), int(missing.sum())


def _better_or_equal(metric, a, b):
    return a >= b if HIGHER_IS_BETTER[metric] else a <= b


def raw_pair_score(encoder, data, task, n_folds=10, inputs=None):
    """Verification from raw embedding distances; no head is trained."""
    x = data.observations if inputs is None else inputs
    before = _fingerprint(encoder)
    feats = _features(encoder, x)
    if _fingerprint(encoder) != before:
        raise EncoderMutated("encoder changed while computing pair features")
    left, right, same = data.pairs["val"]
    val = pair_verification(feats, left, right, same, n_folds, normalize=True).value
    value, n, n_miss = _test_report(task, data, None, feats, n_folds)
    return TransferResult(task.metric, float(value), float(val), n, n_miss, encoder=encoder)


def transfer_train(encoder, head, data, task, mode, cfg, rng, inputs=None):
    """Fit ``head`` (CF) or ``encoder`` + ``head`` (WF) on the task's train split.

    ``encoder`` is a student, MT model, bare Sequential, FrozenEncoder, or
    None for a head applied directly to ``inputs``. The weights with the best
    validation score, initial ones included, are kept and scored on test.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    x = data.observations if inputs is None else np.asarray(inputs, dtype=np.float64)
    if x.shape[0] != len(data):
        raise ValueError("inputs must align with dataset rows")
    if _out_width(encoder, x) != head.in_width:
        raise ValueError(f"encoder width {_out_width(encoder, x)} != head input {head.in_width}")
    net = _backbone(encoder)
    if mode == "WF" and net is None:
        raise ValueError("WF needs a trainable encoder")
    before = _fingerprint(encoder)
    tr = data.indices("train")
    y = _train_target(task, data)
    loss = loss_kind_for(task.kind)
    order = rng.split("order")

    if mode == "CF":
        feats = _features(encoder, x)
        groups = [(head.params(), cfg.lr)]
    else:
        feats = None
        groups = [(net.params(), cfg.lr * cfg.encoder_lr_scale), (head.params(), cfg.lr)]
    opt = Adam(groups, cfg.lr)

    def snapshot():
        return head.state(), (net.state() if mode == "WF" else None)

    val_rows = _val_rows(task, data)

    def current_feats(rows=None):
        if mode == "CF":
            return feats
        if rows is None:
            return net.forward(x)
        out = np.zeros((len(x), net.out_width))
        out[rows] = net.forward(x[rows])  # only what the validation score reads
        return out

    best = _val_score(task, data, head, current_feats(val_rows), cfg.n_folds)
    best_state = snapshot()
    history = {"val": [best], "best_epoch": 0}
    for epoch in range(1, cfg.epochs + 1):
        perm = tr[order.permutation(len(tr))]
        for start in range(0, len(perm), cfg.batch_size):
            b = perm[start:start + cfg.batch_size]
            if len(b) < 2:
                continue  # batchnorm needs two rows
            head.zero_grad()
            if mode == "CF":
                out = head.forward(feats[b], train=True)
                _, g = loss_and_grad(loss, out, y[b])
                head.backward(g)
            else:
                net.zero_grad()
                out = head.forward(net.forward(x[b], train=True), train=True)
                _, g = loss_and_grad(loss, out, y[b])
                net.backward(head.backward(g))
            opt.step()
        val = _val_score(task, data, head, current_feats(val_rows), cfg.n_folds)
        history["val"].append(val)
        if val != best and _better_or_equal(task.metric, val, best):
            best, best_state = val, snapshot()
            history["best_epoch"] = epoch
    head.load_state(best_state[0])
    if mode == "WF":
        net.load_state(best_state[1])
    elif _fingerprint(encoder) != before:
        raise EncoderMutated("CF run modified the frozen encoder")
    value, n, n_miss = _test_report(task, data, head, current_feats(), cfg.n_folds)
    return TransferResult(task.metric, float(value), float(best), n, n_miss, history, head, encoder)


# brute-force modality selection ------------------------------------------

@dataclass
class Candidate:
    subset: tuple
    val_value: float


@dataclass
class Selection:
    subset: tuple
    names: list
    metric: str
    val_value: float
    value: float
    n: int
    n_missing: int
    candidates: list
    results: dict = field(default_factory=dict, repr=False)


def candidate_subsets(m, combos):
    if m < 1:
        raise ValueError("need at least one modality")
    if combos == "single":
        return [(i,) for i in range(m)]
    if combos == "all_subsets":
        if m > MAX_SUBSET_MODALITIES:
            raise ValueError(f"all_subsets limited to {MAX_SUBSET_MODALITIES} modalities, got {m}")
        return [s for k in range(1, m + 1) for s in itertools.combinations(range(m), k)]
    raise ValueError(f"combos must be 'single' or 'all_subsets', got {combos!r}")


def pick_best(candidates, metric):
    """Best validation value; ties go to the lexicographically smallest subset."""
    sign = -1.0 if HIGHER_IS_BETTER[metric] else 1.0
    return min(candidates, key=lambda c: (sign * c.val_value, c.subset))


def select_transfer(embeddings, data, task, combos, cfg, rng, n_out=None, world_cfg=None):
    """Train one head per candidate subset of modalities and report the winner.

    ``embeddings`` is an EmbeddingSet aligned with ``data`` rows. Each
    candidate draws its rng from a label naming its modalities, so a subset
    gets the same head whichever mode enumerated it.
    """
    subsets = candidate_subsets(len(embeddings.names), combos)
    results = {}
    candidates = []
    for subset in subsets:
        feats = np.concatenate([embeddings.matrices[i] for i in subset], axis=1)
        label = "+".join(embeddings.names[i] for i in subset)
        if task.kind == "identity-pairs":
            res = raw_pair_score(None, data, task, cfg.n_folds, inputs=feats)
        else:
            head = build_head(feats.shape[1], task, rng.split(label).split("init"), n_out, world_cfg)
            res = transfer_train(None, head, data, task, "CF", cfg, rng.split(label), inputs=feats)
        results[subset] = res
        candidates.append(Candidate(subset, res.val_value))
    return selection_from(candidates, results, embeddings.names, task.metric)


def selection_from(candidates, results, names, metric, keep=None):
    """Winner among ``candidates`` (optionally only those passing ``keep``)."""
    pool = [c for c in candidates if keep is None or keep(c.subset)]
    best = pick_best(pool, metric)
    res = results[best.subset]
    return Selection(best.subset, [names[i] for i in best.subset], metric, best.val_value,
                     res.value, res.n, res.n_missing, pool, results)
