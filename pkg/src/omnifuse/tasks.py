"""Task descriptions shared by the synthetic world, experts and transfer."""

from dataclasses import asdict, dataclass

import numpy as np

TASK_KINDS = ("classification", "regression", "binary-attrs", "identity-pairs")
TARGETS = ("expression", "identity", "age", "age_class", "gender", "ethnic", "attrs", "object", "pain")
DEFAULT_METRIC = {
    "classification": "accuracy",
    "regression": "mae",
    "binary-attrs": "error_rate",
    "identity-pairs": "pair_accuracy",
}
LABEL_RANGES = {"age": (0.0, 100.0), "pain": (0.0, 6.0)}
N_AGE_BINS = 7
N_OBJECT_CLASSES = 4


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str
    target: str
    domain_id: int = 0
    n_train: int = 800
    n_val: int = 200
    n_test: int = 500
    n_pairs: int = 600
    missing_rate: float = 0.0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.target not in TARGETS:
            raise ValueError(f"unknown task target {self.target!r}")
        if self.kind == "regression" and self.target not in LABEL_RANGES:
            raise ValueError(f"{self.name}: regression needs a ranged target, got {self.target!r}")
        if self.kind == "binary-attrs" and self.target != "attrs":
            raise ValueError(f"{self.name}: binary-attrs tasks predict 'attrs'")
        if self.kind == "identity-pairs" and self.target != "identity":
            raise ValueError(f"{self.name}: identity-pairs tasks predict 'identity'")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError(f"{self.name}: every split needs at least one sample")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError(f"{self.name}: missing_rate must lie in [0, 1)")

    @property
    def metric(self):
        return DEFAULT_METRIC[self.kind]

    @property
    def label_range(self):
        return LABEL_RANGES.get(self.target)

    @property
    def n_total(self):
        return self.n_train + self.n_val + self.n_test

    def to_dict(self):
        return asdict(self)


def n_classes_for(target, world_cfg):
    return {
        "expression": world_cfg.n_classes,
        "identity": world_cfg.n_identities,
        "age_class": N_AGE_BINS,
        "gender": 2,
        "ethnic": world_cfg.n_ethnic,
        "object": N_OBJECT_CLASSES,
    }[target]


def output_dim(task, world_cfg):
    """Width of the prediction layer a head needs for ``task``."""
    if task.kind == "regression":
        return 1
    if task.kind == "binary-attrs":
        return world_cfg.n_attrs
    return n_classes_for(task.target, world_cfg)


def loss_kind_for(kind):
    return {"classification": "softmax_ce", "identity-pairs": "softmax_ce",
            "regression": "mse", "binary-attrs": "bce"}[kind]


def output_act_for(kind):
    return "sigmoid" if kind == "binary-attrs" else "identity"


def encode_targets(kind, labels, label_range=None):
    """Labels in the form the training loss consumes."""
    if kind == "regression":
        lo, hi = label_range
        return ((np.asarray(labels, dtype=np.float64) - (lo + hi) / 2.0) / ((hi - lo) / 2.0))[:, None]
    if kind == "binary-attrs":
        return np.asarray(labels, dtype=np.float64)
    return np.asarray(labels, dtype=np.int64)


def decode_outputs(kind, out, label_range=None):
    """Network outputs -> predictions in label space."""
    if kind == "regression":
        lo, hi = label_range
        return out[:, 0] * ((hi - lo) / 2.0) + (lo + hi) / 2.0
    if kind == "binary-attrs":
        return out
    return np.argmax(out, axis=1)
