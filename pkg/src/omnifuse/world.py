"""Synthetic latent-factor world, rendered observations and expert encoders."""

from dataclasses import asdict, dataclass, field

import numpy as np

from omnifuse.embeddings import EmbeddingSet
from omnifuse.engine import Adam, Rng, Sequential, loss_and_grad, mlp
from omnifuse.metrics import task_metric
from omnifuse.tasks import (
    LABEL_RANGES,
    N_AGE_BINS,
    N_OBJECT_CLASSES,
    TaskSpec,
    decode_outputs,
    encode_targets,
    loss_kind_for,
    n_classes_for,
    output_act_for,
)

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class WorldConfig:
    n_classes: int = 7
    n_attrs: int = 8
    n_z: int = 4
    d_x: int = 256
    n_domains: int = 3
    noise: float = 0.3
    n_identities: int = 80
    id_dim: int = 6
    n_ethnic: int = 5
    render_hidden: int = 96
    render_gain: float = 1.5
    domain_shift: float = 0.15
    image_mode: bool = False

    def __post_init__(self):
        ints = ("n_classes", "n_attrs", "n_z", "d_x", "n_domains", "n_identities", "id_dim",
                "n_ethnic", "render_hidden")
        for name in ints:
            if int(getattr(self, name)) < 1:
                raise ValueError(f"world config: {name} must be >= 1")
        if self.noise < 0 or self.domain_shift < 0:
            raise ValueError("world config: noise and domain_shift must be >= 0")
        if self.image_mode and self.d_x != 256:
            raise ValueError("world config: image mode renders 16x16 images, d_x must be 256")

    @property
    def n_derived_attrs(self):
        return self.n_attrs // 2

    @property
    def latent_width(self):
        return (self.n_classes + self.id_dim + 1 + self.n_ethnic + 1
                + (self.n_attrs - self.n_derived_attrs) + self.n_z)


@dataclass
class LatentBatch:
    """Per-sample latent factors (one row per sample)."""

    identity: np.ndarray
    class_label: np.ndarray
    age: np.ndarray
    attrs: np.ndarray
    nuisance: np.ndarray

    def __len__(self):
        return len(self.identity)

    def take(self, idx):
        return LatentBatch(*(getattr(self, f)[idx] for f in ("identity", "class_label", "age", "attrs", "nuisance")))


@dataclass
class RenderMap:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    domain_id: int

    def apply(self, v):
        return np.tanh(np.tanh(v @ self.w1 + self.b1) @ self.w2 + self.b2)


class World:
    """Immutable generator of latents, observations and labels."""

    def __init__(self, cfg, seed):
        self.cfg = cfg
        self.seed = int(seed)
        r = Rng(seed).split("world")
        c = cfg
        ident = r.split("identities")
        self.id_proto = ident.normal(size=(c.n_identities, c.id_dim))
        self.id_gender = ident.integers(0, 2, size=c.n_identities)
        self.id_ethnic = ident.integers(0, c.n_ethnic, size=c.n_identities)
        sem_width = c.n_classes + c.id_dim + 2
        self.attr_proj = r.split("attrs").normal(size=(sem_width, c.n_derived_attrs))
        self.object_proj = r.split("object").normal(size=(c.n_z, N_OBJECT_CLASSES))
        self.pain_by_class = r.split("pain").normal(0.0, 0.8, size=c.n_classes)
        self.render_maps = self._make_render_maps(r.split("render"))

    def _make_render_maps(self, r):
        c = self.cfg
        lw, hw = c.latent_width, c.render_hidden

        def draw(rr):
            return (rr.normal(0.0, c.render_gain / np.sqrt(lw), size=(lw, hw)),
                    rr.normal(0.0, 0.2, size=hw),
                    rr.normal(0.0, 1.2 / np.sqrt(hw), size=(hw, c.d_x)),
                    rr.normal(0.0, 0.2, size=c.d_x))

        base = draw(r.split("base"))
        scale = 1.0 / np.sqrt(1.0 + c.domain_shift**2)
        maps = []
        for d in range(c.n_domains):
            if d == 0:
                parts = base
            else:
                delta = draw(r.split(f"delta{d}"))
                parts = tuple((b + c.domain_shift * dd) * scale for b, dd in zip(base, delta))
            maps.append(RenderMap(*parts, domain_id=d))
        return maps

    # latents -----------------------------------------------------------
    def sample_latents(self, n, rng):
        c = self.cfg
        identity = rng.integers(0, c.n_identities, size=n)
        class_label = rng.integers(0, c.n_classes, size=n)
        age = rng.uniform(0.0, 100.0, size=n)
        nuisance = rng.normal(size=(n, c.n_z))
        free_bits = rng.integers(0, 2, size=(n, c.n_attrs - c.n_derived_attrs))
        derived = (self._semantic(identity, class_label, age) @ self.attr_proj > 0).astype(np.int64)
        attrs = np.concatenate([derived, free_bits], axis=1)
        return LatentBatch(identity, class_label, age, attrs, nuisance)

    def _semantic(self, identity, class_label, age):
        c = self.cfg
        onehot = np.eye(c.n_classes)[class_label] - 1.0 / c.n_classes
        gender = (2.0 * self.id_gender[identity] - 1.0)[:, None]
        return np.concatenate([onehot, self.id_proto[identity], gender, (age / 50.0 - 1.0)[:, None]], axis=1)

    def latent_vector(self, lat):
        c = self.cfg
        free = lat.attrs[:, c.n_derived_attrs:]
        return np.concatenate([
            np.eye(c.n_classes)[lat.class_label],
            self.id_proto[lat.identity],
            (2.0 * self.id_gender[lat.identity] - 1.0)[:, None],
            np.eye(c.n_ethnic)[self.id_ethnic[lat.identity]],
            (lat.age / 50.0 - 1.0)[:, None],
            2.0 * free - 1.0,
            lat.nuisance,
        ], axis=1)

    def render(self, lat, domain_id, rng):
        if not 0 <= domain_id < self.cfg.n_domains:
            raise ValueError(f"unknown domain_id {domain_id}")
        x = self.render_maps[domain_id].apply(self.latent_vector(lat))
        if self.cfg.noise > 0:
            x = x + self.cfg.noise * rng.normal(size=x.shape)
        return x

    # labels ------------------------------------------------------------
    def labels(self, target, lat):
        if target == "expression":
            return lat.class_label.copy()
        if target == "identity":
            return lat.identity.copy()
        if target == "age":
            return lat.age.copy()
        if target == "age_class":
            return np.minimum((lat.age / (100.0 / N_AGE_BINS)).astype(np.int64), N_AGE_BINS - 1)
        if target == "gender":
            return self.id_gender[lat.identity].copy()
        if target == "ethnic":
            return self.id_ethnic[lat.identity].copy()
        if target == "attrs":
            return lat.attrs.copy()
        if target == "object":
            return np.argmax(lat.nuisance @ self.object_proj, axis=1)
        if target == "pain":
            return 3.0 + 3.0 * np.tanh(self.pain_by_class[lat.class_label] + 0.6 * lat.nuisance[:, 0])
        raise ValueError(f"unknown target {target!r}")


def gen_world(seed, config=None):
    return World(config or WorldConfig(), seed)


@dataclass
class SyntheticDataset:
    observations: np.ndarray
    split: np.ndarray  # 0 train, 1 val, 2 test
    domain_id: int
    labels: dict = field(default_factory=dict)
    latents: LatentBatch = None
    pairs: dict = field(default_factory=dict)  # split name -> (left, right, same)
    missing: np.ndarray = None

    def __post_init__(self):
        n = self.observations.shape[0]
        if self.split.shape != (n,):
            raise ValueError("split tags must cover every row")
        if self.missing is None:
            self.missing = np.zeros(n, dtype=bool)

    def __len__(self):
        return self.observations.shape[0]

    def indices(self, split):
        return np.flatnonzero(self.split == SPLITS.index(split))

    def rows(self, split):
        return self.observations[self.indices(split)]


def _split_tags(counts):
    return np.concatenate([np.full(k, i, dtype=np.int64) for i, k in enumerate(counts)])


def sample_unsup(world, n, domain_id, rng, fractions=(0.8, 0.1, 0.1)):
    """Unlabelled pool; only observations and split tags are kept."""
    if n < 1:
        raise ValueError("pool size must be >= 1")
    lat = world.sample_latents(n, rng.split("latents"))
    x = world.render(lat, domain_id, rng.split("noise"))
    n_val = int(round(n * fractions[1]))
    n_test = int(round(n * fractions[2]))
    n_train = n - n_val - n_test
    if n_train < 1:
        n_train, n_val, n_test = n, 0, 0
    return SyntheticDataset(x, _split_tags((n_train, n_val, n_test)), domain_id)


def make_pairs(identity, n_pairs, rng):
    """Balanced same/different identity pairs over the given rows."""
    identity = np.asarray(identity)
    by_id = {}
    for row, ident in enumerate(identity):
        by_id.setdefault(int(ident), []).append(row)
    multi = [rows for rows in by_id.values() if len(rows) >= 2]
    if len(by_id) < 2 or not multi:
        raise ValueError("identity pairs need >= 2 identities and one repeated identity")
    left, right, same = [], [], []
    for k in range(n_pairs):
        if k % 2 == 0:
            rows = multi[rng.integers(0, len(multi))]
            a, b = rng.permutation(len(rows))[:2]
            left.append(rows[a])
            right.append(rows[b])
            same.append(True)
        else:
            while True:
                a, b = rng.integers(0, len(identity), size=2)
                if identity[a] != identity[b]:
                    break
            left.append(int(a))
            right.append(int(b))
            same.append(False)
    return np.array(left), np.array(right), np.array(same)


def sample_task(world, task, rng, domain_id=None):
    """Labelled dataset for ``task``; labels are functions of the latents only."""
    domain_id = task.domain_id if domain_id is None else domain_id
    if task.kind == "identity-pairs" and world.cfg.n_identities < 2:
        raise ValueError(f"{task.name}: identity pairs need at least 2 identities")
    counts = (task.n_train, task.n_val, task.n_test)
    lat = world.sample_latents(sum(counts), rng.split("latents"))
    x = world.render(lat, domain_id, rng.split("noise"))
    split = _split_tags(counts)
    ds = SyntheticDataset(x, split, domain_id, {task.target: world.labels(task.target, lat)}, lat)
    if task.kind == "identity-pairs":
        pr = rng.split("pairs")
        for name in ("val", "test"):
            rows = ds.indices(name)
            l, r, s = make_pairs(lat.identity[rows], task.n_pairs, pr.split(name))
            ds.pairs[name] = (rows[l], rows[r], s)
    if task.missing_rate > 0:
        test = ds.indices("test")
        flags = rng.split("missing").random(len(test)) < task.missing_rate
        ds.missing[test[flags]] = True
    return ds


# experts ---------------------------------------------------------------

@dataclass(frozen=True)
class ExpertSpec:
    name: str
    target: str
    kind: str
    d_m: int
    hidden: tuple = (384, 384)
    epochs: int = 20
    n_train: int = 6000
    n_val: int = 500
    lr: float = 1e-3
    batch_size: int = 128

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


DEFAULT_EXPERTS = (
    ExpertSpec("expr", "expression", "classification", 12),
    ExpertSpec("identity", "identity", "classification", 64),
    ExpertSpec("age", "age", "regression", 16),
    ExpertSpec("gender", "gender", "classification", 4),
    ExpertSpec("attrib", "attrs", "binary-attrs", 12),
    ExpertSpec("object", "object", "classification", 64),
)


@dataclass
class Expert:
    spec: ExpertSpec
    encoder: Sequential
    head: Sequential
    val_metric: float
    chance: float
    weak: bool

    @property
    def d_m(self):
        return self.encoder.out_width


@dataclass
class ExpertBank:
    experts: list
    d_x: int

    def __post_init__(self):
        if not self.experts:
            raise ValueError("expert bank needs at least one expert")

    @property
    def names(self):
        return [e.spec.name for e in self.experts]

    @property
    def dims(self):
        return [e.d_m for e in self.experts]

    def encoders(self):
        return [e.encoder for e in self.experts]


def _out_dim(spec, cfg):
    if spec.kind == "regression":
        return 1
    if spec.kind == "binary-attrs":
        return cfg.n_attrs
    return n_classes_for(spec.target, cfg)


def _metric_for(kind):
    return {"classification": "accuracy", "regression": "mae", "binary-attrs": "error_rate"}[kind]


def chance_level(kind, train_labels, val_labels):
    """Score of the label-blind oracle: 1/C, prior mean, or majority bit."""
    if kind == "classification":
        return 1.0 / len(np.unique(np.concatenate([train_labels, val_labels])))
    if kind == "regression":
        return task_metric("mae", np.full(len(val_labels), np.mean(train_labels)), val_labels)
    majority = (np.mean(train_labels, axis=0) >= 0.5).astype(np.float64)
    return task_metric("error_rate", np.broadcast_to(majority, val_labels.shape), val_labels)


def _build_expert(spec, cfg, rng):
    widths = [cfg.d_x, *spec.hidden, spec.d_m]
    encoder = mlp(widths, ["elu"] * (len(widths) - 1), rng.split("encoder"), name=f"{spec.name}.enc")
    head = mlp([spec.d_m, _out_dim(spec, cfg)], [output_act_for(spec.kind)], rng.split("head"),
               name=f"{spec.name}.head")
    return encoder, head


def train_expert(world, spec, rng):
    cfg = world.cfg
    encoder, head = _build_expert(spec, cfg, rng.split("init"))
    task = TaskSpec(spec.name, spec.kind, spec.target, 0, spec.n_train, spec.n_val, 1)
    data = sample_task(world, task, rng.split("data"))
    labels = data.labels[spec.target]
    lr_range = LABEL_RANGES.get(spec.target)
    tr, va = data.indices("train"), data.indices("val")
    x_tr, x_va = data.observations[tr], data.observations[va]
    y_tr = encode_targets(spec.kind, labels[tr], lr_range)
    loss = loss_kind_for(spec.kind)
    params = encoder.params() + head.params()
    opt = Adam(params, spec.lr)
    order_rng = rng.split("order")
    for _ in range(spec.epochs):
        perm = order_rng.permutation(len(tr))
        for start in range(0, len(tr), spec.batch_size):
            b = perm[start:start + spec.batch_size]
            encoder.zero_grad()
            head.zero_grad()
            out = head.forward(encoder.forward(x_tr[b], train=True), train=True)
            _, g = loss_and_grad(loss, out, y_tr[b])
            encoder.backward(head.backward(g))
            opt.step()
    preds = decode_outputs(spec.kind, head.forward(encoder.forward(x_va)), lr_range)
    metric = _metric_for(spec.kind)
    val = task_metric(metric, preds, labels[va])
    chance = chance_level(spec.kind, labels[tr], labels[va])
    beats = val > chance if metric == "accuracy" else val < chance
    return Expert(spec, encoder, head, float(val), float(chance), not beats)


def train_experts(world, specs, rng):
    experts = [train_expert(world, spec, rng.split(spec.name)) for spec in specs]
    return ExpertBank(experts, world.cfg.d_x)


def extract_embeddings(bank, observations):
    """Infer-mode expert features; one ``N x d_m`` matrix per expert."""
    x = np.asarray(observations, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != bank.d_x:
        raise ValueError(f"expected observations of width {bank.d_x}, got shape {x.shape}")
    if x.shape[0] == 0:
        return EmbeddingSet(bank.names, [np.zeros((0, d)) for d in bank.dims])
    return EmbeddingSet(bank.names, [e.encoder.forward(x) for e in bank.experts])
