"""Student distillation against the frozen teacher code, and the joint MT baseline."""

import hashlib
from dataclasses import dataclass

import numpy as np

from omnifuse import kernels
from omnifuse.embeddings import EmbeddingSet
from omnifuse.engine import Adam, AvgPool2, Conv2d, Dense, Sequential, loss_and_grad, mlp, param_hash
from omnifuse.metrics import rrmse


class DistillDiverged(FloatingPointError):
    pass


class TeacherMutated(AssertionError):
    pass


def cosine_distance(a, b):
    """``1 - cos(a, b)`` for two vectors; a zero-norm input gives 1."""
    a = np.asarray(a, dtype=np.float64).reshape(1, -1)
    b = np.asarray(b, dtype=np.float64).reshape(1, -1)
    if a.shape != b.shape:
        raise ValueError("cosine_distance: length mismatch")
    dist, _, _ = kernels.cosine_rows(a, b)
    return float(dist[0])


def cosine_distances(a, b):
    """Row-wise distances plus a mask of rows where either side had zero norm."""
    dist, _, degenerate = kernels.cosine_rows(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return dist, degenerate


@dataclass
class StudentEncoder:
    backbone: Sequential
    mode: str = "mlp"

    @property
    def out_width(self):
        return self.backbone.out_width

    @property
    def in_width(self):
        return self.backbone.in_width

    def params(self):
        return self.backbone.params()

    def n_params(self):
        return self.backbone.n_params()


def build_student(d_x, d_e, rng, hidden=(256, 256), mode="mlp", name="student"):
    if mode == "mlp":
        widths = [d_x, *hidden, d_e]
        acts = ["elu"] * len(hidden) + ["identity"]
        return StudentEncoder(mlp(widths, acts, rng, name=name), "mlp")
    if mode == "conv":
        if d_x != 256:
            raise ValueError("conv student expects 16x16 single-channel inputs (d_x=256)")
        layers = [
            Conv2d(1, 8, 16, "elu", rng=rng.split("c0")), AvgPool2(8, 16),
            Conv2d(8, 16, 8, "elu", rng=rng.split("c1")), AvgPool2(16, 8),
            Conv2d(16, 16, 4, "elu", rng=rng.split("c2")), AvgPool2(16, 4),
            Dense(64, d_e, "identity", rng=rng.split("head")),
        ]
        return StudentEncoder(Sequential(layers, name=name), "conv")
    raise ValueError(f"unknown student mode {mode!r}")


def student_encode(student, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != student.in_width:
        raise ValueError(f"student expects width {student.in_width}, got {x.shape}")
    return student.backbone.forward(x)


@dataclass
class DistillConfig:
    epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 64


def teacher_codes(bank, rescaler, fusion, observations):
    from omnifuse.world import extract_embeddings

    return fusion.encode(rescaler.apply(extract_embeddings(bank, observations)))


def teacher_hash(bank, fusion):
    """SHA-256 over every weight on the teacher path (experts + fusion)."""
    digest = hashlib.sha256(param_hash(*[e.encoder for e in bank.experts], *fusion.networks()).encode())
    if fusion.kind == "pca":
        digest.update(fusion.components.tobytes())
        digest.update(fusion.mean.tobytes())
    return digest.hexdigest()


def _mean_distance(student, x, codes):
    if len(x) == 0:
        return float("nan")
    d, _ = cosine_distances(student.backbone.forward(x), codes)
    return float(d.mean())


def distill_train(student, teacher, pool, cfg, rng, targets=None):
    """Fit ``student`` to the frozen teacher code by cosine distance.

    ``teacher`` is ``(bank, rescaler, fusion)``; its codes for the pool are
    computed once (or taken from ``targets``). Weights with the lowest
    validation distance, initial weights included, are kept.
    """
    bank, rescaler, fusion = teacher
    before = teacher_hash(bank, fusion)
    codes = teacher_codes(bank, rescaler, fusion, pool.observations) if targets is None else targets
    tr, va = pool.indices("train"), pool.indices("val")
    x_tr, h_tr = pool.observations[tr], codes[tr]
    x_va, h_va = pool.observations[va], codes[va]
    net = student.backbone
    opt = Adam(net.params(), cfg.lr)
    order = rng.split("order")
    best = _mean_distance(student, x_va, h_va)
    best_state = net.state()
    history = {"train": [], "val": [best], "best_epoch": 0}
    for epoch in range(1, cfg.epochs + 1):
        perm = order.permutation(len(tr))
        total = 0.0
        for start in range(0, len(tr), cfg.batch_size):
            b = perm[start:start + cfg.batch_size]
            net.zero_grad()
            value, g = loss_and_grad("cosine", net.forward(x_tr[b], train=True), h_tr[b])
            if not np.isfinite(value):
                raise DistillDiverged(f"distillation loss non-finite at epoch {epoch}")
            net.backward(g)
            opt.step()
            total += value * len(b)
        history["train"].append(total / len(tr))
        val = _mean_distance(student, x_va, h_va)
        history["val"].append(val)
        if len(va) == 0 or val <= best:
            best, best_state = val, net.state()
            history["best_epoch"] = epoch
    net.load_state(best_state)
    if teacher_hash(bank, fusion) != before:
        raise TeacherMutated("teacher parameters changed during distillation")
    return student, history


@dataclass
class MtModel:
    backbone: Sequential
    decoder: Sequential

    @property
    def out_width(self):
        return self.decoder.out_width

    def n_params(self):
        return self.backbone.n_params() + self.decoder.n_params()


def decoder_net(widths, rng, name):
    """Decoder stack: tanh on hidden layers, identity output."""
    return mlp(list(widths), ["tanh"] * (len(widths) - 2) + ["identity"], rng, name=name)


def build_mt(d_x, decoder_widths, rng, hidden=(256, 256)):
    """Student-shaped backbone plus a fresh decoder shaped like the fusion decoder.

    ``decoder_widths`` runs from the code width to the summed embedding width.
    """
    backbone = build_student(d_x, decoder_widths[0], rng.split("backbone"), hidden, name="mt.backbone").backbone
    return MtModel(backbone, decoder_net(decoder_widths, rng.split("decoder"), "mt.decoder"))


def mt_loss(mt, x, targets):
    """Summed-over-modalities reconstruction loss of the joint model."""
    value, _ = loss_and_grad("sse", mt.decoder.forward(mt.backbone.forward(x)), targets)
    return value


def mt_train(mt, targets, pool, cfg, rng, freeze_decoder=False):
    """End-to-end fit of backbone + decoder to the rescaled expert embeddings.

    ``targets`` is an EmbeddingSet (or concatenated matrix) aligned with the
    pool rows.
    """
    y = targets.concat() if isinstance(targets, EmbeddingSet) else np.asarray(targets)
    if y.shape[0] != len(pool):
        raise ValueError("targets must align with pool rows")
    tr, va = pool.indices("train"), pool.indices("val")
    x_tr, y_tr = pool.observations[tr], y[tr]
    params = mt.backbone.params() + ([] if freeze_decoder else mt.decoder.params())
    opt = Adam(params, cfg.lr)
    order = rng.split("order")
    history = {"train": [mt_loss(mt, x_tr, y_tr)], "val": [], "best_epoch": 0}
    if len(va):
        history["val"].append(mt_loss(mt, pool.observations[va], y[va]))
    best = history["val"][0] if len(va) else None
    best_state = (mt.backbone.state(), mt.decoder.state())
    for epoch in range(1, cfg.epochs + 1):
        perm = order.permutation(len(tr))
        for start in range(0, len(tr), cfg.batch_size):
            b = perm[start:start + cfg.batch_size]
            mt.backbone.zero_grad()
            mt.decoder.zero_grad()
            h = mt.backbone.forward(x_tr[b], train=True)
            value, g = loss_and_grad("sse", mt.decoder.forward(h, train=True), y_tr[b])
            if not np.isfinite(value):
                raise DistillDiverged(f"MT loss non-finite at epoch {epoch}")
            mt.backbone.backward(mt.decoder.backward(g))
            opt.step()
        history["train"].append(mt_loss(mt, x_tr, y_tr))
        if len(va):
            val = mt_loss(mt, pool.observations[va], y[va])
            history["val"].append(val)
            if val <= best:
                best = val
                best_state = (mt.backbone.state(), mt.decoder.state())
                history["best_epoch"] = epoch
    if len(va):
        mt.backbone.load_state(best_state[0])
        mt.decoder.load_state(best_state[1])
    return mt, history


def posthoc_decoder_rrmse(codes, targets, pool, decoder_widths, cfg, rng):
    """Train a fresh decoder from ``codes`` to ``targets``; test rRMSE per modality.

    Measures how much of the expert embeddings a representation retains,
    independently of whichever decoder it was trained alongside.
    """
    y = targets.concat()
    tr, va, te = pool.indices("train"), pool.indices("val"), pool.indices("test")
    dec = decoder_net([codes.shape[1], *decoder_widths[1:]], rng.split("init"), "posthoc")
    opt = Adam(dec.params(), cfg.lr)
    order = rng.split("order")

    def val_loss():
        return loss_and_grad("sse", dec.forward(codes[va]), y[va])[0] if len(va) else 0.0

    best, best_state = val_loss(), dec.state()
    for _ in range(cfg.epochs):
        perm = order.permutation(len(tr))
        for start in range(0, len(tr), cfg.batch_size):
            b = tr[perm[start:start + cfg.batch_size]]
            dec.zero_grad()
            _, g = loss_and_grad("sse", dec.forward(codes[b], train=True), y[b])
            dec.backward(g)
            opt.step()
        v = val_loss()
        if v <= best:
            best, best_state = v, dec.state()
    dec.load_state(best_state)
    recon = targets.split_like(dec.forward(codes[te]))
    truth = targets.take(te)
    return [rrmse(r, t) for r, t in zip(recon.matrices, truth.matrices)]


def param_count(*models):
    """Exact trainable-parameter count over any mix of networks and wrappers."""
    total = 0
    for m in models:
        if isinstance(m, (list, tuple)):
            total += param_count(*m)
        elif hasattr(m, "n_params"):
            total += m.n_params()
        elif hasattr(m, "experts"):
            total += sum(e.encoder.n_params() for e in m.experts)
        else:
            raise TypeError(f"cannot count parameters of {type(m).__name__}")
    return int(total)


def teacher_param_count(bank, fusion):
    """Experts' encoders plus the fusion encoder: everything on the path x -> h_e."""
    return sum(e.encoder.n_params() for e in bank.experts) + fusion.n_params(encoder_only=True)


def compression_ratio(teacher_total, student_total):
    return float(teacher_total) / float(student_total)
