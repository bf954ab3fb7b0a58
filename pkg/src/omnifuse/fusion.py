"""Fusion operators mapping concatenated expert embeddings to one compact code."""

import math
from dataclasses import dataclass

import numpy as np

from omnifuse.embeddings import EmbeddingSet
from omnifuse.engine import Adam, loss_and_grad, mlp

FUSION_KINDS = ("concat", "pca", "ae", "vae", "dae")
RESCALE_CLAMP = 1.5


class NotFittedError(RuntimeError):
    pass


class FusionDiverged(FloatingPointError):
    pass


@dataclass
class Rescaler:
    """Per-modality, per-dimension affine map of the fit range onto [-1, 1]."""

    lo: list = None
    hi: list = None

    @property
    def fitted(self):
        return self.lo is not None

    def fit(self, emb):
        self.lo = [m.min(axis=0) for m in emb.matrices]
        self.hi = [m.max(axis=0) for m in emb.matrices]
        return self

    def apply(self, emb):
        if not self.fitted:
            raise NotFittedError("rescaler used before fit")
        if len(emb.matrices) != len(self.lo):
            raise ValueError("modality count differs from the fit set")
        out = []
        for m, lo, hi in zip(emb.matrices, self.lo, self.hi):
            span = hi - lo
            flat = span == 0.0
            scaled = 2.0 * (m - lo) / np.where(flat, 1.0, span) - 1.0
            scaled[:, flat] = 0.0
            out.append(np.clip(scaled, -RESCALE_CLAMP, RESCALE_CLAMP))
        return EmbeddingSet(list(emb.names), out)


def fit_rescaler(emb):
    return Rescaler().fit(emb)


def apply_rescaler(rescaler, emb):
    return rescaler.apply(emb)


def latent_dim_rule(dims):
    """Smallest power of two at or above the mean embedding width."""
    if not dims:
        raise ValueError("need at least one embedding width")
    mean = sum(dims) / len(dims)
    return 1 << max(0, math.ceil(math.log2(mean)))


def _round_width(w):
    step = 64 if w >= 512 else 8
    return int(step * round(w / step))


def plan_layers(input_dim, latent_dim, n_layers):
    """Hidden widths between input and latent, geometric with rounding.

    Widths follow ``input * r**i`` with ``r = (latent/input)**(1/n_layers)``,
    rounded to a multiple of 64 (>= 512) or 8 (< 512). When rounding would
    break strict monotonicity, plain integer rounding is used instead, and
    duplicates are dropped if the gap is too narrow.
    """
    if latent_dim >= input_dim:
        raise ValueError(f"latent width {latent_dim} must be below input width {input_dim}")
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    ratio = (latent_dim / input_dim) ** (1.0 / n_layers)
    raw = [input_dim * ratio**i for i in range(1, n_layers)]
    out = []
    prev = input_dim
    for w in raw:
        r = _round_width(w)
        if not latent_dim < r < prev:
            r = int(round(w))
        r = min(max(r, latent_dim + 1), prev - 1)
        if latent_dim < r < prev:
            out.append(r)
            prev = r
    return out


class FusionOperator:
    """Fitted encoder/decoder pair between concatenated embeddings and the fused code."""

    def __init__(self, kind, names, widths, latent, encoder=None, decoder=None, mean=None, components=None):
        if kind not in FUSION_KINDS:
            raise ValueError(f"unknown fusion kind {kind!r}")
        self.kind = kind
        self.names = list(names)
        self.widths = [int(w) for w in widths]
        self.latent = int(latent)
        self.encoder = encoder
        self.decoder = decoder
        self.mean = mean
        self.components = components
        if kind == "concat" and self.latent != sum(self.widths):
            raise ValueError("concat latent width must equal the summed input widths")

    @property
    def input_width(self):
        return sum(self.widths)

    @property
    def layer_plan(self):
        if self.encoder is None:
            return []
        return [layer.n_out for layer in self.encoder.layers]

    def _as_matrix(self, e):
        x = e.concat() if isinstance(e, EmbeddingSet) else np.asarray(e, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_width:
            raise ValueError(f"{self.kind}: expected input width {self.input_width}, got {x.shape}")
        return x

    def encode(self, e):
        x = self._as_matrix(e)
        if self.kind == "concat":
            return x.copy()
        if self.kind == "pca":
            return (x - self.mean) @ self.components
        h = self.encoder.forward(x)
        return h[:, :self.latent] if self.kind == "vae" else h

    def decode_flat(self, h):
        h = np.asarray(h, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.latent:
            raise ValueError(f"{self.kind}: expected code width {self.latent}, got {h.shape}")
        if self.kind == "concat":
            return h.copy()
        if self.kind == "pca":
            return h @ self.components.T + self.mean
        return self.decoder.forward(h)

    def decode(self, h):
        flat = self.decode_flat(h)
        cuts = np.cumsum(self.widths)[:-1]
        return EmbeddingSet(list(self.names), np.split(flat, cuts, axis=1))

    def networks(self):
        return [n for n in (self.encoder, self.decoder) if n is not None]

    def n_params(self, encoder_only=False):
        if self.kind == "pca":
            return int(self.components.size + (0 if encoder_only else self.mean.size))
        nets = [self.encoder] if encoder_only else self.networks()
        return int(sum(n.n_params() for n in nets if n is not None))


def encode(op, e):
    return op.encode(e)


def decode(op, h):
    return op.decode(h)


def fusion_loss(recon, target):
    """Sum over modalities of the mean (over samples) squared Euclidean error."""
    if recon.widths != target.widths or recon.n != target.n:
        raise ValueError("fusion_loss: reconstruction and target shapes differ")
    return float(sum(np.sum((r - t) ** 2) / t.shape[0] for r, t in zip(recon.matrices, target.matrices)))


def fit_concat(names, widths):
    return FusionOperator("concat", names, widths, sum(widths))


def fit_pca(x, k, names=None, widths=None):
    """Top-``k`` principal directions of ``x`` (via SVD of the centred data)."""
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if not 1 <= k <= min(n, d):
        raise ValueError(f"k={k} outside [1, min(N, D)={min(n, d)}]")
    mean = x.mean(axis=0)
    _, _, vt = np.linalg.svd(x - mean, full_matrices=False)
    comps = vt[:k].T.copy()
    # fix the sign so the largest-magnitude loading is positive
    pivot = np.argmax(np.abs(comps), axis=0)
    comps *= np.sign(comps[pivot, np.arange(k)])[None, :]
    return FusionOperator("pca", names or ["x"], widths or [d], k, mean=mean, components=comps)


@dataclass
class AutoencoderConfig:
    latent: int
    n_layers: int = 3
    epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 64
    noise_sigma: float = 0.1
    beta: float = 1.0
    hidden_act: str = "tanh"


def build_autoencoder(kind, input_dim, cfg, rng):
    hidden = plan_layers(input_dim, cfg.latent, cfg.n_layers)
    enc_widths = [input_dim, *hidden, cfg.latent]
    enc_acts = [cfg.hidden_act] * len(hidden) + ["identity"]
    if kind == "vae":
        enc_widths[-1] = 2 * cfg.latent
    encoder = mlp(enc_widths, enc_acts, rng.split("encoder"), name="fusion.enc")
    dec_widths = [cfg.latent, *reversed(hidden), input_dim]
    decoder = mlp(dec_widths, [cfg.hidden_act] * len(hidden) + ["identity"], rng.split("decoder"), name="fusion.dec")
    return encoder, decoder


def _val_loss(op, x_val):
    if x_val is None or len(x_val) == 0:
        return float("nan")
    return float(np.sum((op.decode_flat(op.encode(x_val)) - x_val) ** 2) / x_val.shape[0])


def fit_autoencoder(kind, x_train, x_val, cfg, rng, names=None, widths=None):
    """Train an ae/vae/dae fusion operator; returns ``(operator, history)``.

    The returned weights are those with the lowest validation reconstruction
    loss seen, the initial weights included.
    """
    if kind not in ("ae", "vae", "dae"):
        raise ValueError(f"fit_autoencoder handles ae/vae/dae, not {kind!r}")
    x_train = np.asarray(x_train, dtype=np.float64)
    d = x_train.shape[1]
    encoder, decoder = build_autoencoder(kind, d, cfg, rng.split("init"))
    op = FusionOperator(kind, names or ["x"], widths or [d], cfg.latent, encoder, decoder)
    order_rng, corrupt_rng, sample_rng = rng.split("order"), rng.split("corrupt"), rng.split("sample")
    opt = Adam(encoder.params() + decoder.params(), cfg.lr)
    best_val = _val_loss(op, x_val)
    best_state = (encoder.state(), decoder.state())
    history = {"train": [], "val": [best_val], "best_epoch": 0}
    n = x_train.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        perm = order_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            xb = x_train[perm[start:start + cfg.batch_size]]
            inp = xb
            if kind == "dae" and cfg.noise_sigma > 0:
                inp = xb + cfg.noise_sigma * corrupt_rng.normal(size=xb.shape)
            encoder.zero_grad()
            decoder.zero_grad()
            h = encoder.forward(inp, train=True)
            if kind == "vae":
                k = cfg.latent
                mu, logvar = h[:, :k], h[:, k:]
                eps = sample_rng.normal(size=mu.shape)
                std = np.exp(0.5 * logvar)
                z = mu + std * eps
            else:
                z = h
            recon = decoder.forward(z, train=True)
            value, g = loss_and_grad("sse", recon, xb)
            dz = decoder.backward(g)
            if kind == "vae":
                kl, gkl = loss_and_grad("vae_kl", h, None)
                value += cfg.beta * kl
                dh = np.concatenate([dz, dz * eps * 0.5 * std], axis=1) + cfg.beta * gkl
            else:
                dh = dz
            if not np.isfinite(value):
                raise FusionDiverged(f"{kind}: non-finite training loss at epoch {epoch}")
            encoder.backward(dh)
            opt.step()
            total += value * xb.shape[0]
        history["train"].append(total / n)
        val = _val_loss(op, x_val)
        if not np.isfinite(val) and x_val is not None and len(x_val):
            raise FusionDiverged(f"{kind}: non-finite validation loss at epoch {epoch}")
        history["val"].append(val)
        if x_val is None or len(x_val) == 0 or val <= best_val:
            best_val = val
            best_state = (encoder.state(), decoder.state())
            history["best_epoch"] = epoch
    encoder.load_state(best_state[0])
    decoder.load_state(best_state[1])
    return op, history


def fit_fusion(kind, x_train, x_val, latent, rng, names, widths, ae_cfg=None):
    """Dispatch on ``kind``; ``x_*`` are concatenated, already rescaled embeddings."""
    if kind == "concat":
        return fit_concat(names, widths), {}
    if kind == "pca":
        return fit_pca(x_train, latent, names, widths), {}
    cfg = ae_cfg or AutoencoderConfig(latent=latent)
    if cfg.latent != latent:
        cfg = AutoencoderConfig(**{**cfg.__dict__, "latent": latent})
    return fit_autoencoder(kind, x_train, x_val, cfg, rng, names, widths)


def decoder_widths(input_dim, latent, n_layers):
    """Widths of the symmetric decoder: code width up to the summed input width."""
    if latent >= input_dim:
        return [latent, input_dim]  # nothing to expand, e.g. concat codes
    return [latent, *reversed(plan_layers(input_dim, latent, n_layers)), input_dim]
