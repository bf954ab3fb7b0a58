"""Sequential layer stack with a recorded tape for reverse-mode gradients."""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from omnifuse import kernels

ACTIVATIONS = ("identity", "relu", "tanh", "sigmoid", "elu")
BN_MOMENTUM = 0.9
BN_EPS = 1e-5


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape


def act_forward(kind, z):
    if kind == "identity":
        return z
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "sigmoid":
        # split form avoids overflow in exp for large |z|
        e = np.exp(-np.abs(z))
        return np.where(z >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    if kind == "elu":
        return kernels.elu_forward(z)
    raise ValueError(f"unknown activation {kind!r}")


def act_backward(kind, z, a, grad):
    if kind == "identity":
        return grad
    if kind == "relu":
        return grad * (z > 0.0)
    if kind == "tanh":
        return grad * (1.0 - a * a)
    if kind == "sigmoid":
        return grad * a * (1.0 - a)
    if kind == "elu":
        return kernels.elu_backward(z, a, grad)
    raise ValueError(f"unknown activation {kind!r}")


def glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


def _check_input(x, width, who):
    if x.ndim != 2 or x.shape[1] != width:
        raise ValueError(f"{who}: expected input of width {width}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{who}: non-finite input")


class Dense:
    """Fully connected layer ``act(BN?(x @ W + b))``."""

    kind = "dense"

    def __init__(self, n_in, n_out, act="identity", batchnorm=False, rng=None):
        if act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {act!r}")
        self.n_in, self.n_out, self.act, self.batchnorm = int(n_in), int(n_out), act, bool(batchnorm)
        w = glorot(rng, n_in, n_out, (n_in, n_out)) if rng is not None else np.zeros((n_in, n_out))
        self.W = Parameter("W", w)
        self.b = Parameter("b", np.zeros(n_out))
        if self.batchnorm:
            self.gamma = Parameter("gamma", np.ones(n_out))
            self.beta = Parameter("beta", np.zeros(n_out))
            self.running_mean = np.zeros(n_out)
            self.running_var = np.ones(n_out)
        self._tape = None

    @property
    def in_width(self):
        return self.n_in

    @property
    def out_width(self):
        return self.n_out

    def params(self):
        ps = [self.W, self.b]
        if self.batchnorm:
            ps += [self.gamma, self.beta]
        return ps

    def buffers(self):
        if not self.batchnorm:
            return {}
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def spec(self):
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out,
                "act": self.act, "batchnorm": self.batchnorm}

    def forward(self, x, train=False, bn_running=False):
        _check_input(x, self.n_in, "dense")
        z = x @ self.W.value + self.b.value
        cache = {"x": x}
        y = z
        if self.batchnorm:
            if train and not bn_running:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                self.running_mean = BN_MOMENTUM * self.running_mean + (1 - BN_MOMENTUM) * mu
                self.running_var = BN_MOMENTUM * self.running_var + (1 - BN_MOMENTUM) * var
                cache["batch_stats"] = True
            else:
                mu, var = self.running_mean, self.running_var
                cache["batch_stats"] = False
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            zhat = (z - mu) * inv_std
            y = self.gamma.value * zhat + self.beta.value
            cache.update(zhat=zhat, inv_std=inv_std)
        a = act_forward(self.act, y)
        if train:
            cache.update(y=y, a=a)
            self._tape = cache
        return a

    def backward(self, grad):
        c = self._tape
        if c is None:
            raise RuntimeError("dense: backward called without a recorded forward pass")
        self._tape = None
        gy = act_backward(self.act, c["y"], c["a"], grad)
        gz = gy
        if self.batchnorm:
            zhat = c["zhat"]
            self.gamma.grad += np.sum(gy * zhat, axis=0)
            self.beta.grad += np.sum(gy, axis=0)
            dzhat = gy * self.gamma.value
            if c["batch_stats"]:
                n = gy.shape[0]
                gz = (c["inv_std"] / n) * (n * dzhat - dzhat.sum(axis=0) - zhat * np.sum(dzhat * zhat, axis=0))
            else:
                gz = dzhat * c["inv_std"]
        self.W.grad += c["x"].T @ gz
        self.b.grad += gz.sum(axis=0)
        return gz @ self.W.value.T


class Conv2d:
    """3x3 same-padding convolution on flattened ``(N, C*H*W)`` inputs."""

    kind = "conv2d"

    def __init__(self, in_ch, out_ch, hw, act="elu", k=3, rng=None):
        self.in_ch, self.out_ch, self.hw, self.act, self.k = int(in_ch), int(out_ch), int(hw), act, int(k)
        self.pad = self.k // 2
        fan_in, fan_out = in_ch * k * k, out_ch * k * k
        w = glorot(rng, fan_in, fan_out, (fan_in, out_ch)) if rng is not None else np.zeros((fan_in, out_ch))
        self.W = Parameter("W", w)
        self.b = Parameter("b", np.zeros(out_ch))
        self._tape = None

    @property
    def in_width(self):
        return self.in_ch * self.hw * self.hw

    @property
    def out_width(self):
        return self.out_ch * self.hw * self.hw

    def params(self):
        return [self.W, self.b]

    def buffers(self):
        return {}

    def spec(self):
        return {"kind": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch,
                "hw": self.hw, "act": self.act, "k": self.k}

    def forward(self, x, train=False, bn_running=False):
        _check_input(x, self.in_width, "conv2d")
        n = x.shape[0]
        cols = kernels.im2col(x.reshape(n, self.in_ch, self.hw, self.hw), self.k, self.pad)
        z = cols @ self.W.value + self.b.value
        a = act_forward(self.act, z)
        if train:
            self._tape = {"cols": cols, "z": z, "a": a, "n": n}
        return a.reshape(n, self.hw, self.hw, self.out_ch).transpose(0, 3, 1, 2).reshape(n, -1)

    def backward(self, grad):
        c = self._tape
        if c is None:
            raise RuntimeError("conv2d: backward called without a recorded forward pass")
        self._tape = None
        n = c["n"]
        g = grad.reshape(n, self.out_ch, self.hw, self.hw).transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        gz = act_backward(self.act, c["z"], c["a"], g)
        self.W.grad += c["cols"].T @ gz
        self.b.grad += gz.sum(axis=0)
        dcols = gz @ self.W.value.T
        dx = kernels.col2im(dcols, (n, self.in_ch, self.hw, self.hw), self.k, self.pad)
        return dx.reshape(n, -1)


class AvgPool2:
    """Non-overlapping 2x2 average pooling on flattened ``(N, C*H*W)`` inputs."""

    kind = "avgpool2"

    def __init__(self, ch, hw):
        if hw % 2:
            raise ValueError("avgpool2 needs an even spatial size")
        self.ch, self.hw = int(ch), int(hw)
        self._n = None

    @property
    def in_width(self):
        return self.ch * self.hw * self.hw

    @property
    def out_width(self):
        return self.ch * (self.hw // 2) ** 2

    def params(self):
        return []

    def buffers(self):
        return {}

    def spec(self):
        return {"kind": self.kind, "ch": self.ch, "hw": self.hw}

    def forward(self, x, train=False, bn_running=False):
        _check_input(x, self.in_width, "avgpool2")
        n, h = x.shape[0], self.hw // 2
        out = x.reshape(n, self.ch, h, 2, h, 2).mean(axis=(3, 5))
        if train:
            self._n = n
        return out.reshape(n, -1)

    def backward(self, grad):
        if self._n is None:
            raise RuntimeError("avgpool2: backward called without a recorded forward pass")
        n, h = self._n, self.hw // 2
        self._n = None
        g = grad.reshape(n, self.ch, h, 1, h, 1) / 4.0
        return np.broadcast_to(g, (n, self.ch, h, 2, h, 2)).reshape(n, -1)


LAYER_KINDS = {"dense": Dense, "conv2d": Conv2d, "avgpool2": AvgPool2}


def layer_from_spec(spec):
    spec = dict(spec)
    cls = LAYER_KINDS[spec.pop("kind")]
    return cls(**spec)


class Sequential:
    """Static stack of layers; ``forward(train=True)`` records the tape."""

    def __init__(self, layers, name="net"):
        self.layers = list(layers)
        self.name = name
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_width != nxt.in_width:
                raise ValueError(f"{name}: width mismatch {prev.out_width} -> {nxt.in_width}")

    @property
    def in_width(self):
        return self.layers[0].in_width

    @property
    def out_width(self):
        return self.layers[-1].out_width

    def forward(self, x, train=False, bn_running=False):
        x = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            x = layer.forward(x, train=train, bn_running=bn_running)
        return x

    __call__ = forward

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_params(self):
        out = []
        for i, layer in enumerate(self.layers):
            for p in layer.params():
                out.append((f"{self.name}.{i}.{p.name}", p))
        return out

    def params(self):
        return [p for _, p in self.named_params()]

    def zero_grad(self):
        for p in self.params():
            p.grad[...] = 0.0

    def n_params(self):
        return int(sum(p.value.size for p in self.params()))

    def spec(self):
        return [layer.spec() for layer in self.layers]

    def state(self):
        """Flat name -> array map of parameters and buffers (copies)."""
        out = {name: p.value.copy() for name, p in self.named_params()}
        for i, layer in enumerate(self.layers):
            for bname, buf in layer.buffers().items():
                out[f"{self.name}.{i}.{bname}"] = np.array(buf, copy=True)
        return out

    def load_state(self, state):
        for name, p in self.named_params():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.value.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.value.shape}")
            p.value = arr.copy()
            p.grad = np.zeros_like(p.value)
        for i, layer in enumerate(self.layers):
            for bname in layer.buffers():
                setattr(layer, bname, np.array(state[f"{self.name}.{i}.{bname}"], dtype=np.float64))

    def copy(self, name=None):
        twin = Sequential([layer_from_spec(s) for s in self.spec()], name=name or self.name)
        st = self.state()
        if name is not None and name != self.name:
            st = {name + k[len(self.name):]: v for k, v in st.items()}
        twin.load_state(st)
        return twin

    @classmethod
    def from_spec(cls, spec, state=None, name="net"):
        net = cls([layer_from_spec(s) for s in spec], name=name)
        if state is not None:
            net.load_state(state)
        return net


def mlp(widths, acts, rng, name="net", batchnorm=None):
    """Dense stack; ``acts[i]`` applies after layer ``i``."""
    if len(acts) != len(widths) - 1:
        raise ValueError("need one activation per layer")
    bns = batchnorm or [False] * len(acts)
    layers = [Dense(widths[i], widths[i + 1], acts[i], bns[i], rng=rng.split(f"{name}.{i}"))
              for i in range(len(acts))]
    return Sequential(layers, name=name)


def param_hash(*models):
    """SHA-256 over every parameter and buffer of the given models."""
    h = hashlib.sha256()
    for m in models:
        for key, arr in sorted(m.state().items()):
            h.update(key.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()
