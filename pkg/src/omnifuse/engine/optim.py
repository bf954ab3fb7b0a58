import numpy as np

from omnifuse import kernels


class NonFiniteGradient(FloatingPointError):
    pass


def _check_grads(params):
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            bad = int(np.sum(~np.isfinite(p.grad)))
            raise NonFiniteGradient(f"parameter {p.name!r}: {bad} non-finite gradient entries; step aborted")


def _groups(params, lr):
    """Accept a flat parameter list or ``[(params, lr), ...]`` groups."""
    params = list(params)
    if params and isinstance(params[0], tuple):
        return [(list(ps), float(glr)) for ps, glr in params]
    return [(params, float(lr))]


class SGD:
    def __init__(self, params, lr=0.01):
        self.groups = _groups(params, lr)

    def step(self):
        _check_grads([p for ps, _ in self.groups for p in ps])
        for ps, lr in self.groups:
            for p in ps:
                p.value -= lr * p.grad


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.groups = _groups(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = {}
        self._v = {}
        for ps, _ in self.groups:
            for p in ps:
                self._m[id(p)] = np.zeros_like(p.value)
                self._v[id(p)] = np.zeros_like(p.value)

    def step(self):
        _check_grads([p for ps, _ in self.groups for p in ps])
        self.t += 1
        for ps, lr in self.groups:
            for p in ps:
                kernels.adam_update(p.value, p.grad, self._m[id(p)], self._v[id(p)],
                                    lr, self.beta1, self.beta2, self.eps, self.t)


def make_optimizer(kind, params, lr):
    if kind == "adam":
        return Adam(params, lr)
    if kind == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer {kind!r}")
