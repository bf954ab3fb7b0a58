"""Central finite-difference check of tape gradients."""

from dataclasses import dataclass

import numpy as np

from omnifuse.engine.losses import loss_and_grad


@dataclass
class GradCheckResult:
    max_rel_err: float
    worst_param: str
    n_checked: int


def grad_check(model, x, target, loss_kind="mse", h=1e-5, bn_running=False, max_per_param=None, rng=None):
    """Max relative error between backward() grads and central differences.

    Relative error per entry is ``|a - fd| / max(|a|, |fd|, 1e-12)``. BatchNorm
    running statistics are restored after every probe so the model is left as
    it was found. ``max_per_param`` subsamples entries (needs ``rng``).
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError("finite-difference step must lie in [1e-6, 1e-4]")
    saved = model.state()

    def restore_buffers():
        model.load_state(saved)

    def loss_at():
        out = model.forward(x, train=True, bn_running=bn_running)
        value, _ = loss_and_grad(loss_kind, out, target)
        return value

    model.zero_grad()
    out = model.forward(x, train=True, bn_running=bn_running)
    _, g = loss_and_grad(loss_kind, out, target)
    model.backward(g)
    analytic = {name: p.grad.copy() for name, p in model.named_params()}
    restore_buffers()

    worst, worst_name, n_checked = 0.0, "", 0
    for name, p in model.named_params():
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = np.sort(rng.permutation(flat.size)[:max_per_param])
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_at()
            flat[i] = orig - h
            down = loss_at()
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            a = a_flat[i]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-12)
            n_checked += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{i}]"
        restore_buffers()
    model.zero_grad()
    return GradCheckResult(worst, worst_name, n_checked)
