"""Dense float64 tensors (numpy arrays), layers, losses, optimizers."""

import numpy as np

from omnifuse.engine.gradcheck import GradCheckResult, grad_check
from omnifuse.engine.layers import (
    ACTIVATIONS,
    AvgPool2,
    Conv2d,
    Dense,
    Parameter,
    Sequential,
    act_backward,
    act_forward,
    mlp,
    param_hash,
)
from omnifuse.engine.losses import LOSS_KINDS, loss_and_grad, loss_eval, softmax
from omnifuse.engine.optim import SGD, Adam, NonFiniteGradient, make_optimizer
from omnifuse.engine.rng import Rng


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def dense_apply(layer, x, mode="infer"):
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    return layer.forward(np.asarray(x, dtype=np.float64), train=(mode == "train"))


def backward(model, dloss):
    """Zero every gradient of ``model`` and back-propagate ``dloss``."""
    model.zero_grad()
    return model.backward(dloss)


__all__ = [
    "ACTIVATIONS", "LOSS_KINDS", "Adam", "AvgPool2", "Conv2d", "Dense", "GradCheckResult",
    "NonFiniteGradient", "Parameter", "Rng", "SGD", "Sequential", "act_backward", "act_forward",
    "backward", "dense_apply", "grad_check", "loss_and_grad", "loss_eval", "make_optimizer",
    "matmul", "mlp", "param_hash", "softmax",
]
