"""Central finite-difference checks for the autodiff engine."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numerical_gradient(fn, inputs: list[np.ndarray], wrt: int = 0, h: float = 1e-6, coords=None) -> np.ndarray:
    """d fn(*inputs) / d inputs[wrt] by central differences.

    ``fn`` maps Tensors to a scalar Tensor. ``coords`` restricts the check to
    a subset of flat indices (the rest stay zero).
    """
    base = [np.array(a, dtype=np.float64) for a in inputs]
    target = base[wrt]
    grad = np.zeros(target.size)
    flat = target.reshape(-1)
    idxs = range(target.size) if coords is None else coords
    for i in idxs:
        old = flat[i]
        flat[i] = old + h
        up = fn(*[Tensor(a) for a in base]).item()
        flat[i] = old - h
        down = fn(*[Tensor(a) for a in base]).item()
        flat[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad.reshape(target.shape)


def analytic_gradient(fn, inputs: list[np.ndarray], wrt: int = 0) -> np.ndarray:
    ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=(i == wrt)) for i, a in enumerate(inputs)]
    fn(*ts).backward()
    g = ts[wrt].grad
    return np.zeros(ts[wrt].shape) if g is None else g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - b| / max(|a|, |b|, floor), taken over the whole array."""
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check(fn, inputs, wrt: int = 0, h: float = 1e-6, coords=None) -> float:
    """Relative error between analytic and numerical gradients of ``fn``."""
    ana = analytic_gradient(fn, inputs, wrt)
    num = numerical_gradient(fn, inputs, wrt, h, coords)
    if coords is not None:
        mask = np.zeros(ana.size, dtype=bool)
        mask[list(coords)] = True
        ana = np.where(mask.reshape(ana.shape), ana, 0.0)
    return relative_error(ana, num)
