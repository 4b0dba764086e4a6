"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(f: Callable[[], float], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """d f / d t by central differences, perturbing ``t.data`` in place."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Iterable[tuple[str, Tensor]],
                    h: float = 1e-5) -> dict[str, float]:
    """Return ``{name: relative error}`` between backprop and finite differences.

    ``loss_fn`` must rebuild the graph from the current tensor values on
    every call and return a scalar tensor.
    """
    tensors = list(tensors)
    for _, t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in tensors}

    def value() -> float:
        return loss_fn().item()

    return {name: relative_error(analytic[name], numerical_grad(value, t, h)) for name, t in tensors}
