"""RMSprop."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import NonFiniteGradientError
from .nn import Parameter


def rmsprop_step(params: Sequence[tuple[str, Parameter]], state: dict[str, np.ndarray],
                 lr: float, rho: float = 0.9, eps: float = 1e-8) -> None:
    """One in-place update of every parameter that has a gradient; ``state`` holds the running ``v``."""
    for name, p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            bad = int(np.sum(~np.isfinite(p.grad)))
            raise NonFiniteGradientError(f"non-finite gradient in parameter {name!r} ({bad} entries)")
    for name, p in params:
        if p.grad is None:
            continue
        v = state.setdefault(name, np.zeros_like(p.data))
        v *= rho
        v += (1.0 - rho) * p.grad * p.grad
        p.data = p.data - lr * p.grad / (np.sqrt(v) + eps)


class RMSprop:
    """``v <- rho v + (1 - rho) g^2;  p <- p - lr g / (sqrt(v) + eps)``."""

    def __init__(self, named_params: Sequence[tuple[str, Parameter]], lr: float = 1e-4,
                 rho: float = 0.9, eps: float = 1e-8):
        self.params = list(named_params)
        self.lr, self.rho, self.eps = lr, rho, eps
        self.state = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self) -> None:
        rmsprop_step(self.params, self.state, self.lr, self.rho, self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None
