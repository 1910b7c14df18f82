from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


class Adam:
    """Bias-corrected Adam; moments start at zero and live alongside each parameter."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, names=None):
        self.params = [p for p in params if p.requires_grad]
        self.names = names or [f"param[{i}]" for i in range(len(self.params))]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        # validate everything before touching any parameter
        for name, p in zip(self.names, self.params):
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                bad = int(np.size(p.grad) - np.isfinite(p.grad).sum())
                raise NonFiniteGradient(f"{bad} non-finite gradient entries in {name}; step aborted")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.lr == 0.0:
                continue
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: dict, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8, step: int = 1) -> None:
    """Functional form of one Adam update; ``state`` holds the moment arrays."""
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {i}")
        m, v = state.setdefault(i, (np.zeros_like(p.data), np.zeros_like(p.data)))
        m[...] = beta1 * m + (1 - beta1) * g
        v[...] = beta2 * v + (1 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total
