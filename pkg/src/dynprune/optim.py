"""Plain numpy optimisers operating on arrays keyed by name."""
from __future__ import annotations

import numpy as np


class MomentumSGD:
    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict[str, np.ndarray]) -> None:
        """Replace ``params[k].data`` (Tensors) with the stepped values."""
        for k, g in grads.items():
            p = params[k]
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity.get(k)
            v = g if v is None else self.momentum * v + g
            self.velocity[k] = v
            p.data = p.data - self.lr * v


class Adam:
    def __init__(self, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, values: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Return updated copies of ``values``."""
        self.t += 1
        out = {}
        for k, x in values.items():
            g = grads[k]
            m = self.b1 * self.m.get(k, np.zeros_like(x)) + (1 - self.b1) * g
            v = self.b2 * self.v.get(k, np.zeros_like(x)) + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            out[k] = x - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out
