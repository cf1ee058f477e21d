from __future__ import annotations

import numpy as np


class DivergedLoss(FloatingPointError):
    """Loss became NaN or infinite during optimisation."""


def check_finite(loss: float, where: str, step: int) -> None:
    if not np.isfinite(loss):
        raise DivergedLoss(f"{where}: non-finite loss {loss!r} at step {step}")


def clip_global_norm(grads: dict, max_norm: float | None) -> float:
    """Scale `grads` in place so their joint L2 norm is at most `max_norm`.
    Returns the norm before clipping."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is not None and total > max_norm > 0:
        s = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= s
    return total


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        """In-place update of every entry of `params` that has a gradient."""
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
