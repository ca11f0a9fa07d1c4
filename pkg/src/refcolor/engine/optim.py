"""Adam with bias correction."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], m: list, v: list, t: int,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place Adam update; ``t`` is the 1-based step count after this update."""
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        step = lr * (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps)
        p -= step.astype(p.dtype)


class Adam:
    def __init__(self, params: list, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        if self.clip is not None:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads if g is not None))
            if total > self.clip:
                grads = [None if g is None else g * (self.clip / total) for g in grads]
        self.t += 1
        adam_step([p.data for p in self.params], grads, self.m, self.v, self.t,
                  self.lr, self.beta1, self.beta2, self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, t: int, m: list, v: list) -> None:
        self.t = int(t)
        self.m = [np.array(a, dtype=p.data.dtype) for a, p in zip(m, self.params)]
        self.v = [np.array(a, dtype=p.data.dtype) for a, p in zip(v, self.params)]
