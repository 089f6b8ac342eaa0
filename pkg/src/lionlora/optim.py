"""Adam with in-place parameter updates."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Gradients, Tensor


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 5e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 grad_clip: float | None = 1.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Gradients) -> None:
        self.t += 1
        gs = [grads.get(p) for p in self.params]
        if self.grad_clip is not None:
            # global-norm clipping, summed in parameter order
            total = 0.0
            for g in gs:
                if g is not None:
                    total += float((g.astype(np.float64) ** 2).sum())
            norm = total ** 0.5
            factor = min(1.0, self.grad_clip / (norm + 1e-12))
        else:
            factor = 1.0
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, gs, self.m, self.v):
            if g is None:
                continue
            g = g * factor
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)
