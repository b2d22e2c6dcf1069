"""Plain SGD with momentum; all the demo training needs."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, no_grad


class SGD:
    def __init__(self, params, lr: float = 0.05, momentum: float = 0.9):
        self.params: list[Tensor] = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        with no_grad():
            for p, v in zip(self.params, self.velocity):
                if p.grad is None:
                    continue
                v *= self.momentum
                v += p.grad
                p.data -= self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None
