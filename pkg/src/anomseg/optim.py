"""AdamW with decoupled weight decay."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autodiff import Tensor


class AdamW:
    """p <- p - lr*wd*p - lr*m_hat/(sqrt(v_hat)+eps), bias-corrected moments.

    Weight decay is decoupled: it never passes through the gradient moments.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        scale = self.lr * math.sqrt(bc2) / bc1
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay:
                p.data -= (self.lr * self.weight_decay) * p.data
            p.data -= scale * m / (np.sqrt(v) + self.eps * math.sqrt(bc2))
