"""Adaptive-moment gradient descent over a named parameter tree."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    """Standard bias-corrected Adam. Weight decay enters as wd * theta added
    to the gradient, the derivative of the (wd/2) * ||theta||^2 regularizer."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


class StepDecay:
    """Halve the learning rate every `interval` optimizer steps."""

    def __init__(self, optimizer: Adam, interval: int, factor: float = 0.5):
        if interval < 1:
            raise ValueError(f"decay interval must be positive, got {interval}")
        self.optimizer = optimizer
        self.interval = interval
        self.factor = factor
        self._base = optimizer.lr

    def update(self, step: int) -> float:
        """Set the lr for the given 0-based step index; returns it."""
        self.optimizer.lr = self._base * self.factor ** (step // self.interval)
        return self.optimizer.lr
