from __future__ import annotations

import numpy as np

from .tape import Parameter


class Adam:
    """Adam with a step-decayed learning rate: lr * decay ** (iteration // decay_every)."""

    def __init__(self, params: list[Parameter], lr: float = 0.005, decay: float = 0.99,
                 decay_every: int = 100, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.decay = decay
        self.decay_every = decay_every
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.iteration = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    @property
    def current_lr(self) -> float:
        return self.lr * self.decay ** (self.iteration // self.decay_every)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        lr = self.current_lr
        self.iteration += 1
        t = self.iteration
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
