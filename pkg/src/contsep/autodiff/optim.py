"""First-order optimizers that update :class:`Tensor` parameters in place."""

from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

from ..errors import ConfigError, ContractError
from .tensor import Tensor


def _named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    return [(p.name or f"param{i}", p) for i, p in enumerate(params)]


class SGD:
    def __init__(self, params: Iterable[Tensor] | Mapping[str, Tensor], lr: float = 1e-2):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = _named(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        for name, p in self.params:
            if p.grad is None:
                raise ContractError(f"parameter '{name}' has no gradient")
            p.data -= self.lr * p.grad


class Adam:
    """Adam with bias correction.

    Moments live on the optimizer, so keeping one instance alive for a task
    carries them across steps; a new instance starts from zero moments.
    ``lr_scales`` maps parameter-name prefixes to learning-rate multipliers
    (the longest matching prefix wins).
    """

    def __init__(self, params, lr: float = 1e-4, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, clip_norm: float | None = None,
                 lr_scales: Mapping[str, float] | None = None):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {betas}")
        self.params = _named(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]
        scales = dict(lr_scales or {})
        if any(v <= 0 for v in scales.values()):
            raise ConfigError(f"learning-rate scales must be positive, got {scales}")
        self.scales = []
        for name, _ in self.params:
            hits = [k for k in scales if name.startswith(k)]
            self.scales.append(scales[max(hits, key=len)] if hits else 1.0)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = []
        for name, p in self.params:
            if p.grad is None:
                raise ContractError(f"parameter '{name}' has no gradient")
            grads.append(p.grad)
        if self.clip_norm is not None:
            total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if total > self.clip_norm:
                grads = [g * (self.clip_norm / total) for g in grads]
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for (_, p), g, m, v, scale in zip(self.params, grads, self.m, self.v, self.scales):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (self.lr * scale) * (m / c1) / (np.sqrt(v / c2) + self.eps)
