"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

import numpy as np

from langct.tensor import Tensor

__all__ = ["AdamW", "CosineSchedule"]


class AdamW:
    """Decoupled-weight-decay Adam; moments kept in float64.

    Parameters without a gradient are skipped by ``step``.
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.99), eps: float = 1e-8,
                 weight_decay: float = 1e-9):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self._m = [np.zeros(p.data.shape, dtype=np.float64) for p in self.params]
        self._v = [np.zeros(p.data.shape, dtype=np.float64) for p in self.params]
        self._t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self._t += 1
        bc1 = 1.0 - self.beta1**self._t
        bc2 = 1.0 - self.beta2**self._t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            new = p.data.astype(np.float64)
            new -= self.lr * self.weight_decay * new  # decoupled decay
            new -= self.lr * update
            p.data = new.astype(np.float32)


class CosineSchedule:
    """Cosine decay from ``base`` to ``floor`` over ``total`` steps.

    With ``warmup=0`` (the default) step 0 returns ``base`` exactly and step
    total-1 returns ``floor`` exactly. A positive ``warmup`` ramps linearly
    up to ``base`` over that many steps first; useful when the optimizer's
    second-moment estimates start uncalibrated and full-size early updates
    would walk the model away from a good initialization.
    """

    def __init__(self, base: float, floor: float, total: int, warmup: int = 0):
        if total < 1:
            raise ValueError("schedule needs at least one step")
        if floor > base:
            raise ValueError(f"floor {floor} above base {base}")
        if not 0 <= warmup < total:
            raise ValueError(f"warmup {warmup} must lie in [0, {total})")
        self.base = float(base)
        self.floor = float(floor)
        self.total = int(total)
        self.warmup = int(warmup)

    def lr(self, step: int) -> float:
        step = min(max(step, 0), self.total - 1)
        if step < self.warmup:
            return self.base * (step + 1) / self.warmup
        span = self.total - self.warmup
        if span == 1:
            return self.base
        frac = (step - self.warmup) / (span - 1)
        return self.floor + 0.5 * (self.base - self.floor) * (1.0 + np.cos(np.pi * frac))

    def apply(self, opt: AdamW, step: int) -> float:
        opt.lr = self.lr(step)
        return opt.lr
