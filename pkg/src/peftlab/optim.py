"""AdamW (decoupled weight decay) with an optional cosine schedule.

Updates are applied in a fixed parameter order and all state lives in
plain numpy arrays, so trajectories are bit-reproducible for a given
seed/config/precision.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import Tensor


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Half-cosine decay from base_lr at step 0 toward zero at total_steps."""
    if total_steps <= 0:
        return base_lr
    frac = min(max(step / total_steps, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    def __init__(
        self,
        params: list[Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-2,
        schedule: str = "cosine",
        max_steps: int | None = None,
    ):
        if schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {schedule!r}")
        if schedule == "cosine" and max_steps is None:
            raise ConfigError("cosine schedule needs max_steps")
        self.params = list(params)
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.max_steps = max_steps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        if self.schedule == "cosine":
            return cosine_lr(self.lr, self.t, self.max_steps)
        return self.lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        lr_t = self.current_lr()
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {p.name or 'parameter'} at step {self.t}")
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            mhat = self.m[i] / (1.0 - self.b1**self.t)
            vhat = self.v[i] / (1.0 - self.b2**self.t)
            update = mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data
            p.data = p.data - p.data.dtype.type(lr_t) * update.astype(p.data.dtype)
