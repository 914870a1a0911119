"""SGD-momentum and Adam with a cosine-annealed learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from .core import NonFiniteError, Tensor


@dataclass(frozen=True)
class CosineSchedule:
    lr_init: float
    lr_final: float
    total_steps: int

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")

    def __call__(self, t: int) -> float:
        t = min(max(t, 0), self.total_steps)
        return self.lr_final + 0.5 * (self.lr_init - self.lr_final) * (1.0 + math.cos(math.pi * t / self.total_steps))


class Optimizer:
    kind = "base"

    def __init__(self, params: Sequence[Tensor], schedule: CosineSchedule, weight_decay: float = 0.0):
        self.params: List[Tensor] = list(params)
        self.schedule = schedule
        self.weight_decay = weight_decay
        self.t = 0
        self.lr = schedule(0)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        """Apply one update at the current step's learning rate, clear grads, advance t."""
        self.lr = self.schedule(self.t)
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self._update(i, p, g)
            if not np.isfinite(p.data).all():
                raise NonFiniteError(f"{self.kind}.step: parameter {i} became non-finite")
        self.zero_grad()
        self.t += 1
        return self.lr

    def _update(self, i: int, p: Tensor, g: np.ndarray) -> None:
        raise NotImplementedError

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], t: int) -> None:
        self.t = t
        self.lr = self.schedule(t)


class SGD(Optimizer):
    kind = "sgd-momentum"

    def __init__(self, params, schedule, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params, schedule, weight_decay)
        self.momentum = momentum
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def _update(self, i, p, g):
        buf = self.buf[i]
        buf *= self.momentum
        buf += g
        p.data = p.data - np.asarray(self.lr, dtype=p.dtype) * buf

    def state_arrays(self):
        return {f"momentum.{i}": b for i, b in enumerate(self.buf)}

    def load_state_arrays(self, arrays, t):
        super().load_state_arrays(arrays, t)
        for i in range(len(self.buf)):
            self.buf[i][...] = arrays[f"momentum.{i}"]


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, schedule, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        super().__init__(params, schedule, weight_decay)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _update(self, i, p, g):
        n = self.t + 1
        m, v = self.m[i], self.v[i]
        m *= self.b1
        m += (1 - self.b1) * g
        v *= self.b2
        v += (1 - self.b2) * g * g
        mhat = m / (1 - self.b1 ** n)
        vhat = v / (1 - self.b2 ** n)
        p.data = (p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype, copy=False)

    def state_arrays(self):
        out = {f"m.{i}": a for i, a in enumerate(self.m)}
        out.update({f"v.{i}": a for i, a in enumerate(self.v)})
        return out

    def load_state_arrays(self, arrays, t):
        super().load_state_arrays(arrays, t)
        for i in range(len(self.m)):
            self.m[i][...] = arrays[f"m.{i}"]
            self.v[i][...] = arrays[f"v.{i}"]
