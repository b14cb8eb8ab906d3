"""AdamW with decoupled weight decay, and a linear warmup/decay learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass
class OptimizerState:
    weight_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(state: OptimizerState, params: list[np.ndarray], grads: list[np.ndarray],
               lr: float) -> list[np.ndarray]:
    """One AdamW update, applied to ``params`` in place (and returned).

    Weight decay is decoupled: ``p -= lr * wd * p`` happens before the
    bias-corrected Adam step.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"parameter {p.shape} and gradient {g.shape} differ")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    elif [m.shape for m in state.m] != [p.shape for p in params]:
        raise ShapeError("optimizer moments do not match parameter shapes")

    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.weight_decay:
            p -= lr * state.weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


@dataclass(frozen=True)
class LrSchedule:
    """Linear ramp ``0 -> base_lr`` over ``warmup_steps``, then linear decay to 0 at ``total_steps``."""
    base_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.base_lr < 0:
            raise ValueError(f"base_lr must be non-negative, got {self.base_lr}")
        if self.warmup_steps < 0 or self.total_steps < 1:
            raise ValueError("warmup_steps must be >= 0 and total_steps >= 1")
        if self.warmup_steps >= self.total_steps:
            raise ValueError(f"warmup_steps={self.warmup_steps} must be < total_steps={self.total_steps}")

    @classmethod
    def from_ratio(cls, base_lr: float, total_steps: int, warmup_ratio: float = 0.06) -> "LrSchedule":
        return cls(base_lr, min(math.ceil(warmup_ratio * total_steps), total_steps - 1), total_steps)

    def __call__(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.base_lr * (step / self.warmup_steps)
        if step >= self.total_steps:
            return 0.0
        return self.base_lr * ((self.total_steps - step) / (self.total_steps - self.warmup_steps))
