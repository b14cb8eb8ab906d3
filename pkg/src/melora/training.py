"""Single-threaded, seeded training loop shared by every harness task."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np

from .errors import DivergenceError
from .optim import LrSchedule, OptimizerState, adamw_step


class Trainable(Protocol):
    def parameters(self) -> list[np.ndarray]: ...


class Objective(Protocol):
    """What ``train`` needs from a task: batches and a loss with gradients."""

    def sample(self, rng: np.random.Generator, size: int) -> Any: ...

    def loss_and_grads(self, model: Any, batch: Any,
                       rng: np.random.Generator | None) -> tuple[float, list[np.ndarray]]: ...


@dataclass
class TrainConfig:
    steps: int = 1000
    lr: float = 4e-4
    warmup_steps: int | None = None
    warmup_ratio: float = 0.06
    weight_decay: float = 0.1
    batch: int = 32
    seed: int = 42

    def schedule(self) -> LrSchedule | None:
        if self.steps == 0:
            return None
        if self.warmup_steps is None:
            return LrSchedule.from_ratio(self.lr, self.steps, self.warmup_ratio)
        return LrSchedule(self.lr, min(self.warmup_steps, self.steps - 1), self.steps)


@dataclass
class TrainReport:
    steps: list[int] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    final_params: list[np.ndarray] = field(default_factory=list)
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def total_wall_ms(self) -> float:
        return self.wall_ms[-1] if self.wall_ms else 0.0

    def to_csv(self, timing: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "lr", "loss", "grad_norm", "wall_ms"])
        for row in zip(self.steps, self.lrs, self.losses, self.grad_norms, self.wall_ms):
            step, lr, loss, gnorm, ms = row
            writer.writerow([step, repr(lr), repr(loss), repr(gnorm), f"{ms:.3f}" if timing else "0"])
        return buf.getvalue()


def train(model: Trainable, task: Objective, config: TrainConfig) -> TrainReport:
    """Run ``config.steps`` AdamW steps of ``task`` on ``model``'s trainable parameters.

    Data and dropout draw from separate streams derived from ``config.seed``, so
    two runs with equal seeds produce identical loss curves.
    """
    params = model.parameters()
    data_rng, noise_rng = (np.random.default_rng(s)
                           for s in np.random.SeedSequence(config.seed).spawn(2))
    state = OptimizerState(weight_decay=config.weight_decay)
    schedule = config.schedule()
    report = TrainReport()
    start = time.perf_counter()
    for step in range(config.steps):
        lr = schedule(step)
        batch = task.sample(data_rng, config.batch)
        try:
            loss, grads = task.loss_and_grads(model, batch, noise_rng)
        except FloatingPointError:
            raise DivergenceError(step, float("nan")) from None
        if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
            raise DivergenceError(step, loss)
        gnorm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
        adamw_step(state, params, grads, lr)
        report.steps.append(step)
        report.lrs.append(lr)
        report.losses.append(loss)
        report.grad_norms.append(gnorm)
        report.wall_ms.append((time.perf_counter() - start) * 1e3)
    report.final_params = [p.copy() for p in params]
    return report
