"""Desk-scale experiments: teacher-student low-rank recovery, synthetic
classification through a frozen readout, and associative recall with a
single attention head whose Q and V projections are adapted.

Configs are flat YAML mappings (scalars and lists) matching ``ExperimentConfig``.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import logging
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .adapters import Adapter, delta_weight, equivalent_rank, init_lora, init_melora
from .analysis import ModelShape, RankProfile, audit_params, rank_profile
from .attention import AttentionModel
from .autodiff import AdaptedLinear, backward, cross_entropy_loss, mse_loss
from .matrix import Matrix, block_diag, svd
from .training import TrainConfig, TrainReport, train

log = logging.getLogger(__name__)

TASKS = ("recovery", "classify", "attention")
SWEEP_COLUMNS = ["task", "mode", "n", "r_mini", "alpha", "seed", "params", "equiv_rank",
                 "steps", "final_metric", "sv_count", "wall_ms"]


@dataclass
class ExperimentConfig:
    task: str = "recovery"
    mode: str = "melora"
    n: Any = 4  # int, or a list of ints for sweeps
    r_mini: Any = 1  # int, or a list of ints for sweeps
    alpha: float = 16.0
    dropout: float = 0.0
    lr: float = 5e-3
    warmup: int | None = None  # steps; falls back to warmup_ratio when unset
    warmup_ratio: float = 0.06
    weight_decay: float = 0.0
    steps: int = 3000
    batch: int = 32
    seeds: list[int] = field(default_factory=lambda: [42])
    out: str | None = None
    threshold: float = 0.1
    # task shape
    d: int = 64
    k: int = 4  # true update rank (recovery / classify)
    teacher: str = "block"  # block | dense
    teacher_blocks: int | None = None  # block teacher: number of diagonal blocks (default k)
    test_size: int = 512
    num_classes: int = 8
    vocab: int = 16
    seq_len: int = 8
    workers: int = 1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.mode not in ("lora", "melora"):
            raise ValueError(f"mode must be 'lora' or 'melora', got {self.mode!r}")
        if self.teacher not in ("block", "dense"):
            raise ValueError(f"teacher must be 'block' or 'dense', got {self.teacher!r}")
        if isinstance(self.seeds, int):
            self.seeds = [self.seeds]
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        for name in ("steps", "k"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("d", "batch", "test_size", "num_classes", "vocab", "seq_len", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.alpha <= 0 or self.lr < 0:
            raise ValueError("alpha must be positive and lr non-negative")

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "ExperimentConfig":
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a flat key-value mapping")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def grid(self) -> list[tuple[int, int]]:
        ns = self.n if isinstance(self.n, list) else [self.n]
        rs = self.r_mini if isinstance(self.r_mini, list) else [self.r_mini]
        return [(int(n), int(r)) for n, r in itertools.product(ns, rs)]

    def single(self, n: int, r_mini: int, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, n=n, r_mini=r_mini, seeds=[seed])

    @property
    def seed(self) -> int:
        return self.seeds[0]

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, lr=self.lr, warmup_steps=self.warmup,
                           warmup_ratio=self.warmup_ratio, weight_decay=self.weight_decay,
                           batch=self.batch, seed=self.seed)

    def model_shape(self) -> ModelShape:
        names = ("Q", "V") if self.task == "attention" else ("W",)
        return ModelShape.square(self.d, 1, names)

    def params(self) -> int:
        return audit_params(self.model_shape(), self.mode, int(self.n), int(self.r_mini))

    def make_adapter(self, seed: int) -> Adapter:
        n, r = int(self.n), int(self.r_mini)
        if self.mode == "lora":
            if n != 1:
                raise ValueError(f"mode 'lora' requires n=1, got n={n}")
            return init_lora(self.d, self.d, r, self.alpha, seed, self.dropout)
        return init_melora(self.d, self.d, n, r, self.alpha, seed, self.dropout)


def _streams(seed: int, count: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def teacher_update(d: int, k: int, kind: str, blocks: int | None, rng: np.random.Generator) -> Matrix:
    """Rank-``k`` teacher update scaled so that ``E ||dW||_F^2 = d``.

    ``block``: block diagonal with ``blocks`` equal diagonal blocks of rank
    ``k/blocks`` each. ``dense``: ``U V^T`` with Gaussian ``U, V`` of width ``k``.
    """
    if k == 0:
        return np.zeros((d, d))
    if kind == "dense":
        s = (1.0 / (k * d)) ** 0.25
        return rng.normal(0, s, (d, k)) @ rng.normal(0, s, (k, d))
    blocks = k if blocks is None else blocks
    if d % blocks or k % blocks:
        raise ValueError(f"block teacher needs blocks | d and blocks | k (d={d}, k={k}, blocks={blocks})")
    size, per = d // blocks, k // blocks
    s = (d / (k * size * size)) ** 0.25
    return block_diag([rng.normal(0, s, (size, per)) @ rng.normal(0, s, (per, size))
                       for _ in range(blocks)])


def eckart_young_floor(delta: Matrix, rank_budget: int) -> float:
    """Smallest population MSE of any rank-``rank_budget`` update under
    standard Gaussian inputs: discarded squared singular values over ``d_out``."""
    sv = svd(delta).singular_values
    return float(np.sum(sv[rank_budget:] ** 2) / delta.shape[0])


class RecoveryTask:
    """Regress ``y = (W0 + dW*) x`` for ``x ~ N(0, I)`` through an adapted ``W0``."""

    def __init__(self, config: ExperimentConfig, seed: int):
        teacher_rng, base_rng, test_rng = _streams(seed, 3)
        d = config.d
        self.w0 = base_rng.normal(0, 1 / math.sqrt(d), (d, d))
        self.delta = teacher_update(d, config.k, config.teacher, config.teacher_blocks, teacher_rng)
        self.w_star = self.w0 + self.delta
        self.x_test = test_rng.normal(size=(d, config.test_size))
        self.y_test = self.w_star @ self.x_test

    def sample(self, rng: np.random.Generator, size: int):
        x = rng.normal(size=(self.w0.shape[1], size))
        return x, self.w_star @ x

    def loss_and_grads(self, model: AdaptedLinear, batch, rng):
        x, y = batch
        mask = model.sample_mask(x, rng)
        loss, up = mse_loss(model.forward(x, mask), y)
        return loss, backward(model, x, up, mask).params

    def test_mse(self, model: AdaptedLinear) -> float:
        return mse_loss(model.forward(self.x_test), self.y_test)[0]

    def population_mse(self, model: AdaptedLinear) -> float:
        err = self.delta - delta_weight(model.adapter)
        return float(np.sum(err * err) / err.shape[0])


class ClassifyTask:
    """Labels are ``argmax R (W0 + dW*) x`` for a frozen readout ``R``."""

    def __init__(self, config: ExperimentConfig, seed: int):
        teacher_rng, base_rng, test_rng = _streams(seed, 3)
        d = config.d
        self.w0 = base_rng.normal(0, 1 / math.sqrt(d), (d, d))
        self.readout = base_rng.normal(0, 1 / math.sqrt(d), (config.num_classes, d))
        self.delta = teacher_update(d, config.k, config.teacher, config.teacher_blocks, teacher_rng)
        self.w_star = self.w0 + self.delta
        self.x_test = test_rng.normal(size=(d, config.test_size))
        self.y_test = self.labels(self.x_test)

    def labels(self, x: Matrix) -> np.ndarray:
        return (self.readout @ (self.w_star @ x)).argmax(axis=0)

    def sample(self, rng: np.random.Generator, size: int):
        x = rng.normal(size=(self.w0.shape[1], size))
        return x, self.labels(x)

    def loss_and_grads(self, model: AdaptedLinear, batch, rng):
        x, y = batch
        mask = model.sample_mask(x, rng)
        loss, g = cross_entropy_loss(self.readout @ model.forward(x, mask), y)
        return loss, backward(model, x, self.readout.T @ g, mask).params

    def accuracy(self, model: AdaptedLinear) -> float:
        pred = (self.readout @ model.forward(self.x_test)).argmax(axis=0)
        return float(np.mean(pred == self.y_test))


class RecallTask:
    """Associative recall: ``seq_len - 1`` (key, value) slots then a query key;
    the answer is the value stored with that key."""

    def __init__(self, config: ExperimentConfig, seed: int):
        embed_rng, weight_rng, test_rng = _streams(seed, 3)
        d, vocab = config.d, config.vocab
        if config.seq_len - 1 > vocab:
            raise ValueError(f"seq_len-1={config.seq_len - 1} distinct keys need vocab >= that")
        self.d, self.vocab, self.seq_len = d, vocab, config.seq_len
        scale = 1 / math.sqrt(d)
        self.key_embed = embed_rng.normal(0, scale, (d, vocab))
        self.value_embed = embed_rng.normal(0, scale, (d, vocab))
        self.query_marker = embed_rng.normal(0, scale, d)
        self.frozen = {name: weight_rng.normal(0, scale, (d, d)) for name in ("wq", "wk", "wv", "wo")}
        self.x_test, self.y_test = self.sample(test_rng, config.test_size)

    def sample(self, rng: np.random.Generator, size: int):
        slots = self.seq_len - 1
        keys = np.argsort(rng.random((size, self.vocab)), axis=1)[:, :slots]
        values = rng.integers(0, self.vocab, (size, slots))
        pick = rng.integers(0, slots, size)
        rows = np.arange(size)
        x = np.empty((size, self.d, self.seq_len))
        x[:, :, :slots] = (self.key_embed[:, keys] + self.value_embed[:, values]).transpose(1, 0, 2)
        x[:, :, -1] = (self.key_embed[:, keys[rows, pick]] + self.query_marker[:, None]).T
        return x, values[rows, pick]

    def build_model(self, q_adapter: Adapter, v_adapter: Adapter) -> AttentionModel:
        f = self.frozen
        return AttentionModel(f["wq"], f["wk"], f["wv"], f["wo"], self.value_embed.T.copy(),
                              q_adapter, v_adapter)

    def loss_and_grads(self, model: AttentionModel, batch, rng):
        x, y = batch
        return model.loss_and_grads(x, y, rng)


@dataclass
class RunResult:
    config: ExperimentConfig
    seed: int
    params: int
    equiv_rank: int
    final_metric: float
    profiles: list[RankProfile]
    train_report: TrainReport
    extra: dict[str, float] = field(default_factory=dict)

    @property
    def sv_count(self) -> int:
        return sum(p.count for p in self.profiles)

    @property
    def wall_ms(self) -> float:
        return self.train_report.total_wall_ms


@dataclass
class RecoveryReport(RunResult):
    @property
    def test_mse(self) -> float:
        return self.final_metric

    @property
    def population_mse(self) -> float:
        return self.extra["population_mse"]

    @property
    def eckart_young_floor(self) -> float:
        return self.extra["eckart_young_floor"]


def _equiv(config: ExperimentConfig) -> int:
    return equivalent_rank(int(config.n), int(config.r_mini))


def run_recovery(config: ExperimentConfig, seed: int | None = None) -> RecoveryReport:
    """Train an adapter to match a low-rank teacher; final metric is held-out test MSE."""
    seed = config.seed if seed is None else seed
    config = dataclasses.replace(config, seeds=[seed])
    task = RecoveryTask(config, seed)
    layer = AdaptedLinear(task.w0.copy(), config.make_adapter(seed))
    report = train(layer, task, config.train_config())
    profile = rank_profile(layer.adapter, config.threshold, name="W")
    extra = {
        "population_mse": task.population_mse(layer),
        "eckart_young_floor": eckart_young_floor(task.delta, _equiv(config)),
        "train_loss": report.losses[-1] if report.losses else task.test_mse(layer),
    }
    return RecoveryReport(config, seed, config.params(), _equiv(config), task.test_mse(layer),
                          [profile], report, extra)


def run_classify(config: ExperimentConfig, seed: int | None = None) -> RunResult:
    seed = config.seed if seed is None else seed
    config = dataclasses.replace(config, seeds=[seed])
    task = ClassifyTask(config, seed)
    layer = AdaptedLinear(task.w0.copy(), config.make_adapter(seed))
    baseline = task.accuracy(layer)
    report = train(layer, task, config.train_config())
    profile = rank_profile(layer.adapter, config.threshold, name="W")
    return RunResult(config, seed, config.params(), _equiv(config), task.accuracy(layer),
                     [profile], report, {"baseline_accuracy": baseline})


def run_attention(config: ExperimentConfig, seed: int | None = None) -> RunResult:
    """Fine-tune adapters on W_Q and W_V of a frozen attention head; metric is test accuracy."""
    seed = config.seed if seed is None else seed
    config = dataclasses.replace(config, seeds=[seed])
    task = RecallTask(config, seed)
    q_seed, v_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(2))
    model = task.build_model(config.make_adapter(q_seed), config.make_adapter(v_seed))
    baseline = model.accuracy(task.x_test, task.y_test)
    report = train(model, task, config.train_config())
    profiles = [rank_profile(model.query.adapter, config.threshold, name="Q"),
                rank_profile(model.value.adapter, config.threshold, name="V")]
    return RunResult(config, seed, config.params(), _equiv(config),
                     model.accuracy(task.x_test, task.y_test), profiles, report,
                     {"baseline_accuracy": baseline})


RUNNERS = {"recovery": run_recovery, "classify": run_classify, "attention": run_attention}


def run_single(config: ExperimentConfig, seed: int | None = None) -> RunResult:
    return RUNNERS[config.task](config, seed)


def _fmt(value: float) -> str:
    return repr(float(value))


def run_sweep(config: ExperimentConfig, timing: bool = True) -> str:
    """One CSV row per (n, r_mini, seed), then a mean and a std row per (n, r_mini).

    Runs may execute on ``config.workers`` threads; rows are always written in
    (n, r_mini, seed) order. A failed run is logged and its row carries
    ``final_metric = nan``.
    """
    jobs = [(n, r, seed) for n, r in config.grid() for seed in config.seeds]

    def work(job):
        n, r, seed = job
        single = config.single(n, r, seed)
        try:
            res = run_single(single, seed)
            return single, res.final_metric, res.sv_count, res.wall_ms
        except Exception as exc:  # recorded per row, sweep continues
            log.warning("run n=%d r_mini=%d seed=%d failed: %s", n, r, seed, exc)
            return single, math.nan, None, 0.0

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)

    def ms(v: float) -> str:
        return f"{v:.1f}" if timing else "0"

    summary = []
    for (n, r), group in itertools.groupby(zip(jobs, results), key=lambda jr: jr[0][:2]):
        group = list(group)
        single = group[0][1][0]
        equiv = _equiv(single)
        try:
            params = single.params()
        except ValueError:
            params = ""
        metrics, counts, times = [], [], []
        for (_, _, seed), (_, metric, count, wall) in group:
            writer.writerow([config.task, config.mode, n, r, _fmt(config.alpha), seed, params, equiv,
                             config.steps, _fmt(metric), "" if count is None else count, ms(wall)])
            if not math.isnan(metric):
                metrics.append(metric)
                counts.append(count)
                times.append(wall)
        summary.append((n, r, params, equiv, metrics, counts, times))

    for n, r, params, equiv, metrics, counts, times in summary:
        for label, agg in (("mean", statistics.fmean),
                           ("std", lambda v: statistics.stdev(v) if len(v) > 1 else 0.0)):
            if metrics:
                row_metric, row_count, row_ms = _fmt(agg(metrics)), _fmt(agg(counts)), ms(agg(times))
            else:
                row_metric, row_count, row_ms = "nan", "", ms(0.0)
            writer.writerow([config.task, config.mode, n, r, _fmt(config.alpha), label, params,
                             equiv, config.steps, row_metric, row_count, row_ms])
    return buf.getvalue()
