import hashlib

import numpy as np
import pytest

from melora.adapters import delta_weight, init_melora
from melora.autodiff import AdaptedLinear, backward, mse_loss
from melora.errors import DivergenceError
from melora.matrix import block_diag
from melora.training import TrainConfig, train


class Regression:
    """y = (W + delta) x with a fixed target update."""

    def __init__(self, w, delta):
        self.w_star = w + delta

    def sample(self, rng, size):
        x = rng.normal(size=(self.w_star.shape[1], size))
        return x, self.w_star @ x

    def loss_and_grads(self, model, batch, rng):
        x, y = batch
        mask = model.sample_mask(x, rng)
        loss, up = mse_loss(model.forward(x, mask), y)
        return loss, backward(model, x, up, mask).params


def make(rng, n=2, r=2, d=8, dropout=0.0):
    w = rng.normal(size=(d, d)) / np.sqrt(d)
    blocks = [rng.normal(size=(d // n, 1)) @ rng.normal(size=(1, d // n)) for _ in range(n)]
    layer = AdaptedLinear(w.copy(), init_melora(d, d, n, r, seed=1, dropout_p=dropout))
    return layer, Regression(w, 0.3 * block_diag(blocks))


def digest(a):
    return hashlib.sha256(a.tobytes()).hexdigest()


def test_lr_zero_leaves_params_unchanged(rng):
    layer, task = make(rng)
    before = [p.copy() for p in layer.parameters()]
    train(layer, task, TrainConfig(steps=20, lr=0.0))
    assert all(np.array_equal(a, b) for a, b in zip(before, layer.parameters()))


def test_frozen_base_is_untouched(rng):
    layer, task = make(rng)
    h = digest(layer.w)
    train(layer, task, TrainConfig(steps=50, lr=1e-2, weight_decay=0.1))
    assert digest(layer.w) == h


def test_same_seed_same_curve(rng):
    layer1, task = make(rng, dropout=0.1)
    layer2 = AdaptedLinear(layer1.w.copy(), init_melora(8, 8, 2, 2, seed=1, dropout_p=0.1))
    r1 = train(layer1, task, TrainConfig(steps=60, lr=1e-2, seed=5))
    r2 = train(layer2, task, TrainConfig(steps=60, lr=1e-2, seed=5))
    assert r1.losses == r2.losses
    assert r1.to_csv(timing=False) == r2.to_csv(timing=False)


def test_loss_decreases(rng):
    layer, task = make(rng)
    report = train(layer, task, TrainConfig(steps=400, lr=1e-2, weight_decay=0.0))
    assert report.losses[-1] < 1e-3 * report.losses[0]


def test_converges_to_least_squares_solution(rng):
    # realisable block teacher: the least-squares optimum is the teacher update itself
    layer, task = make(rng, n=2, r=1)
    train(layer, task, TrainConfig(steps=1500, lr=1e-2, weight_decay=0.0))
    target = task.w_star - layer.w
    assert np.abs(delta_weight(layer.adapter) - target).max() < 1e-4


def test_report_csv_columns(rng):
    layer, task = make(rng)
    report = train(layer, task, TrainConfig(steps=5, lr=1e-3, warmup_steps=2))
    lines = report.to_csv().splitlines()
    assert lines[0] == "step,lr,loss,grad_norm,wall_ms"
    assert len(lines) == 6
    assert lines[1].split(",")[1] == "0.0"
    assert float(lines[3].split(",")[1]) == 1e-3
    assert len(report.final_params) == 4


def test_divergence_reports_step(rng):
    layer, task = make(rng)

    class Exploding(Regression):
        calls = 0

        def loss_and_grads(self, model, batch, rng):
            loss, grads = super().loss_and_grads(model, batch, rng)
            self.calls += 1
            return (float("nan") if self.calls == 3 else loss), grads

    bad = Exploding(layer.w, task.w_star - layer.w)
    with pytest.raises(DivergenceError) as info:
        train(layer, bad, TrainConfig(steps=10, lr=1e-3))
    assert info.value.step == 2


def test_zero_steps(rng):
    layer, task = make(rng)
    report = train(layer, task, TrainConfig(steps=0))
    assert report.losses == [] and report.to_csv().count("\n") == 1
