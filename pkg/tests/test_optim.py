import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from melora.errors import ShapeError
from melora.optim import LrSchedule, OptimizerState, adamw_step


def reference_adamw(p0, grad_fn, lrs, wd, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-by-scalar AdamW written out longhand."""
    p = [float(v) for v in p0]
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    for t, lr in enumerate(lrs, start=1):
        g = grad_fn(p)
        for i in range(len(p)):
            p[i] = p[i] - lr * wd * p[i]
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mhat = m[i] / (1 - b1 ** t)
            vhat = v[i] / (1 - b2 ** t)
            p[i] = p[i] - lr * mhat / (math.sqrt(vhat) + eps)
    return p


def test_zero_grads_zero_decay_is_noop(rng):
    p = rng.normal(size=(3, 3))
    before = p.copy()
    adamw_step(OptimizerState(weight_decay=0.0), [p], [np.zeros_like(p)], 1e-2)
    assert np.array_equal(p, before)


def test_first_step_is_signed_lr(rng):
    p = rng.normal(size=(4,))
    g = rng.normal(size=(4,))
    before = p.copy()
    adamw_step(OptimizerState(weight_decay=0.0), [p], [g], 1e-3)
    np.testing.assert_allclose(p - before, -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-9)
    assert np.all(np.sign(p - before) == -np.sign(g))
    np.testing.assert_allclose(np.abs(p - before), 1e-3, rtol=1e-4)


def test_ten_step_quadratic_matches_reference():
    target = np.array([1.0, -2.0, 0.5])
    grad_fn = lambda p: [2 * (p[i] - target[i]) for i in range(3)]
    p0 = np.array([0.3, 0.1, -0.7])
    lrs = [0.05 * (t + 1) / 10 for t in range(10)]
    p = p0.copy()
    state = OptimizerState(weight_decay=0.1)
    for lr in lrs:
        adamw_step(state, [p], [np.array(grad_fn(p))], lr)
    np.testing.assert_allclose(p, reference_adamw(p0, grad_fn, lrs, 0.1), rtol=0, atol=1e-12)
    assert state.step == 10


def test_decoupled_weight_decay_shrinks_params():
    p = np.array([2.0])
    adamw_step(OptimizerState(weight_decay=0.5), [p], [np.array([0.0])], 0.1)
    assert p[0] == pytest.approx(2.0 * (1 - 0.05))


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        adamw_step(OptimizerState(), [np.zeros(3)], [np.zeros(4)], 1e-3)


def test_schedule_shape():
    s = LrSchedule(1e-3, 100, 1000)
    assert s(0) == 0.0
    assert s(50) == pytest.approx(5e-4)
    assert s(100) == 1e-3
    assert s(550) == pytest.approx(5e-4)
    assert s(1000) == 0.0


def test_schedule_without_warmup_starts_at_base():
    assert LrSchedule(2e-3, 0, 10)(0) == 2e-3


def test_schedule_from_ratio():
    s = LrSchedule.from_ratio(4e-4, 1000, 0.06)
    assert s.warmup_steps == 60


def test_schedule_rejects_bad_bounds():
    with pytest.raises(ValueError):
        LrSchedule(1e-3, 10, 10)


@given(st.floats(1e-6, 1.0), st.integers(0, 50), st.integers(1, 200))
def test_schedule_properties(base, warmup, extra):
    total = warmup + extra
    s = LrSchedule(base, warmup, total)
    lrs = [s(t) for t in range(total + 1)]
    assert min(lrs) >= 0.0
    assert lrs[total] == 0.0
    peak = max(lrs)
    assert peak == base and lrs.index(peak) == warmup
    assert lrs.count(peak) == 1
    # piecewise linear: constant slope on each side of the peak
    up = np.diff(lrs[:warmup + 1])
    down = np.diff(lrs[warmup:])
    if up.size:
        np.testing.assert_allclose(up, up[0], rtol=1e-9, atol=1e-15)
    np.testing.assert_allclose(down, down[0], rtol=1e-9, atol=1e-15)
