"""Named invariant checks run by ``melora verify``.

Each check takes a seeded generator and returns ``(passed, detail)``. The
``sabotage`` hook deliberately breaks one construction so CI can confirm a
failing property is reported under the right name.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import checkpoint
from .adapters import (
    LoraAdapter, MeloraAdapter, expand_to_sparse, init_lora, init_melora, lora_forward, merge,
    melora_forward, melora_forward_diag_products, melora_forward_sparse,
)
from .analysis import audit_params, block_diag_stack_rank, get_preset, serial_stack_rank_demo
from .autodiff import AdaptedLinear, backward, cross_entropy_loss, gradient_mismatch, mse_loss, numerical_gradient
from .matrix import block_diag, rank, svd
from .optim import LrSchedule, OptimizerState, adamw_step

EPS = 1e-8
SABOTAGE_MODES = ("rank-additivity",)

CheckFn = Callable[[np.random.Generator, "Sabotage"], "tuple[bool, str]"]


@dataclass(frozen=True)
class Sabotage:
    mode: str | None = None

    def block_diag(self, blocks):
        if self.mode == "rank-additivity":
            # Stack every block into the first slot: a sum, not a diagonal arrangement.
            out = np.zeros_like(block_diag(blocks))
            for b in blocks:
                out[:b.shape[0], :b.shape[1]] += b
            return out
        return block_diag(blocks)


def low_rank(rng: np.random.Generator, rows: int, cols: int, r: int) -> np.ndarray:
    return rng.normal(size=(rows, r)) @ rng.normal(size=(r, cols))


def gaussian_melora(rng: np.random.Generator, d_in: int, d_out: int, n: int, r: int,
                    alpha: float = 16.0) -> MeloraAdapter:
    ad = init_melora(d_in, d_out, n, r, alpha, seed=int(rng.integers(2**31)))
    for m in ad.minis:
        m.a[:] = rng.normal(size=m.a.shape)
        m.b[:] = rng.normal(size=m.b.shape)
    return ad


def gaussian_lora(rng: np.random.Generator, d_in: int, d_out: int, r: int,
                  alpha: float = 16.0) -> LoraAdapter:
    ad = init_lora(d_in, d_out, r, alpha, seed=int(rng.integers(2**31)))
    ad.a[:] = rng.normal(size=ad.a.shape)
    ad.b[:] = rng.normal(size=ad.b.shape)
    return ad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def check_svd_reconstruction(rng, sab):
    worst = 0.0
    for _ in range(10):
        rows, cols = (int(v) for v in rng.integers(1, 65, 2))
        m = rng.normal(size=(rows, cols))
        res = svd(m)
        worst = max(worst, rel_err(res.reconstruct(), m))
        if np.any(np.diff(res.singular_values) > 0) or np.any(res.singular_values < 0):
            return False, f"singular values not sorted non-negative for {m.shape}"
    return worst < 1e-8, f"worst relative reconstruction error {worst:.2e}"


def check_subadditivity(rng, sab):
    for t in range(50):
        d = int(rng.integers(4, 17))
        m1 = low_rank(rng, d, d, int(rng.integers(1, d + 1)))
        m2 = low_rank(rng, d, d, int(rng.integers(1, d + 1)))
        if rank(m1 + m2, EPS) > rank(m1, EPS) + rank(m2, EPS):
            return False, f"trial {t}: rank(M1+M2) exceeds rank(M1)+rank(M2)"
    return True, "50 trials"


def check_concat_bounds(rng, sab):
    for t in range(50):
        d = int(rng.integers(4, 17))
        m1 = low_rank(rng, d, d, int(rng.integers(1, d // 2 + 1)))
        m2 = m1.copy() if t % 5 == 0 else low_rank(rng, d, d, int(rng.integers(1, d // 2 + 1)))
        r1, r2, rc = rank(m1, EPS), rank(m2, EPS), rank(np.hstack([m1, m2]), EPS)
        if not max(r1, r2) <= rc <= r1 + r2:
            return False, f"trial {t}: {max(r1, r2)} <= {rc} <= {r1 + r2} violated"
        if t % 5 == 0 and rc != r1:
            return False, f"trial {t}: duplicated block should give rank {r1}, got {rc}"
    return True, "50 trials (every 5th with M2 = M1)"


def check_diag_additivity(rng, sab):
    for t in range(200):
        count = int(rng.integers(1, 5))
        blocks = [rng.normal(size=tuple(int(v) for v in rng.integers(1, 7, 2))) for _ in range(count)]
        total = rank(sab.block_diag(blocks), EPS)
        expected = sum(rank(b, EPS) for b in blocks)
        if total != expected:
            return False, f"trial {t}: rank {total} != sum of block ranks {expected}"
    return True, "200 trials"


def check_melora_rank(rng, sab):
    for t in range(100):
        n = int(rng.choice([2, 4, 8]))
        r = int(rng.choice([1, 2, 4]))
        d = int(rng.choice([16, 32, 64]))
        if r > d // n:
            continue
        ad = gaussian_melora(rng, d, d, n, r)
        a_eq, b_eq = expand_to_sparse(ad)
        got = rank(b_eq @ a_eq, EPS)
        if got != n * r:
            return False, f"trial {t}: n={n} r_mini={r} d={d} rank {got} != {n * r}"
    return True, "100 trials"


def check_form_equivalence(rng, sab):
    worst = 0.0
    for _ in range(100):
        n = int(rng.choice([1, 2, 4, 8]))
        d_in, d_out = n * int(rng.integers(1, 9)), n * int(rng.integers(1, 9))
        r = int(rng.integers(1, min(d_in, d_out) // n + 1))
        ad = gaussian_melora(rng, d_in, d_out, n, r)
        w = rng.normal(size=(d_out, d_in))
        x = rng.normal(size=(d_in, int(rng.integers(1, 6))))
        ref = melora_forward_sparse(ad, w, x)
        for other in (melora_forward(ad, w, x), melora_forward_diag_products(ad, w, x)):
            worst = max(worst, rel_err(other, ref))
    return worst < 1e-12, f"worst relative disagreement {worst:.2e}"


def check_degeneracy(rng, sab):
    for t in range(20):
        d_in, d_out = (int(v) for v in rng.integers(2, 17, 2))
        r = int(rng.integers(1, min(d_in, d_out) + 1))
        seed = int(rng.integers(2**31))
        lora = init_lora(d_in, d_out, r, 16.0, seed)
        mel = init_melora(d_in, d_out, 1, r, 16.0, seed)
        if not np.array_equal(lora.a, mel.minis[0].a):
            return False, f"trial {t}: n=1 init differs from LoRA init"
        b = rng.normal(size=lora.b.shape)
        lora.b[:] = b
        mel.minis[0].b[:] = b
        w, x = rng.normal(size=(d_out, d_in)), rng.normal(size=(d_in, 3))
        if not np.array_equal(lora_forward(lora, w, x), melora_forward(mel, w, x)):
            return False, f"trial {t}: n=1 forward not bitwise equal to LoRA"
    return True, "20 trials, bitwise"


def check_zero_init(rng, sab):
    for _ in range(20):
        n = int(rng.choice([1, 2, 4]))
        d = n * int(rng.integers(1, 9))
        ad = init_melora(d, d, n, 1, 16.0, int(rng.integers(2**31)))
        w, x = rng.normal(size=(d, d)), rng.normal(size=(d, 4))
        if not np.array_equal(melora_forward(ad, w, x), w @ x):
            return False, "fresh adapter changed the output"
    return True, "20 fresh adapters are exact no-ops"


def check_block_locality(rng, sab):
    for t in range(20):
        n = int(rng.choice([2, 4]))
        bi, bo = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        ad = gaussian_melora(rng, n * bi, n * bo, n, 1)
        w = np.zeros((n * bo, n * bi))
        x = rng.normal(size=(n * bi, 2))
        j = int(rng.integers(n))
        x2 = x.copy()
        x2[j * bi:(j + 1) * bi] += rng.normal(size=(bi, 2))
        diff = melora_forward(ad, w, x2) - melora_forward(ad, w, x)
        outside = np.delete(diff, np.s_[j * bo:(j + 1) * bo], axis=0)
        if np.any(outside != 0.0):
            return False, f"trial {t}: perturbing block {j} leaked into other output blocks"
    return True, "20 trials"


def check_merge(rng, sab):
    worst = 0.0
    for _ in range(20):
        n = int(rng.choice([1, 2, 4]))
        d = n * int(rng.integers(1, 9))
        ad = gaussian_melora(rng, d, d, n, 1)
        w = rng.normal(size=(d, d))
        x = rng.normal(size=(d, 100))
        worst = max(worst, float(np.abs(merge(ad, w) @ x - melora_forward(ad, w, x)).max()))
    return worst < 1e-10, f"worst merged-vs-adapter disagreement {worst:.2e}"


def check_gradients(rng, sab):
    worst = 0.0
    for t in range(10):
        n = int(rng.choice([1, 2, 4]))
        d = n * int(rng.integers(1, 5))
        r = int(rng.integers(1, d // n + 1))
        ad = gaussian_melora(rng, d, d, n, r) if t % 2 else gaussian_lora(rng, d, d, r)
        layer = AdaptedLinear(rng.normal(size=(d, d)), ad)
        x = rng.normal(size=(d, int(rng.integers(1, 6))))
        if t % 4 < 2:
            target = rng.normal(size=(d, x.shape[1]))
            loss = lambda: mse_loss(layer.forward(x), target)
        else:
            labels = rng.integers(0, d, x.shape[1])
            loss = lambda: cross_entropy_loss(layer.forward(x), labels)
        _, up = loss()
        grads = backward(layer, x, up).params
        for p, g in zip(layer.parameters(), grads):
            worst = max(worst, gradient_mismatch(g, numerical_gradient(lambda: loss()[0], p)))
    return worst <= 1.0, f"worst error / allowance {worst:.3f}"


def check_param_audit(rng, sab):
    roberta, llama = get_preset("roberta-base-qv"), get_preset("llama2-7b-qv")
    cases = [
        (roberta, "lora", 1, 8, 294_912),
        (roberta, "melora", 8, 1, 36_864),
        (roberta, "melora", 2, 4, 147_456),
        (llama, "lora", 1, 64, 33_554_432),
        (llama, "melora", 16, 1, 524_288),
    ]
    for shape, mode, n, r, expected in cases:
        got = audit_params(shape, mode, n, r)
        if got != expected:
            return False, f"{shape.name} {mode} n={n} r={r}: {got} != {expected}"
    return True, "5 table counts reproduced exactly"


def check_serial_stack(rng, sab):
    seed = int(rng.integers(2**31))
    serial_full = serial_stack_rank_demo(4, 2, 32, 1.0, seed)
    serial_none = serial_stack_rank_demo(4, 2, 32, 0.0, seed)
    diag = block_diag_stack_rank(4, 2, 32, seed)
    ok = (serial_full, serial_none, diag) == (2, 8, 8)
    return ok, f"overlap=1 -> {serial_full}, overlap=0 -> {serial_none}, block diagonal -> {diag}"


def check_schedule(rng, sab):
    sched = LrSchedule(1e-3, 10, 100)
    lrs = [sched(t) for t in range(101)]
    ok = lrs[0] == 0.0 and lrs[10] == 1e-3 and lrs[100] == 0.0 and max(lrs) == 1e-3
    ok = ok and lrs.count(1e-3) == 1 and min(lrs) >= 0.0
    return ok, "warmup 10 / total 100"


def check_adamw(rng, sab):
    p = rng.normal(size=(3, 4))
    g = rng.normal(size=(3, 4))
    before = p.copy()
    adamw_step(OptimizerState(weight_decay=0.0), [p], [g], 1e-3)
    step = p - before
    expected = -1e-3 * g / (np.abs(g) + 1e-8)
    return bool(np.allclose(step, expected, rtol=1e-9, atol=1e-15)), "first step is -lr * sign(g)"


def check_checkpoint(rng, sab):
    ad = gaussian_melora(rng, 16, 8, 4, 2)
    back = checkpoint.from_bytes(checkpoint.to_bytes(ad))
    ok = isinstance(back, MeloraAdapter) and all(
        np.array_equal(p, q) for p, q in zip(ad.parameters(), back.parameters()))
    return ok, "MELR round trip is bit exact"


CHECKS: dict[str, CheckFn] = {
    "svd-reconstruction": check_svd_reconstruction,
    "eq2-subadditivity": check_subadditivity,
    "eq3-concat-bounds": check_concat_bounds,
    "eq4-diag-additivity": check_diag_additivity,
    "eq4-melora-rank": check_melora_rank,
    "eq5-form-equivalence": check_form_equivalence,
    "eq5-degeneracy": check_degeneracy,
    "zero-init": check_zero_init,
    "block-locality": check_block_locality,
    "merge-equivalence": check_merge,
    "gradient-fd": check_gradients,
    "param-audit": check_param_audit,
    "serial-stack": check_serial_stack,
    "lr-schedule": check_schedule,
    "adamw-first-step": check_adamw,
    "checkpoint-roundtrip": check_checkpoint,
}


def run_checks(seed: int = 42, name_filter: str | None = None,
               sabotage: str | None = None) -> list[tuple[str, bool, str]]:
    if sabotage is not None and sabotage not in SABOTAGE_MODES:
        raise ValueError(f"unknown sabotage mode {sabotage!r}; choose from {SABOTAGE_MODES}")
    sab = Sabotage(sabotage)
    results = []
    for name, fn in CHECKS.items():
        if name_filter and name_filter not in name:
            continue
        rng = np.random.default_rng(seed)
        try:
            ok, detail = fn(rng, sab)
        except Exception as exc:
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
