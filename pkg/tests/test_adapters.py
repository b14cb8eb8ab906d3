import numpy as np
import pytest
from hypothesis import given, strategies as st

import melora.adapters as adapters_mod
from melora.adapters import (
    count_params, delta_weight, equivalent_rank, expand_to_sparse, flop_count, init_lora,
    init_melora, lora_forward, melora_forward, melora_forward_diag_products,
    melora_forward_sparse, merge,
)
from melora.errors import DivisibilityError, ShapeError
from melora.matrix import rank


def fill(adapter, rng):
    for p in adapter.parameters():
        p[:] = rng.normal(size=p.shape)
    return adapter


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


# --- init -----------------------------------------------------------------------

def test_init_lora_zero_b_and_shapes():
    ad = init_lora(12, 10, 3, seed=1)
    assert ad.a.shape == (3, 12) and ad.b.shape == (10, 3)
    assert np.all(ad.b == 0.0)
    assert ad.scale == 16.0 / 3


def test_init_lora_is_noop(rng):
    ad = init_lora(12, 10, 3, seed=1)
    w, x = rng.normal(size=(10, 12)), rng.normal(size=(12, 5))
    assert np.array_equal(lora_forward(ad, w, x), w @ x)


def test_init_lora_seed_determinism():
    assert np.array_equal(init_lora(8, 8, 2, seed=7).a, init_lora(8, 8, 2, seed=7).a)
    assert not np.array_equal(init_lora(8, 8, 2, seed=7).a, init_lora(8, 8, 2, seed=8).a)


def test_init_lora_std_is_one_over_rank():
    a = init_lora(4000, 4000, 4, seed=0).a
    assert abs(a.std() - 0.25) < 0.005


@pytest.mark.parametrize("r", [0, 9])
def test_init_lora_rank_out_of_range(r):
    with pytest.raises(ValueError):
        init_lora(8, 12, r)


def test_init_melora_n1_matches_lora():
    lora = init_lora(16, 8, 2, alpha=16.0, seed=3)
    mel = init_melora(16, 8, 1, 2, alpha=16.0, seed=3)
    assert np.array_equal(lora.a, mel.minis[0].a)
    assert np.array_equal(lora.b, mel.minis[0].b)


def test_init_melora_parameter_count_768():
    ad = init_melora(768, 768, 8, 1)
    assert ad.num_params == 1536 == count_params(768, 768, 8, 1)
    assert all(m.a.shape == (1, 96) and m.b.shape == (96, 1) for m in ad.minis)


def test_init_melora_divisibility_error():
    with pytest.raises(DivisibilityError, match="10.*3|3.*10"):
        init_melora(10, 10, 3, 1)


def test_init_melora_r_mini_too_large():
    with pytest.raises(ValueError):
        init_melora(16, 16, 4, 5)


# --- forward ------------------------------------------------------------------------

def test_lora_forward_against_dense_oracle(rng):
    ad = fill(init_lora(9, 7, 3, alpha=3.0), rng)  # alpha == r -> scale 1
    w, x = rng.normal(size=(7, 9)), rng.normal(size=(9, 4))
    np.testing.assert_allclose(lora_forward(ad, w, x), w @ x + (ad.b @ ad.a) @ x, rtol=0, atol=1e-12)


def test_lora_forward_linear_in_alpha(rng):
    ad = fill(init_lora(9, 7, 3, alpha=5.0), rng)
    w, x = rng.normal(size=(7, 9)), rng.normal(size=(9, 4))
    d1 = lora_forward(ad, w, x) - w @ x
    ad.alpha = 10.0
    d2 = lora_forward(ad, w, x) - w @ x
    np.testing.assert_allclose(d2, 2 * d1, rtol=1e-13, atol=1e-14)


def test_lora_forward_leaves_base_untouched(rng):
    ad = fill(init_lora(6, 6, 2), rng)
    w = rng.normal(size=(6, 6))
    before = w.copy()
    lora_forward(ad, w, rng.normal(size=(6, 3)))
    assert np.array_equal(w, before)


def test_forward_shape_errors(rng):
    ad = init_melora(8, 8, 2, 1)
    with pytest.raises(ShapeError):
        melora_forward(ad, np.zeros((8, 6)), np.zeros((8, 1)))
    with pytest.raises(ShapeError):
        melora_forward(ad, np.zeros((8, 8)), np.zeros((6, 1)))


def test_melora_zero_b_is_exact_noop(rng):
    ad = init_melora(32, 32, 4, 2)
    w, x = rng.normal(size=(32, 32)), rng.normal(size=(32, 3))
    assert np.array_equal(melora_forward(ad, w, x), w @ x)


def test_melora_n1_bitwise_equals_lora(rng):
    lora = fill(init_lora(12, 12, 3, seed=5), rng)
    mel = init_melora(12, 12, 1, 3, seed=5)
    mel.minis[0].a[:] = lora.a
    mel.minis[0].b[:] = lora.b
    w, x = rng.normal(size=(12, 12)), rng.normal(size=(12, 7))
    assert np.array_equal(melora_forward(mel, w, x), lora_forward(lora, w, x))


def test_melora_three_forms_agree(rng):
    ad = fill(init_melora(32, 32, 4, 2), rng)
    w, x = rng.normal(size=(32, 32)), rng.normal(size=(32, 5))
    ref = melora_forward_sparse(ad, w, x)
    assert rel(melora_forward(ad, w, x), ref) < 1e-12
    assert rel(melora_forward_diag_products(ad, w, x), ref) < 1e-12


@given(st.integers(0, 2**31), st.sampled_from([1, 2, 3, 4]), st.integers(1, 6), st.integers(1, 6),
       st.integers(1, 4))
def test_form_equivalence_property(seed, n, bi, bo, batch):
    rng = np.random.default_rng(seed)
    r = int(rng.integers(1, min(bi, bo) + 1))
    ad = fill(init_melora(n * bi, n * bo, n, r, seed=seed), rng)
    w, x = rng.normal(size=(n * bo, n * bi)), rng.normal(size=(n * bi, batch))
    ref = melora_forward_sparse(ad, w, x)
    assert rel(melora_forward(ad, w, x), ref) < 1e-12
    assert rel(melora_forward_diag_products(ad, w, x), ref) < 1e-12


@given(st.integers(0, 2**31), st.sampled_from([2, 3, 4]), st.integers(1, 5), st.integers(1, 5))
def test_block_locality(seed, n, bi, bo):
    rng = np.random.default_rng(seed)
    ad = fill(init_melora(n * bi, n * bo, n, 1), rng)
    w = np.zeros((n * bo, n * bi))
    x = rng.normal(size=(n * bi, 2))
    j = int(rng.integers(n))
    x2 = x.copy()
    x2[j * bi:(j + 1) * bi] += 1.0
    diff = melora_forward(ad, w, x2) - melora_forward(ad, w, x)
    assert np.all(np.delete(diff, np.s_[j * bo:(j + 1) * bo], axis=0) == 0.0)


def test_dropout_mask_only_touches_adapter_branch(rng):
    ad = fill(init_melora(8, 8, 2, 1, dropout_p=0.5), rng)
    w, x = rng.normal(size=(8, 8)), rng.normal(size=(8, 3))
    zero_mask = np.zeros_like(x)
    assert np.array_equal(melora_forward(ad, w, x, zero_mask), w @ x)
    mask = adapters_mod.dropout_mask(0.5, x.shape, rng)
    assert set(np.unique(mask)) <= {0.0, 2.0}


# --- sparse expansion ------------------------------------------------------------------

def test_expand_to_sparse_layout():
    ad = init_melora(4, 4, 2, 1)
    ad.minis[0].a[:] = [[1.0, 2.0]]
    ad.minis[1].a[:] = [[3.0, 4.0]]
    a_eq, b_eq = expand_to_sparse(ad)
    assert np.array_equal(a_eq, [[1.0, 2.0, 0.0, 0.0], [0.0, 0.0, 3.0, 4.0]])
    assert b_eq.shape == (4, 2) and np.all(b_eq == 0.0)


def test_expand_to_sparse_shapes_and_rank(rng):
    ad = fill(init_melora(24, 16, 4, 2), rng)
    a_eq, b_eq = expand_to_sparse(ad)
    assert a_eq.shape == (8, 24) and b_eq.shape == (16, 8)
    assert rank(b_eq @ a_eq, 1e-8) == 8


def test_expand_at_init_is_zero_update():
    a_eq, b_eq = expand_to_sparse(init_melora(16, 16, 4, 1))
    assert np.all(b_eq @ a_eq == 0.0)


# --- merge ----------------------------------------------------------------------------------

def test_merge_at_init_returns_w(rng):
    w = rng.normal(size=(8, 8))
    assert np.array_equal(merge(init_melora(8, 8, 2, 1), w), w)


def test_merge_matches_forward(rng):
    ad = fill(init_melora(16, 16, 4, 2), rng)
    w = rng.normal(size=(16, 16))
    merged = merge(ad, w)
    x = rng.normal(size=(16, 100))
    np.testing.assert_allclose(merged @ x, melora_forward(ad, w, x), rtol=0, atol=1e-10)


def test_merge_lora_matches_forward(rng):
    ad = fill(init_lora(10, 6, 2), rng)
    w = rng.normal(size=(6, 10))
    x = rng.normal(size=(10, 100))
    np.testing.assert_allclose(merge(ad, w) @ x, lora_forward(ad, w, x), rtol=0, atol=1e-10)


def test_merge_is_not_idempotent(rng):
    ad = fill(init_melora(8, 8, 2, 1), rng)
    w = rng.normal(size=(8, 8))
    twice = merge(ad, merge(ad, w))
    np.testing.assert_allclose(twice - w, 2 * delta_weight(ad), atol=1e-12)


def test_merge_shape_error():
    with pytest.raises(ShapeError):
        merge(init_melora(8, 8, 2, 1), np.zeros((4, 4)))


# --- accounting ----------------------------------------------------------------------------

def test_count_params_lora_768():
    assert count_params(768, 768, 1, 8) == 12_288
    assert 24 * count_params(768, 768, 1, 8) == 294_912


@pytest.mark.parametrize("n", [2, 4, 8])
def test_count_params_melora_independent_of_n(n):
    assert count_params(768, 768, n, 1) == 1_536
    assert 24 * count_params(768, 768, n, 1) == 36_864


def test_count_params_melora_4x2():
    assert count_params(768, 768, 2, 4) == 6_144
    assert 24 * 6_144 == 147_456


def test_count_params_reduction_factor():
    # same equivalent rank r: MELoRA with r/n per mini uses 1/n of LoRA's parameters
    assert count_params(768, 768, 4, 2) * 4 == count_params(768, 768, 1, 8)


def test_count_params_divisibility():
    with pytest.raises(DivisibilityError):
        count_params(10, 10, 3, 1)


def test_equivalent_rank():
    assert equivalent_rank(8, 1) == 8
    assert equivalent_rank(1, 5) == 5


def test_equivalent_rank_matches_svd_100_trials(rng):
    for _ in range(100):
        n = int(rng.choice([1, 2, 4]))
        r = int(rng.choice([1, 2]))
        ad = fill(init_melora(16, 16, n, r), rng)
        a_eq, b_eq = expand_to_sparse(ad)
        assert rank(b_eq @ a_eq, 1e-8) == equivalent_rank(n, r)


def test_flop_count_values():
    assert flop_count(768, 8, 1) == (12_288, 12_288)
    assert flop_count(768, 8, 4) == (3_072, 768)
    with pytest.raises(DivisibilityError):
        flop_count(768, 8, 3)


@pytest.mark.parametrize("d,r,n", [(768, 8, 1), (768, 8, 4), (64, 8, 8), (48, 6, 2)])
def test_flop_count_matches_instrumented_forward(monkeypatch, rng, d, r, n):
    macs = []
    real = adapters_mod.matmul

    def counting(a, b):
        macs.append(a.shape[0] * a.shape[1] * b.shape[1])
        return real(a, b)

    ad = init_melora(d, d, n, r // n)
    w, x = np.zeros((d, d)), rng.normal(size=(d, 1))
    monkeypatch.setattr(adapters_mod, "matmul", counting)
    melora_forward(ad, w, x)
    adapter_macs = sum(macs) - d * d  # drop the base W x product
    serial, parallel = flop_count(d, r, n)
    assert adapter_macs == serial
    assert max(macs[1:]) * 2 == parallel  # one mini: A_i x_i then B_i (A_i x_i)
