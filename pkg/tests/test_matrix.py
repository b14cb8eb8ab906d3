import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from melora.errors import ShapeError, SvdConvergenceError
from melora.matrix import as_matrix, block_diag, matmul, rank, svd

EPS = 1e-8


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def low_rank(rng, rows, cols, r):
    return rng.normal(size=(rows, r)) @ rng.normal(size=(r, cols))


# --- matmul -----------------------------------------------------------------

def test_matmul_identity(rng):
    m = rng.normal(size=(3, 3))
    assert np.array_equal(matmul(np.eye(3), m), m)


def test_matmul_hand_arithmetic():
    out = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.0], [1.0]]))
    assert np.array_equal(out, [[2.0], [4.0]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(17, 5)), rng.normal(size=(5, 9))
    np.testing.assert_allclose(matmul(a, b), triple_loop(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 1\)"):
        matmul(np.ones((2, 3)), np.ones((4, 1)))


def test_as_matrix_rejects_non_finite():
    with pytest.raises(ValueError):
        as_matrix([[1.0, np.nan]])
    with pytest.raises(ShapeError):
        as_matrix(np.ones(3))


# --- svd --------------------------------------------------------------------

def test_svd_diagonal():
    res = svd(np.diag([3.0, 2.0, 1.0]))
    np.testing.assert_allclose(res.singular_values, [3.0, 2.0, 1.0], atol=1e-15)


def test_svd_diagonal_unsorted_input():
    res = svd(np.diag([1.0, 3.0, 2.0]))
    np.testing.assert_allclose(res.singular_values, [3.0, 2.0, 1.0], atol=1e-15)


def test_svd_zero_matrix():
    res = svd(np.zeros((4, 3)))
    assert np.all(res.singular_values == 0.0)
    np.testing.assert_allclose(res.left_vectors.T @ res.left_vectors, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(res.right_vectors.T @ res.right_vectors, np.eye(3), atol=1e-12)


def test_svd_rank_two_product(rng):
    m = low_rank(rng, 8, 8, 2)
    sv = svd(m).singular_values
    assert np.count_nonzero(sv > 1e-8) == 2
    assert np.all(sv[2:] < 1e-8)


@pytest.mark.parametrize("shape", [(1, 1), (1, 6), (6, 1), (17, 5), (5, 17), (32, 32), (64, 64)])
def test_svd_contract(rng, shape):
    m = rng.normal(size=shape)
    res = svd(m)
    k = min(shape)
    assert res.left_vectors.shape == (shape[0], k)
    assert res.right_vectors.shape == (shape[1], k)
    assert np.all(np.diff(res.singular_values) <= 0) and np.all(res.singular_values >= 0)
    assert np.linalg.norm(res.reconstruct() - m) / np.linalg.norm(m) < 1e-8
    np.testing.assert_allclose(res.left_vectors.T @ res.left_vectors, np.eye(k), atol=1e-10)
    np.testing.assert_allclose(res.right_vectors.T @ res.right_vectors, np.eye(k), atol=1e-10)
    # independent check against LAPACK
    np.testing.assert_allclose(res.singular_values, np.linalg.svd(m, compute_uv=False),
                               rtol=1e-10, atol=1e-12)


def test_svd_rank_deficient_keeps_orthonormal_basis(rng):
    m = low_rank(rng, 12, 9, 3)
    res = svd(m)
    np.testing.assert_allclose(res.left_vectors.T @ res.left_vectors, np.eye(9), atol=1e-10)
    assert np.linalg.norm(res.reconstruct() - m) / np.linalg.norm(m) < 1e-8


def test_svd_does_not_mutate_input(rng):
    m = rng.normal(size=(5, 4))
    before = m.copy()
    svd(m)
    assert np.array_equal(m, before)


def test_svd_iteration_cap_reports_sweeps(rng):
    with pytest.raises(SvdConvergenceError) as info:
        svd(rng.normal(size=(10, 10)), max_sweeps=1)
    assert info.value.sweeps == 1
    assert "1 sweeps" in str(info.value)


@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_svd_reconstruction_property(m):
    res = svd(m)
    norm = np.linalg.norm(m)
    err = np.linalg.norm(res.reconstruct() - m)
    assert err <= 1e-8 * norm + 1e-300
    assert np.all(np.diff(res.singular_values) <= 0)


# --- rank -------------------------------------------------------------------

def test_rank_identity_and_zero():
    assert rank(np.eye(5), 0.1) == 5
    assert rank(np.zeros((5, 5)), 0.1) == 0


def test_rank_block_diagonal_gaussian(rng):
    blocks = [rng.normal(size=(4, 4)) for _ in range(4)]
    assert rank(block_diag(blocks), 1e-8) == 16


def test_rank_threshold_is_strict():
    assert rank(np.diag([1.0, 0.1]), 0.1) == 1


def test_rank_rejects_non_positive_threshold():
    with pytest.raises(ValueError):
        rank(np.eye(2), 0.0)


@given(st.integers(0, 2**31), st.integers(2, 10), st.integers(1, 10), st.integers(1, 10))
def test_rank_subadditive(seed, d, r1, r2):
    rng = np.random.default_rng(seed)
    m1 = low_rank(rng, d, d, min(r1, d))
    m2 = low_rank(rng, d, d, min(r2, d))
    assert rank(m1 + m2, EPS) <= rank(m1, EPS) + rank(m2, EPS)


@given(st.integers(0, 2**31), st.integers(2, 10), st.integers(1, 5), st.integers(1, 5), st.booleans())
def test_rank_concat_bounds(seed, d, r1, r2, duplicate):
    rng = np.random.default_rng(seed)
    m1 = low_rank(rng, d, d, min(r1, d))
    m2 = m1.copy() if duplicate else low_rank(rng, d, d, min(r2, d))
    ra, rb = rank(m1, EPS), rank(m2, EPS)
    rc = rank(np.hstack([m1, m2]), EPS)
    assert max(ra, rb) <= rc <= ra + rb
    if duplicate:
        assert rc == ra


def test_rank_diag_additivity_200_trials(rng):
    for _ in range(200):
        blocks = [low_rank(rng, *(int(v) for v in rng.integers(1, 7, 2)), int(rng.integers(1, 4)))
                  for _ in range(int(rng.integers(1, 5)))]
        assert rank(block_diag(blocks), EPS) == sum(rank(b, EPS) for b in blocks)


# --- block_diag ---------------------------------------------------------------

def test_block_diag_scalars():
    assert np.array_equal(block_diag([np.array([[1.0]]), np.array([[2.0]])]), [[1.0, 0.0], [0.0, 2.0]])


def test_block_diag_single_block(rng):
    m = rng.normal(size=(3, 2))
    assert np.array_equal(block_diag([m]), m)


def test_block_diag_layout_and_exact_zeros(rng):
    blocks = [rng.normal(size=(2, 3)), rng.normal(size=(1, 1)), rng.normal(size=(3, 2))]
    out = block_diag(blocks)
    assert out.shape == (6, 6)
    mask = np.zeros_like(out, dtype=bool)
    r = c = 0
    for b in blocks:
        assert np.array_equal(out[r:r + b.shape[0], c:c + b.shape[1]], b)
        mask[r:r + b.shape[0], c:c + b.shape[1]] = True
        r, c = r + b.shape[0], c + b.shape[1]
    assert np.all(out[~mask] == 0.0)


def test_block_diag_rank_is_sum_for_gaussian_6x3(rng):
    m1, m2 = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    assert rank(block_diag([m1, m2]), 1e-8) == rank(m1, 1e-8) + rank(m2, 1e-8) == 6


def test_block_diag_empty():
    with pytest.raises(ValueError):
        block_diag([])
