"""Dense matrix helpers: checked products, one-sided Jacobi SVD, thresholded rank
and block-diagonal assembly.

Matrices are plain 2-D ``float64`` numpy arrays. Every public function returns
a freshly allocated array and never mutates its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import ShapeError, SvdConvergenceError

Matrix = np.ndarray

JACOBI_TOL = 1e-12
MAX_SWEEPS = 100


def as_matrix(m, name: str = "matrix") -> Matrix:
    """Coerce ``m`` to a finite 2-D float64 array (copying only when needed)."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ShapeError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains NaN or Inf entries")
    return arr


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with a shape check that names both operands."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    if not np.isfinite(out).all():
        raise FloatingPointError(f"non-finite entries in product of {a.shape} and {b.shape}")
    return out


@dataclass(frozen=True)
class SvdResult:
    singular_values: np.ndarray
    left_vectors: Matrix
    right_vectors: Matrix
    sweeps: int = 0

    def reconstruct(self) -> Matrix:
        return (self.left_vectors * self.singular_values) @ self.right_vectors.T


@lru_cache(maxsize=None)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    # Circle-method tournament: every column pair meets exactly once per sweep,
    # and pairs within a round are disjoint so they can be rotated together.
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        left, right = [], []
        for k in range(m // 2):
            i, j = players[k], players[m - 1 - k]
            if i >= 0 and j >= 0:
                left.append(min(i, j))
                right.append(max(i, j))
        if left:
            rounds.append((np.array(left), np.array(right)))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _complete_basis(u: Matrix, filled: np.ndarray) -> Matrix:
    """Replace the columns of ``u`` not flagged in ``filled`` with an orthonormal
    completion of the flagged ones (Gram-Schmidt against the canonical basis)."""
    m, k = u.shape
    basis = [u[:, j] for j in range(k) if filled[j]]
    out = u.copy()
    candidates = iter(range(m))
    for j in range(k):
        if filled[j]:
            continue
        while True:
            e = np.zeros(m)
            e[next(candidates)] = 1.0
            for _ in range(2):
                for q in basis:
                    e -= (q @ e) * q
            norm = np.linalg.norm(e)
            if norm > 1e-8:
                break
        e /= norm
        basis.append(e)
        out[:, j] = e
    return out


def svd(m: Matrix, tol: float = JACOBI_TOL, max_sweeps: int = MAX_SWEEPS) -> SvdResult:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Columns are orthogonalised pairwise until every off-diagonal Gram entry is
    below ``tol`` relative to the product of the two column norms. Singular
    values come back sorted descending; ``left_vectors`` is ``rows x k`` and
    ``right_vectors`` is ``cols x k`` with ``k = min(rows, cols)``.

    Raises SvdConvergenceError if ``max_sweeps`` sweeps are not enough.
    """
    a = as_matrix(m).copy()
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T.copy()
    rows, cols = a.shape
    v = np.eye(cols)

    # Columns at or below this norm are numerically zero and excluded from rotation.
    null_norm = max(rows, cols) * np.finfo(np.float64).eps * np.linalg.norm(a)
    null_sq = null_norm * null_norm

    sweeps = 0
    worst = 0.0
    rounds = _round_robin(cols)
    for sweeps in range(1, max_sweeps + 1):
        worst = 0.0
        for left, right in rounds:
            ai, aj = a[:, left], a[:, right]
            alpha = np.einsum("ij,ij->j", ai, ai)
            beta = np.einsum("ij,ij->j", aj, aj)
            gamma = np.einsum("ij,ij->j", ai, aj)
            live = (alpha > null_sq) & (beta > null_sq)
            rel = np.zeros_like(gamma)
            rel[live] = np.abs(gamma[live]) / np.sqrt(alpha[live] * beta[live])
            hot = rel > tol
            if not hot.any():
                continue
            worst = max(worst, float(rel.max()))
            li, rj = left[hot], right[hot]
            alpha, beta, gamma = alpha[hot], beta[hot], gamma[hot]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ai, aj = a[:, li], a[:, rj]
            a[:, li] = c * ai - s * aj
            a[:, rj] = s * ai + c * aj
            vi, vj = v[:, li], v[:, rj]
            v[:, li] = c * vi - s * vj
            v[:, rj] = s * vi + c * vj
        if worst == 0.0:
            break
    else:
        raise SvdConvergenceError(max_sweeps, worst)

    sigma = np.linalg.norm(a, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, a, v = sigma[order], a[:, order], v[:, order]
    nonzero = sigma > null_norm
    sigma = np.where(nonzero, sigma, 0.0)
    u = np.zeros_like(a)
    u[:, nonzero] = a[:, nonzero] / sigma[nonzero]
    if not nonzero.all():
        u = _complete_basis(u, nonzero)

    if transposed:
        u, v = v, u
    return SvdResult(sigma, u, v, sweeps)


def singular_values(m: Matrix) -> np.ndarray:
    return svd(m).singular_values


def rank(m: Matrix, threshold: float) -> int:
    """Number of singular values strictly greater than ``threshold``."""
    if not threshold > 0:
        raise ValueError(f"rank threshold must be positive, got {threshold}")
    return int(np.count_nonzero(svd(m).singular_values > threshold))


def block_diag(blocks: Sequence[Matrix]) -> Matrix:
    """Place ``blocks`` along the diagonal of a zero matrix, in order."""
    if len(blocks) == 0:
        raise ValueError("block_diag needs at least one block")
    blocks = [as_matrix(b, f"block {k}") for k, b in enumerate(blocks)]
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r:r + b.shape[0], c:c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out
