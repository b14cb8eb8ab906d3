"""LoRA and MELoRA adapters.

A ``LoraAdapter`` is a single low-rank pair ``(A, B)`` whose update is
``(alpha / r) * B @ A``. A ``MeloraAdapter`` runs ``n`` mini LoRAs side by side,
mini ``i`` reading feature block ``i`` of the input and writing output block
``i``; algebraically its update is block diagonal.

Inputs are column batches: ``x`` has shape ``(d_in, batch)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import DivisibilityError, ShapeError
from .matrix import Matrix, block_diag, matmul

DEFAULT_ALPHA = 16.0


@dataclass
class LoraAdapter:
    a: Matrix  # (r, d_in)
    b: Matrix  # (d_out, r)
    alpha: float = DEFAULT_ALPHA
    dropout_p: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[0] != self.b.shape[1]:
            raise ShapeError(f"A {self.a.shape} and B {self.b.shape} do not share a rank dimension")
        if self.rank > min(self.d_in, self.d_out):
            raise ValueError(f"rank {self.rank} exceeds min(d_in={self.d_in}, d_out={self.d_out})")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def d_in(self) -> int:
        return self.a.shape[1]

    @property
    def d_out(self) -> int:
        return self.b.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def num_params(self) -> int:
        return self.a.size + self.b.size

    def parameters(self) -> list[Matrix]:
        return [self.a, self.b]


@dataclass
class MeloraAdapter:
    minis: list[LoraAdapter] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if not self.minis:
            raise ValueError("a MELoRA adapter needs at least one mini LoRA")
        first = self.minis[0]
        for i, mini in enumerate(self.minis[1:], start=1):
            if mini.a.shape != first.a.shape or mini.b.shape != first.b.shape:
                raise ShapeError(f"mini {i} has shapes A{mini.a.shape} B{mini.b.shape}, "
                                 f"expected A{first.a.shape} B{first.b.shape}")
            if mini.alpha != first.alpha or mini.dropout_p != first.dropout_p:
                raise ValueError(f"mini {i} alpha/dropout differ from mini 0")

    @property
    def n(self) -> int:
        return len(self.minis)

    @property
    def r_mini(self) -> int:
        return self.minis[0].rank

    @property
    def block_in(self) -> int:
        return self.minis[0].d_in

    @property
    def block_out(self) -> int:
        return self.minis[0].d_out

    @property
    def d_in(self) -> int:
        return self.n * self.block_in

    @property
    def d_out(self) -> int:
        return self.n * self.block_out

    @property
    def alpha(self) -> float:
        return self.minis[0].alpha

    @property
    def dropout_p(self) -> float:
        return self.minis[0].dropout_p

    @property
    def scale(self) -> float:
        return self.alpha / self.r_mini

    @property
    def num_params(self) -> int:
        return sum(m.num_params for m in self.minis)

    def parameters(self) -> list[Matrix]:
        return [p for m in self.minis for p in m.parameters()]


Adapter = Union[LoraAdapter, MeloraAdapter]


def _check_divisible(d_in: int, d_out: int, n: int) -> None:
    if n < 1:
        raise ValueError(f"n must be a positive integer, got {n}")
    for name, d in (("d_in", d_in), ("d_out", d_out)):
        if d % n:
            raise DivisibilityError(f"{name}={d} is not divisible by n={n}")


def init_lora(d_in: int, d_out: int, r: int, alpha: float = DEFAULT_ALPHA, seed: int = 0,
              dropout_p: float = 0.0, init_std: float | None = None,
              rng: np.random.Generator | None = None) -> LoraAdapter:
    """Gaussian ``A`` (std ``1/r`` unless ``init_std`` is given), zero ``B``."""
    if not 1 <= r <= min(d_in, d_out):
        raise ValueError(f"rank r={r} must lie in [1, min(d_in={d_in}, d_out={d_out})]")
    if rng is None:
        rng = np.random.default_rng(seed)
    std = 1.0 / r if init_std is None else init_std
    a = rng.normal(0.0, std, size=(r, d_in))
    b = np.zeros((d_out, r))
    return LoraAdapter(a, b, alpha=alpha, dropout_p=dropout_p, seed=seed)


def init_melora(d_in: int, d_out: int, n: int, r_mini: int, alpha: float = DEFAULT_ALPHA,
                seed: int = 0, dropout_p: float = 0.0,
                init_std: float | None = None) -> MeloraAdapter:
    """``n`` mini LoRAs over ``d_in/n -> d_out/n`` blocks drawn from one seeded stream.

    With ``n == 1`` the single mini is bitwise identical to ``init_lora`` with the
    same arguments.
    """
    _check_divisible(d_in, d_out, n)
    bi, bo = d_in // n, d_out // n
    if not 1 <= r_mini <= min(bi, bo):
        raise ValueError(f"r_mini={r_mini} must lie in [1, min({bi}, {bo})] for n={n}")
    rng = np.random.default_rng(seed)
    minis = [init_lora(bi, bo, r_mini, alpha, seed, dropout_p, init_std, rng=rng) for _ in range(n)]
    return MeloraAdapter(minis, seed=seed)


def _check_forward_shapes(adapter: Adapter, w: Matrix, x: Matrix) -> None:
    if w.shape != (adapter.d_out, adapter.d_in):
        raise ShapeError(f"base weight {w.shape} does not match adapter "
                         f"(d_out={adapter.d_out}, d_in={adapter.d_in})")
    if x.ndim != 2 or x.shape[0] != adapter.d_in:
        raise ShapeError(f"input {x.shape} must be ({adapter.d_in}, batch)")


def dropout_mask(p: float, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: kept entries scaled by ``1/(1-p)``, dropped ones zero."""
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def lora_forward(adapter: LoraAdapter, w: Matrix, x: Matrix,
                 mask: np.ndarray | None = None) -> Matrix:
    """``W x + scale * B (A x)``; ``mask`` (dropout) touches only the adapter input."""
    _check_forward_shapes(adapter, w, x)
    xa = x if mask is None else x * mask
    h = matmul(w, x)
    h += adapter.scale * matmul(adapter.b, matmul(adapter.a, xa))
    return h


def melora_forward(adapter: MeloraAdapter, w: Matrix, x: Matrix,
                   mask: np.ndarray | None = None) -> Matrix:
    """Concatenation form: mini ``i`` maps input block ``i`` to output block ``i``."""
    _check_forward_shapes(adapter, w, x)
    xa = x if mask is None else x * mask
    h = matmul(w, x)
    bi, bo, s = adapter.block_in, adapter.block_out, adapter.scale
    for i, mini in enumerate(adapter.minis):
        h[i * bo:(i + 1) * bo] += s * matmul(mini.b, matmul(mini.a, xa[i * bi:(i + 1) * bi]))
    return h


def melora_forward_diag_products(adapter: MeloraAdapter, w: Matrix, x: Matrix) -> Matrix:
    """``W x + scale * diag_i(B_i A_i) x``."""
    _check_forward_shapes(adapter, w, x)
    delta = block_diag([m.b @ m.a for m in adapter.minis])
    return w @ x + adapter.scale * (delta @ x)


def melora_forward_sparse(adapter: MeloraAdapter, w: Matrix, x: Matrix) -> Matrix:
    """``W x + scale * diag(B_i) (diag(A_i) x)`` through the zero-padded matrices."""
    _check_forward_shapes(adapter, w, x)
    a_eq, b_eq = expand_to_sparse(adapter)
    return w @ x + adapter.scale * (b_eq @ (a_eq @ x))


def forward(adapter: Adapter, w: Matrix, x: Matrix, mask: np.ndarray | None = None) -> Matrix:
    if isinstance(adapter, MeloraAdapter):
        return melora_forward(adapter, w, x, mask)
    return lora_forward(adapter, w, x, mask)


def expand_to_sparse(adapter: Adapter) -> tuple[Matrix, Matrix]:
    """Zero-padded equivalents ``(a_eq, b_eq)`` with ``b_eq @ a_eq`` the full update
    (before scaling). A plain LoRA adapter returns copies of its own ``(A, B)``."""
    if isinstance(adapter, LoraAdapter):
        return adapter.a.copy(), adapter.b.copy()
    a_eq = block_diag([m.a for m in adapter.minis])
    b_eq = block_diag([m.b for m in adapter.minis])
    return a_eq, b_eq


def delta_weight(adapter: Adapter, scaled: bool = True) -> Matrix:
    a_eq, b_eq = expand_to_sparse(adapter)
    delta = b_eq @ a_eq
    return adapter.scale * delta if scaled else delta


def merge(adapter: Adapter, w: Matrix) -> Matrix:
    """Return ``W + scale * b_eq @ a_eq`` as a new matrix.

    Not idempotent: merging an already merged weight adds the update again.
    """
    if w.shape != (adapter.d_out, adapter.d_in):
        raise ShapeError(f"base weight {w.shape} does not match adapter "
                         f"(d_out={adapter.d_out}, d_in={adapter.d_in})")
    return w + delta_weight(adapter)


def count_params(d_in: int, d_out: int, n: int, r_mini: int) -> int:
    """Trainable parameters of one adapted matrix: ``n * (d_in/n * r + r * d_out/n)``.

    ``n == 1`` is plain LoRA, ``d_out * r + r * d_in``.
    """
    _check_divisible(d_in, d_out, n)
    return n * ((d_in // n) * r_mini + r_mini * (d_out // n))


def equivalent_rank(n: int, r_mini: int) -> int:
    return n * r_mini


def flop_count(d: int, r: int, n: int) -> tuple[int, int]:
    """Multiply-accumulates on the adapter path for one input vector.

    ``r`` is the total rank, split as ``r/n`` per mini over ``d/n`` features.
    Returns ``(serial, parallel_critical_path) = (2rd/n, 2rd/n^2)``.
    """
    if n < 1:
        raise ValueError(f"n must be a positive integer, got {n}")
    if d % n:
        raise DivisibilityError(f"d={d} is not divisible by n={n}")
    if r % n:
        raise DivisibilityError(f"r={r} is not divisible by n={n}")
    per_mini = 2 * (r // n) * (d // n)
    return n * per_mini, per_mini
