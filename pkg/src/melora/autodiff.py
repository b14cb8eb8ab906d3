"""Hand-derived gradients for adapted linear layers, the two losses used by the
harness, and a central finite-difference checker."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .adapters import Adapter, LoraAdapter, MeloraAdapter, dropout_mask, forward
from .errors import ShapeError
from .matrix import Matrix

FD_STEP = 1e-5


def _blocks(adapter: Adapter) -> list[tuple[LoraAdapter, slice, slice]]:
    if isinstance(adapter, LoraAdapter):
        return [(adapter, slice(0, adapter.d_in), slice(0, adapter.d_out))]
    bi, bo = adapter.block_in, adapter.block_out
    return [(m, slice(i * bi, (i + 1) * bi), slice(i * bo, (i + 1) * bo))
            for i, m in enumerate(adapter.minis)]


@dataclass
class AdaptedLinear:
    """Frozen base weight ``w`` plus one trainable adapter.

    ``grads`` mirrors ``adapter.parameters()`` entry for entry and is filled by
    ``backward``. The base weight never receives a gradient.
    """
    w: Matrix
    adapter: Adapter
    grads: list[Matrix] = field(default_factory=list)

    def __post_init__(self):
        if self.w.shape != (self.adapter.d_out, self.adapter.d_in):
            raise ShapeError(f"base weight {self.w.shape} does not match adapter "
                             f"(d_out={self.adapter.d_out}, d_in={self.adapter.d_in})")
        self.zero_grad()

    def parameters(self) -> list[Matrix]:
        return self.adapter.parameters()

    def zero_grad(self) -> None:
        self.grads = [np.zeros_like(p) for p in self.parameters()]

    def sample_mask(self, x: Matrix, rng: np.random.Generator | None) -> np.ndarray | None:
        p = self.adapter.dropout_p
        if rng is None or p == 0.0:
            return None
        return dropout_mask(p, x.shape, rng)

    def forward(self, x: Matrix, mask: np.ndarray | None = None) -> Matrix:
        return forward(self.adapter, self.w, x, mask)


@dataclass
class Gradients:
    params: list[Matrix]  # same order as adapter.parameters(): A_0, B_0, A_1, B_1, ...
    x: Matrix


def backward(layer: AdaptedLinear, x: Matrix, upstream: Matrix,
             mask: np.ndarray | None = None) -> Gradients:
    """Gradients of a scalar loss given ``upstream = dL/dh`` for ``h = layer.forward(x)``.

    Per mini with scale ``s``, input block ``x_i`` and upstream block ``g_i``::

        dB_i = s * g_i (A_i x_i)^T
        dA_i = s * B_i^T g_i x_i^T
        dx   = W^T g + blockwise s * A_i^T B_i^T g_i

    ``mask`` is the dropout mask used in the forward pass, if any.
    """
    adapter = layer.adapter
    if x.ndim != 2 or x.shape[0] != adapter.d_in:
        raise ShapeError(f"input {x.shape} must be ({adapter.d_in}, batch)")
    if upstream.shape != (adapter.d_out, x.shape[1]):
        raise ShapeError(f"upstream {upstream.shape} must be ({adapter.d_out}, {x.shape[1]})")
    xa = x if mask is None else x * mask
    s = adapter.scale
    grads: list[Matrix] = []
    dx_adapter = np.empty_like(x)
    for mini, rows_in, rows_out in _blocks(adapter):
        xi, gi = xa[rows_in], upstream[rows_out]
        btg = mini.b.T @ gi
        grads.append(s * (btg @ xi.T))
        grads.append(s * (gi @ (mini.a @ xi).T))
        dx_adapter[rows_in] = s * (mini.a.T @ btg)
    if mask is not None:
        dx_adapter *= mask
    layer.grads = grads
    return Gradients(grads, layer.w.T @ upstream + dx_adapter)


def mse_loss(pred: Matrix, target: Matrix) -> tuple[float, Matrix]:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def log_softmax(logits: Matrix) -> Matrix:
    """Column-wise log-softmax with max subtraction."""
    shifted = logits - logits.max(axis=0, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))


def cross_entropy_loss(logits: Matrix, labels) -> tuple[float, Matrix]:
    """Mean cross-entropy of ``logits`` (classes x batch) against integer ``labels``."""
    labels = np.asarray(labels, dtype=np.int64)
    k, batch = logits.shape
    if labels.shape != (batch,):
        raise ShapeError(f"labels {labels.shape} do not match batch size {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    if not np.isfinite(logits).all():
        raise ValueError("logits contain NaN or Inf")
    logp = log_softmax(logits)
    cols = np.arange(batch)
    loss = -float(logp[labels, cols].mean())
    upstream = np.exp(logp)
    upstream[labels, cols] -= 1.0
    return loss, upstream / batch


def numerical_gradient(f: Callable[[], float], param: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of ``f`` with respect to every entry of ``param``.

    ``param`` is perturbed in place and restored exactly.
    """
    grad = np.zeros_like(param)
    it = np.nditer(param, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = param[idx]
        param[idx] = orig + h
        up = f()
        param[idx] = orig - h
        down = f()
        param[idx] = orig
        grad[idx] = (up - down) / (2.0 * h)
    return grad


def gradient_mismatch(analytic: np.ndarray, numeric: np.ndarray,
                      rtol: float = 1e-6, atol: float = 1e-9) -> float:
    """Worst ratio of the entrywise error to its allowance ``max(atol, rtol*max(|a|,|n|))``.

    A value ``<= 1`` means every entry passes.
    """
    err = np.abs(analytic - numeric)
    allowance = np.maximum(atol, rtol * np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((err / allowance).max()) if err.size else 0.0
