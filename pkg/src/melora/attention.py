"""Single-head softmax attention read out at the last position, with adapters
on the query and value projections only (keys, output and unembedding frozen).

Sequences are batched as ``X`` with shape ``(batch, d, seq)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import Adapter
from .autodiff import AdaptedLinear, backward, cross_entropy_loss
from .matrix import Matrix


def _softmax_last(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class AttentionCache:
    xq: Matrix
    xflat: Matrix
    q: Matrix
    k: np.ndarray
    v: np.ndarray
    p: np.ndarray
    mask_q: np.ndarray | None
    mask_v: np.ndarray | None


class AttentionModel:
    def __init__(self, wq: Matrix, wk: Matrix, wv: Matrix, wo: Matrix, unembed: Matrix,
                 q_adapter: Adapter, v_adapter: Adapter):
        self.query = AdaptedLinear(wq, q_adapter)
        self.value = AdaptedLinear(wv, v_adapter)
        self.wk = wk
        self.wo = wo
        self.unembed = unembed  # (vocab, d)
        self.d = wq.shape[0]

    def parameters(self) -> list[Matrix]:
        return self.query.parameters() + self.value.parameters()

    def frozen(self) -> list[Matrix]:
        return [self.query.w, self.wk, self.value.w, self.wo, self.unembed]

    def logits(self, x: np.ndarray, rng: np.random.Generator | None = None) -> tuple[Matrix, AttentionCache]:
        batch, d, seq = x.shape
        xq = np.ascontiguousarray(x[:, :, -1].T)
        xflat = x.transpose(1, 0, 2).reshape(d, batch * seq)
        mask_q = self.query.sample_mask(xq, rng)
        mask_v = self.value.sample_mask(xflat, rng)
        q = self.query.forward(xq, mask_q)
        v = self.value.forward(xflat, mask_v).reshape(d, batch, seq).transpose(1, 0, 2)
        k = np.einsum("ij,bjt->bit", self.wk, x)
        scores = np.einsum("bit,ib->bt", k, q) / np.sqrt(d)
        p = _softmax_last(scores)
        o = np.einsum("bit,bt->ib", v, p)
        out = self.unembed @ (self.wo @ o)
        return out, AttentionCache(xq, xflat, q, k, v, p, mask_q, mask_v)

    def backward(self, cache: AttentionCache, g_logits: Matrix) -> list[Matrix]:
        batch, d, seq = cache.v.shape
        g_o = self.wo.T @ (self.unembed.T @ g_logits)
        g_v = np.einsum("ib,bt->bit", g_o, cache.p)
        g_p = np.einsum("bit,ib->bt", cache.v, g_o)
        g_s = cache.p * (g_p - (cache.p * g_p).sum(axis=-1, keepdims=True))
        g_q = np.einsum("bit,bt->ib", cache.k, g_s) / np.sqrt(d)
        gq = backward(self.query, cache.xq, g_q, cache.mask_q)
        g_vflat = g_v.transpose(1, 0, 2).reshape(d, batch * seq)
        gv = backward(self.value, cache.xflat, g_vflat, cache.mask_v)
        return gq.params + gv.params

    def loss_and_grads(self, x: np.ndarray, labels: np.ndarray,
                       rng: np.random.Generator | None = None) -> tuple[float, list[Matrix]]:
        out, cache = self.logits(x, rng)
        loss, g = cross_entropy_loss(out, labels)
        return loss, self.backward(cache, g)

    def accuracy(self, x: np.ndarray, labels: np.ndarray) -> float:
        out, _ = self.logits(x)
        return float(np.mean(out.argmax(axis=0) == labels))
