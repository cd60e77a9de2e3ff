"""Shared neural building blocks: linear maps, layer norm, embeddings,
multi-head attention, and feed-forward blocks used by the encoder and the
generator. Internal module; public contracts live in encoder/generator.
"""

from __future__ import annotations

import math

import numpy as np

from .numerics import (
    Tensor,
    concat,
    dropout,
    gelu,
    layer_norm,
    matmul,
    reshape,
    softmax,
    transpose,
)

INIT_STD = 0.02
NEG_INF = -1e9


class Linear:
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int):
        self.weight = Tensor(rng.normal(0.0, INIT_STD, (d_in, d_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class LayerNorm:
    def __init__(self, dim: int):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


class Embedding:
    def __init__(self, rng: np.random.Generator, n: int, dim: int):
        self.weight = Tensor(rng.normal(0.0, INIT_STD, (n, dim)), requires_grad=True)

    def __call__(self, ids: np.ndarray) -> Tensor:
        from .numerics import embedding

        return embedding(self.weight, np.asarray(ids, dtype=np.int64))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight}


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, T, d) -> (B, heads, T, d/heads)."""
    b, t, d = x.data.shape
    x = reshape(x, (b, t, heads, d // heads))
    return transpose(x, (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    """(B, heads, T, dh) -> (B, T, heads*dh)."""
    b, h, t, dh = x.data.shape
    x = transpose(x, (0, 2, 1, 3))
    return reshape(x, (b, t, h * dh))


class MultiHeadAttention:
    """Scaled dot-product attention over already-projected inputs.

    ``mask_bias`` is an additive array broadcastable to (B, heads, Tq, Tk);
    use ``NEG_INF`` entries to forbid positions.
    """

    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.dim = dim
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)

    def __call__(
        self,
        query_in: Tensor,
        key_in: Tensor,
        value_in: Tensor,
        mask_bias: np.ndarray | None = None,
        attn_dropout: float = 0.0,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        q = _split_heads(self.wq(query_in), self.heads)
        k = _split_heads(self.wk(key_in), self.heads)
        v = _split_heads(self.wv(value_in), self.heads)
        scale = 1.0 / math.sqrt(self.dim // self.heads)
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * scale
        if mask_bias is not None:
            scores = scores + Tensor(mask_bias)
        probs = softmax(scores, axis=-1)
        if training and attn_dropout > 0.0:
            probs = dropout(probs, attn_dropout, rng)
        out = matmul(probs, v)
        return self.wo(_merge_heads(out))

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for sub, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out.update(lin.named(f"{prefix}.{sub}"))
        return out


class FeedForward:
    def __init__(self, rng: np.random.Generator, dim: int, hidden: int):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {**self.fc1.named(f"{prefix}.fc1"), **self.fc2.named(f"{prefix}.fc2")}


class SelfAttentionBlock:
    """Pre-norm transformer block: x + attn(ln1(x)), then x + ff(ln2(x))."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, ff_dim: int):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.ff = FeedForward(rng, dim, ff_dim)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            **self.ln1.named(f"{prefix}.ln1"),
            **self.attn.named(f"{prefix}.attn"),
            **self.ln2.named(f"{prefix}.ln2"),
            **self.ff.named(f"{prefix}.ff"),
        }


def pad_batch(id_lists: list[list[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a rectangle; returns (ids, mask) with mask 1.0 on real tokens."""
    if not id_lists:
        raise ValueError("empty batch")
    width = max(len(ids) for ids in id_lists)
    ids = np.full((len(id_lists), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(id_lists), width))
    for i, row in enumerate(id_lists):
        ids[i, : len(row)] = row
        mask[i, : len(row)] = 1.0
    return ids, mask


def padding_bias(mask: np.ndarray) -> np.ndarray:
    """(B, Tk) key mask -> additive (B, 1, 1, Tk) bias."""
    return np.where(mask > 0.5, 0.0, NEG_INF)[:, None, None, :]


def causal_bias(t_query: int, t_key: int) -> np.ndarray:
    """Additive (1, 1, Tq, Tk) bias letting query i see keys up to offset+i,
    where offset = t_key - t_query (prefix keys, e.g. cached memory, are
    always visible)."""
    offset = t_key - t_query
    if offset < 0:
        raise ValueError("key sequence shorter than query sequence")
    rows = np.arange(t_query)[:, None] + offset
    cols = np.arange(t_key)[None, :]
    return np.where(cols <= rows, 0.0, NEG_INF)[None, None, :, :]
