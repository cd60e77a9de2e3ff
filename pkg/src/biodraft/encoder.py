"""Micro-transformer sentence encoder.

One shared network embeds both evidence sentences and retrieval queries into
fixed-size vectors (mean pooling over the final layer), and is trained
end-to-end through the retrieval soft weights.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ._layers import Embedding, LayerNorm, SelfAttentionBlock, pad_batch, padding_bias
from .numerics import Tensor, dropout, tensor_sum
from .text import SEP, Vocabulary, tokenize


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    model_dim: int = 64
    heads: int = 4
    ff_dim: int = 128
    max_positions: int = 128
    tied_encoders: bool = True

    def __post_init__(self):
        for name in ("layers", "model_dim", "heads", "ff_dim", "max_positions"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.model_dim % self.heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}"
            )


@dataclass
class SentenceEmbedding:
    """Pooled vector plus (doc_index, sentence_index) provenance.

    Queries use provenance (-1, -1).
    """

    vector: Tensor
    provenance: tuple[int, int] = (-1, -1)


class SentenceEncoder:
    """Pre-norm transformer encoder with learned absolute positions."""

    def __init__(self, config: EncoderConfig, vocab: Vocabulary, seed: int = 0):
        self.config = config
        self.vocab = vocab
        rng = np.random.default_rng(seed)
        d = config.model_dim
        self.tok_emb = Embedding(rng, len(vocab), d)
        self.pos_emb = Embedding(rng, config.max_positions, d)
        self.blocks = [
            SelfAttentionBlock(rng, d, config.heads, config.ff_dim)
            for _ in range(config.layers)
        ]
        self.final_ln = LayerNorm(d)
        self.training = False
        self.dropout = 0.0
        self.attn_dropout = 0.0
        self._drop_rng = np.random.default_rng(seed + 1)

    # -- parameter plumbing ---------------------------------------------------
    def params(self) -> dict[str, Tensor]:
        out = {**self.tok_emb.named("tok_emb"), **self.pos_emb.named("pos_emb")}
        for i, block in enumerate(self.blocks):
            out.update(block.named(f"block{i}"))
        out.update(self.final_ln.named("final_ln"))
        return out

    def train(self, mode: bool = True) -> None:
        self.training = mode

    def eval(self) -> None:
        self.training = False

    def set_regularization(self, p_dropout: float, p_attn: float, rng: np.random.Generator) -> None:
        self.dropout = p_dropout
        self.attn_dropout = p_attn
        self._drop_rng = rng

    # -- encoding ---------------------------------------------------------------
    def _clip(self, ids: list[int]) -> list[int]:
        if not ids:
            raise ValueError("cannot encode an empty token sequence")
        if len(ids) > self.config.max_positions:
            warnings.warn(
                f"sequence of {len(ids)} tokens truncated to {self.config.max_positions}"
            )
            ids = ids[: self.config.max_positions]
        return ids

    def encode_ids_batch(self, id_lists: list[list[int]]) -> Tensor:
        """Encode a batch of id sequences into an (n, model_dim) matrix."""
        id_lists = [self._clip(ids) for ids in id_lists]
        ids, mask = pad_batch(id_lists, self.vocab.pad_id)
        n, width = ids.shape
        h = self.tok_emb(ids) + self.pos_emb(np.arange(width))
        if self.training and self.dropout > 0.0:
            h = dropout(h, self.dropout, self._drop_rng)
        bias = padding_bias(mask)
        for block in self.blocks:
            a = block.ln1(h)
            a = block.attn(
                a, a, a,
                mask_bias=bias,
                attn_dropout=self.attn_dropout,
                training=self.training,
                rng=self._drop_rng,
            )
            if self.training and self.dropout > 0.0:
                a = dropout(a, self.dropout, self._drop_rng)
            h = h + a
            f = block.ff(block.ln2(h))
            if self.training and self.dropout > 0.0:
                f = dropout(f, self.dropout, self._drop_rng)
            h = h + f
        h = self.final_ln(h)
        pooled = tensor_sum(h * Tensor(mask[:, :, None]), axis=1)
        counts = Tensor(mask.sum(axis=1, keepdims=True))
        return pooled / counts

    def _to_ids(self, tokens: list[str]) -> list[int]:
        return [self.vocab.token_to_id(t) for t in tokens]

    def encode_sentence(
        self, tokens: list[str], provenance: tuple[int, int] = (-1, -1)
    ) -> SentenceEmbedding:
        vec = self.encode_ids_batch([self._to_ids(tokens)])
        return SentenceEmbedding(vector=vec[0], provenance=provenance)

    def encode_sentences(
        self, items: list[tuple[list[str], tuple[int, int]]]
    ) -> list[SentenceEmbedding]:
        """Batched form of :meth:`encode_sentence`; one forward pass."""
        if not items:
            return []
        mat = self.encode_ids_batch([self._to_ids(tokens) for tokens, _ in items])
        return [
            SentenceEmbedding(vector=mat[i], provenance=prov)
            for i, (_, prov) in enumerate(items)
        ]

    def encode_query_tokens(self, tokens: list[str]) -> SentenceEmbedding:
        return self.encode_sentence(tokens)

    def encode_query(self, name: str, occupations: list[str], heading: str) -> SentenceEmbedding:
        """Encode ``name SEP occ1 .. occn SEP heading`` with the shared encoder."""
        if not name:
            raise ValueError("query name must be non-empty")
        if not heading:
            raise ValueError("query heading must be non-empty")
        if not occupations:
            warnings.warn("encoding query with empty occupations segment")
        tokens = tokenize(name) + [SEP]
        for occ in occupations:
            tokens.extend(tokenize(occ))
        tokens.append(SEP)
        tokens.extend(tokenize(heading))
        return self.encode_query_tokens(tokens)


def build_encoders(
    config: EncoderConfig, vocab: Vocabulary, seed: int = 0
) -> tuple[SentenceEncoder, SentenceEncoder]:
    """(sentence_encoder, query_encoder); the same object when tied."""
    sent = SentenceEncoder(config, vocab, seed=seed)
    if config.tied_encoders:
        return sent, sent
    return sent, SentenceEncoder(config, vocab, seed=seed + 1)
