"""Encoder-decoder section generator with a cross-section memory.

The source is the query followed by the retrieved evidence, whose token
embeddings are scaled by the retrieval soft weights (that product is the
gradient path into the retriever). The decoder's self-attention additionally
attends over cached hidden states of the previously generated section, stored
per layer and never receiving gradient. Decoding is grammar-constrained beam
search emitting ``body NEXT_HEADING heading EOS``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._layers import (
    Embedding,
    FeedForward,
    LayerNorm,
    MultiHeadAttention,
    SelfAttentionBlock,
    causal_bias,
)
from .numerics import (
    Tensor,
    concat,
    dropout,
    getitem,
    log_softmax,
    matmul,
    no_grad,
    reshape,
    transpose,
)
from .retriever import RetrievedEvidence
from .text import RESERVED, Vocabulary

# Memory keys get one learned position vector per recency bucket: offsets
# 1-16 from the segment boundary share bucket 0, older positions bucket 1.
MEM_BUCKET_BOUNDARY = 16


@dataclass(frozen=True)
class GeneratorConfig:
    enc_layers: int = 2
    dec_layers: int = 2
    model_dim: int = 64
    heads: int = 4
    ff_dim: int = 128
    max_source: int = 256
    max_target: int = 128
    cache_size: int = 64

    def __post_init__(self):
        for name in ("enc_layers", "dec_layers", "model_dim", "heads", "ff_dim",
                     "max_source", "max_target"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.cache_size < 0:
            raise ValueError("cache_size must be >= 0 (0 disables caching)")
        if self.model_dim % self.heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}"
            )


@dataclass
class SectionCache:
    """Per-decoder-layer hidden states of the previous section, detached."""

    layers: list[Tensor]

    @classmethod
    def empty(cls, dec_layers: int, model_dim: int) -> "SectionCache":
        return cls(layers=[Tensor(np.zeros((0, model_dim))) for _ in range(dec_layers)])

    def size(self) -> int:
        return self.layers[0].data.shape[0] if self.layers else 0


@dataclass(frozen=True)
class DecodeConstraints:
    beam_size: int = 5
    min_len: int | None = None
    max_len: int | None = None
    length_penalty: float = 0.0

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.min_len is not None and self.min_len < 0:
            raise ValueError("min_len must be >= 0")
        if (
            self.min_len is not None
            and self.max_len is not None
            and self.min_len > self.max_len
        ):
            raise ValueError("min_len must not exceed max_len")


def update_cache(states: list[Tensor], cache_size: int) -> SectionCache:
    """Keep the last ``cache_size`` positions of each layer's states, detached.

    Replaces any previous cache wholesale (the memory never spans more than
    one preceding section).
    """
    kept = []
    for s in states:
        data = s.data
        if data.ndim == 3:
            if data.shape[0] != 1:
                raise ValueError("cache update expects an unbatched section")
            data = data[0]
        kept.append(Tensor(data[max(0, data.shape[0] - cache_size):].copy()))
    return SectionCache(layers=kept)


def allowed_next_tokens(
    emitted: Sequence[int], vocab: Vocabulary, constraints: DecodeConstraints
) -> np.ndarray:
    """Boolean mask over the vocabulary for the next decoding step.

    Grammar: non-empty body, one NEXT_HEADING, then either a non-empty
    heading or the END_ARTICLE sentinel, then EOS. Length counting covers
    body plus heading tokens (NEXT_HEADING excluded, END_ARTICLE counted as
    the heading it stands for): EOS stays masked below min_len and the mask
    funnels into NEXT_HEADING/EOS so max_len can never be exceeded.
    """
    n_vocab = len(vocab)
    nh = vocab.next_heading_id
    ea = vocab.end_article_id
    eos = vocab.eos_id
    min_len = constraints.min_len or 0
    max_len = constraints.max_len
    emitted = list(emitted)
    count = sum(1 for t in emitted if t != nh)
    allow = np.zeros(n_vocab, dtype=bool)
    n_reserved = len(RESERVED)
    if nh not in emitted:
        if max_len is None or count + 1 <= max_len - 1:
            allow[n_reserved:] = True
        if len(emitted) >= 1:
            allow[nh] = True
    else:
        heading = emitted[emitted.index(nh) + 1:]
        if heading and heading[0] == ea:
            allow[eos] = True
        else:
            if max_len is None or count + 1 <= max_len:
                allow[n_reserved:] = True
                if not heading and count + 1 >= min_len:
                    allow[ea] = True
            if heading and count >= min_len:
                allow[eos] = True
    return allow


def allowed_next_tokens_article(
    emitted: Sequence[int], vocab: Vocabulary, constraints: DecodeConstraints
) -> np.ndarray:
    """Mask for whole-article decoding: NEXT_HEADING may recur (separating
    sections and heading text), END_ARTICLE only directly after a
    NEXT_HEADING, EOS only after END_ARTICLE. Length counting matches the
    section grammar (all non-NEXT_HEADING tokens count)."""
    n_vocab = len(vocab)
    nh = vocab.next_heading_id
    ea = vocab.end_article_id
    eos = vocab.eos_id
    min_len = constraints.min_len or 0
    max_len = constraints.max_len
    emitted = list(emitted)
    count = sum(1 for t in emitted if t != nh)
    allow = np.zeros(n_vocab, dtype=bool)
    if emitted and emitted[-1] == ea:
        allow[eos] = True
        return allow
    if max_len is None or count + 1 <= max_len - 1:
        allow[len(RESERVED):] = True
    if emitted and emitted[-1] != nh:
        allow[nh] = True
    if (
        emitted
        and emitted[-1] == nh
        and count + 1 >= min_len
        and (max_len is None or count + 1 <= max_len)
    ):
        allow[ea] = True
    return allow


def split_generated(emitted: Sequence[int], vocab: Vocabulary) -> tuple[list[int], list[int]]:
    """Split an emitted id sequence (no BOS/EOS) into (body, heading) at the
    first NEXT_HEADING."""
    emitted = list(emitted)
    if vocab.next_heading_id in emitted:
        p = emitted.index(vocab.next_heading_id)
        return emitted[:p], emitted[p + 1:]
    return emitted, []


def section_sequence(
    body: list[str], heading: list[str], finished: bool
) -> list[str]:
    """Canonical emitted token sequence of a completed section (EOS excluded),
    used to recompute decoder states for the cache."""
    from .text import END_ARTICLE, NEXT_HEADING

    if finished:
        return list(body) + [NEXT_HEADING, END_ARTICLE]
    if heading:
        return list(body) + [NEXT_HEADING] + list(heading)
    return list(body)


class _DecoderBlock:
    def __init__(self, rng: np.random.Generator, dim: int, heads: int, ff_dim: int):
        self.ln1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(rng, dim, heads)
        self.ln_cross = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.ff = FeedForward(rng, dim, ff_dim)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            **self.ln1.named(f"{prefix}.ln1"),
            **self.self_attn.named(f"{prefix}.self_attn"),
            **self.ln_cross.named(f"{prefix}.ln_cross"),
            **self.cross_attn.named(f"{prefix}.cross_attn"),
            **self.ln2.named(f"{prefix}.ln2"),
            **self.ff.named(f"{prefix}.ff"),
        }


class Generator:
    """Micro encoder-decoder with tied input/output token embeddings."""

    def __init__(self, config: GeneratorConfig, vocab: Vocabulary, seed: int = 0):
        self.config = config
        self.vocab = vocab
        rng = np.random.default_rng(seed)
        d = config.model_dim
        self.tok_emb = Embedding(rng, len(vocab), d)
        self.src_pos = Embedding(rng, config.max_source, d)
        self.tgt_pos = Embedding(rng, config.max_target + 1, d)
        self.mem_pos = Embedding(rng, 2, d)
        self.enc_blocks = [
            SelfAttentionBlock(rng, d, config.heads, config.ff_dim)
            for _ in range(config.enc_layers)
        ]
        self.enc_final_ln = LayerNorm(d)
        self.dec_blocks = [
            _DecoderBlock(rng, d, config.heads, config.ff_dim)
            for _ in range(config.dec_layers)
        ]
        self.dec_final_ln = LayerNorm(d)
        self.training = False
        self.dropout = 0.0
        self.attn_dropout = 0.0
        self._drop_rng = np.random.default_rng(seed + 1)

    # -- parameter plumbing ---------------------------------------------------
    def params(self) -> dict[str, Tensor]:
        out = {
            **self.tok_emb.named("tok_emb"),
            **self.src_pos.named("src_pos"),
            **self.tgt_pos.named("tgt_pos"),
            **self.mem_pos.named("mem_pos"),
        }
        for i, b in enumerate(self.enc_blocks):
            out.update(b.named(f"enc{i}"))
        out.update(self.enc_final_ln.named("enc_final_ln"))
        for i, b in enumerate(self.dec_blocks):
            out.update(b.named(f"dec{i}"))
        out.update(self.dec_final_ln.named("dec_final_ln"))
        return out

    def train(self, mode: bool = True) -> None:
        self.training = mode

    def eval(self) -> None:
        self.training = False

    def set_regularization(self, p_dropout: float, p_attn: float, rng: np.random.Generator) -> None:
        self.dropout = p_dropout
        self.attn_dropout = p_attn
        self._drop_rng = rng

    def empty_cache(self) -> SectionCache:
        return SectionCache.empty(self.config.dec_layers, self.config.model_dim)

    def update_cache(self, states: list[Tensor]) -> SectionCache:
        return update_cache(states, self.config.cache_size)

    # -- source ---------------------------------------------------------------
    def _build_source(
        self, query_tokens: list[str], evidence: RetrievedEvidence | None
    ) -> tuple[list[int], Tensor | None]:
        to_id = self.vocab.token_to_id
        q_ids = [to_id(t) for t in query_tokens] + [self.vocab.sep_id]
        if len(q_ids) > self.config.max_source:
            raise ValueError(
                f"query of {len(q_ids)} tokens exceeds max_source "
                f"{self.config.max_source}; the query is never truncated"
            )
        budget = self.config.max_source - len(q_ids)
        ev_ids: list[int] = []
        sent_of_pos: list[int] = []
        if evidence is not None:
            for si, item in enumerate(evidence.items):
                for t in item.tokens:
                    if len(ev_ids) == budget:
                        break
                    ev_ids.append(to_id(t))
                    sent_of_pos.append(si)
                if len(ev_ids) == budget:
                    break
        ids = q_ids + ev_ids
        scale = None
        if ev_ids:
            scale = concat(
                [
                    Tensor(np.ones(len(q_ids))),
                    getitem(evidence.weights, np.array(sent_of_pos)),
                ],
                axis=0,
            )
        return ids, scale

    def _maybe_drop(self, x: Tensor) -> Tensor:
        if self.training and self.dropout > 0.0:
            return dropout(x, self.dropout, self._drop_rng)
        return x

    def encode_source(
        self, query_tokens: list[str], evidence: RetrievedEvidence | None
    ) -> Tensor:
        """(1, S, model_dim) encoder states; evidence embeddings are scaled by
        their sentence's soft weight (positions are added unscaled)."""
        ids, scale = self._build_source(query_tokens, evidence)
        n_src = len(ids)
        emb = self.tok_emb(np.array([ids]))
        if scale is not None:
            emb = emb * reshape(scale, (1, n_src, 1))
        x = emb + self.src_pos(np.arange(n_src))
        x = self._maybe_drop(x)
        for blk in self.enc_blocks:
            z = blk.ln1(x)
            a = blk.attn(
                z, z, z,
                attn_dropout=self.attn_dropout, training=self.training, rng=self._drop_rng,
            )
            x = x + self._maybe_drop(a)
            x = x + self._maybe_drop(blk.ff(blk.ln2(x)))
        return self.enc_final_ln(x)

    # -- decoder ----------------------------------------------------------------
    def _decode(
        self,
        enc_out: Tensor,
        ids: np.ndarray,
        cache: SectionCache | None,
        collect_states: bool = False,
    ) -> tuple[Tensor, list[Tensor]]:
        n_beams, t_cur = ids.shape
        if t_cur > self.config.max_target + 1:
            raise ValueError(
                f"decoder input of {t_cur} exceeds max_target+1 = {self.config.max_target + 1}"
            )
        x = self.tok_emb(ids) + self.tgt_pos(np.arange(t_cur))
        x = self._maybe_drop(x)
        states: list[Tensor] = []
        use_mem = cache is not None and cache.size() > 0
        for li, blk in enumerate(self.dec_blocks):
            if collect_states:
                states.append(x)
            z = blk.ln1(x)
            if use_mem:
                # Defensive detach: memory participates as a constant even if
                # the caller passed differentiable tensors.
                mem = Tensor(cache.layers[li].data)
                m = mem.data.shape[0]
                mem_ln = blk.ln1(mem)
                offsets = m - np.arange(m)
                buckets = (offsets > MEM_BUCKET_BOUNDARY).astype(np.int64)
                mem_key = mem_ln + self.mem_pos(buckets)
                tile = Tensor(np.zeros((n_beams, 1, 1)))
                key_in = concat([mem_key + tile, z], axis=1)
                val_in = concat([mem_ln + tile, z], axis=1)
                bias = causal_bias(t_cur, m + t_cur)
            else:
                key_in = val_in = z
                bias = causal_bias(t_cur, t_cur)
            a = blk.self_attn(
                z, key_in, val_in,
                mask_bias=bias,
                attn_dropout=self.attn_dropout, training=self.training, rng=self._drop_rng,
            )
            x = x + self._maybe_drop(a)
            c = blk.cross_attn(
                blk.ln_cross(x), enc_out, enc_out,
                attn_dropout=self.attn_dropout, training=self.training, rng=self._drop_rng,
            )
            x = x + self._maybe_drop(c)
            x = x + self._maybe_drop(blk.ff(blk.ln2(x)))
        h = self.dec_final_ln(x)
        logits = matmul(h, transpose(self.tok_emb.weight))
        return logits, states

    def forward_with_states(
        self,
        query_tokens: list[str],
        evidence: RetrievedEvidence | None,
        target_prefix: list[str],
        cache: SectionCache | None = None,
    ) -> tuple[Tensor, list[Tensor]]:
        """Teacher-forced pass; returns ((len(prefix)+1, vocab) logits,
        per-layer decoder input states)."""
        if len(target_prefix) > self.config.max_target:
            raise ValueError(
                f"target prefix of {len(target_prefix)} exceeds max_target "
                f"{self.config.max_target}"
            )
        enc_out = self.encode_source(query_tokens, evidence)
        ids = np.array(
            [[self.vocab.bos_id] + [self.vocab.token_to_id(t) for t in target_prefix]]
        )
        logits, states = self._decode(enc_out, ids, cache, collect_states=True)
        return getitem(logits, 0), states

    def forward(
        self,
        query_tokens: list[str],
        evidence: RetrievedEvidence | None,
        target_prefix: list[str],
        cache: SectionCache | None = None,
    ) -> Tensor:
        """Next-token logits at every target position, shape
        (len(target_prefix)+1, vocab)."""
        return self.forward_with_states(query_tokens, evidence, target_prefix, cache)[0]

    # -- decoding ---------------------------------------------------------------
    def generate_section(
        self,
        query_tokens: list[str],
        evidence: RetrievedEvidence | None,
        cache: SectionCache | None,
        constraints: DecodeConstraints,
    ) -> tuple[list[str], list[str], bool]:
        """Beam-search one section.

        Returns (body tokens, next-heading tokens, finished). ``finished``
        means the article ends here (the model named END_ARTICLE as the next
        heading, in which case the heading token list is empty). Hitting
        max_target without EOS forces a stop with finished=False and a
        warning.
        """
        if constraints.max_len is not None and constraints.max_len < 2:
            raise ValueError(
                "max_len < 2 cannot satisfy the non-empty body + heading grammar"
            )
        vocab = self.vocab
        best, forced = self._search(
            query_tokens, evidence, cache, constraints, allowed_next_tokens
        )
        body_ids, heading_ids = split_generated(best, vocab)
        finished = bool(heading_ids) and heading_ids[0] == vocab.end_article_id
        if finished:
            heading_ids = []
        if forced:
            finished = False
        body = [vocab.id_to_token(i) for i in body_ids]
        heading = [vocab.id_to_token(i) for i in heading_ids]
        return body, heading, finished

    def generate_article(
        self,
        query_tokens: list[str],
        evidence: RetrievedEvidence | None,
        constraints: DecodeConstraints,
    ) -> tuple[list[str], bool]:
        """Beam-search an entire article in one pass (no section cache).

        Returns (tokens, finished) where tokens is the raw stream with
        NEXT_HEADING separators kept (END_ARTICLE stripped) and finished
        mirrors generate_section: False only on a forced stop.
        """
        if constraints.max_len is not None and constraints.max_len < 2:
            raise ValueError(
                "max_len < 2 cannot satisfy the non-empty body + heading grammar"
            )
        vocab = self.vocab
        best, forced = self._search(
            query_tokens, evidence, None, constraints, allowed_next_tokens_article
        )
        tokens = [
            vocab.id_to_token(i) for i in best if i != vocab.end_article_id
        ]
        return tokens, not forced

    def _search(self, query_tokens, evidence, cache, constraints, mask_fn):
        was_training = self.training
        self.training = False
        try:
            with no_grad():
                return self._beam_search(
                    query_tokens, evidence, cache, constraints, mask_fn
                )
        finally:
            self.training = was_training

    def _beam_search(self, query_tokens, evidence, cache, constraints, mask_fn):
        vocab = self.vocab
        eos = vocab.eos_id
        enc_out = self.encode_source(query_tokens, evidence)
        beams: list[tuple[float, list[int]]] = [(0.0, [])]
        done: list[tuple[float, int, list[int]]] = []

        def finalized(score: float, emitted: list[int]) -> float:
            if constraints.length_penalty == 0.0:
                return score
            return score / ((len(emitted) + 1) ** constraints.length_penalty)

        for _ in range(self.config.max_target):
            ids = np.array([[vocab.bos_id] + emitted for _, emitted in beams])
            logits, _ = self._decode(enc_out, ids, cache)
            logp = log_softmax(getitem(logits, (slice(None), -1))).data
            candidates = []
            for bi, (bscore, emitted) in enumerate(beams):
                mask = mask_fn(emitted, vocab, constraints)
                for tok in np.flatnonzero(mask):
                    candidates.append((bscore + logp[bi, tok], bi, int(tok)))
            candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
            next_beams = []
            for rank, (cscore, bi, tok) in enumerate(candidates):
                emitted = beams[bi][1]
                if tok == eos:
                    # Only a top-beam_size candidate may finish: a width-k
                    # search never visits lower-ranked hypotheses, and beam 1
                    # must reduce exactly to step-wise argmax.
                    if rank < constraints.beam_size:
                        done.append((finalized(cscore, emitted), len(done), emitted))
                elif len(next_beams) < constraints.beam_size:
                    next_beams.append((cscore, emitted + [tok]))
            beams = next_beams
            if not beams:
                break
            if constraints.length_penalty == 0.0 and len(done) >= constraints.beam_size:
                # Scores only decrease as beams extend, so once every slot of
                # the final ranking is occupied by a better finished sequence
                # no live beam can still win.
                kth = sorted(d[0] for d in done)[-constraints.beam_size]
                if beams[0][0] <= kth:
                    break

        forced = False
        if done:
            best = max(done, key=lambda d: (d[0], -d[1]))[2]
        else:
            warnings.warn(
                f"no beam emitted EOS within max_target={self.config.max_target}; forced stop"
            )
            forced = True
            best = beams[0][1] if beams else []
        return best, forced
