"""Dot-product evidence retrieval with a sentence budget.

Scores every evidence sentence against an encoded query, greedily takes the
best-scoring sentences under both a count cap and a word budget, and attaches
softmax weights over the selected scores so the selection participates in
end-to-end training (hard selection itself carries no gradient; the weights
do).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import EvidenceDocument
from .encoder import SentenceEncoder, SentenceEmbedding
from .numerics import Tensor, getitem, matmul, softmax
from .text import SEP, sentence_split, tokenize, word_count

MODES = ("name_only", "name_occupation", "full")
STRATEGIES = ("flat", "two_stage", "baseline_truncate")


class EmptyEvidence(RuntimeError):
    """No candidate sentence available (or none fits the budget)."""


@dataclass(frozen=True)
class Query:
    """Retrieval query; ``mode`` controls which components are encoded."""

    name: str
    occupations: tuple[str, ...]
    heading: str
    mode: str = "full"

    def __post_init__(self):
        if not self.name:
            raise ValueError("query name must be non-empty")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "full" and not self.heading:
            raise ValueError("full-mode query needs a heading")

    def tokens(self) -> list[str]:
        toks = tokenize(self.name)
        if self.mode in ("name_occupation", "full"):
            toks.append(SEP)
            for occ in self.occupations:
                toks.extend(tokenize(occ))
        if self.mode == "full":
            toks.append(SEP)
            toks.extend(tokenize(self.heading))
        return toks


@dataclass(frozen=True)
class RetrievalConfig:
    top_k_sentences: int = 40
    max_words: int = 1000
    temperature: float = 1.0
    strategy: str = "flat"

    def __post_init__(self):
        if self.top_k_sentences <= 0:
            raise ValueError("top_k_sentences must be positive")
        if self.max_words <= 0:
            raise ValueError("max_words must be positive")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")


@dataclass(frozen=True)
class Candidate:
    """One evidence sentence with provenance and its word cost."""

    tokens: tuple[str, ...]
    text: str
    doc_index: int
    sentence_index: int
    words: int


@dataclass
class RetrievedItem:
    tokens: list[str]
    doc_index: int
    sentence_index: int
    score: float
    weight: float
    text: str = ""


@dataclass
class RetrievedEvidence:
    """Selected sentences in descending-score order.

    ``weights`` is the differentiable softmax over selected raw scores;
    ``items[i].weight`` mirrors ``weights.data[i]`` for inspection.
    """

    items: list[RetrievedItem]
    weights: Tensor
    total_words: int

    def doc_indices(self) -> list[int]:
        return sorted({item.doc_index for item in self.items})


def split_documents(documents: list[EvidenceDocument]) -> list[Candidate]:
    """Sentence-split every document into scored retrieval units."""
    out = []
    for doc in documents:
        for j, sent in enumerate(sentence_split(doc.text)):
            tokens = tuple(tokenize(sent))
            if not tokens:
                continue
            out.append(
                Candidate(
                    tokens=tokens,
                    text=sent,
                    doc_index=doc.doc_index,
                    sentence_index=j,
                    words=word_count(sent),
                )
            )
    return out


def score(query_embedding, sentence_embeddings) -> Tensor:
    """Raw relevance scores ⟨q, sᵢ⟩ as a differentiable length-n vector."""
    q = query_embedding.vector if isinstance(query_embedding, SentenceEmbedding) else query_embedding
    if isinstance(sentence_embeddings, Tensor):
        mat = sentence_embeddings
    else:
        vecs = [
            e.vector if isinstance(e, SentenceEmbedding) else e for e in sentence_embeddings
        ]
        data_rows = [v.data for v in vecs]
        widths = {row.shape[-1] for row in data_rows}
        if len(widths) > 1:
            raise ValueError(f"inconsistent embedding dims {sorted(widths)}")
        from .numerics import concat, reshape

        mat = concat([reshape(v, (1, v.data.shape[-1])) for v in vecs], axis=0)
    if mat.data.shape[-1] != q.data.shape[-1]:
        raise ValueError(
            f"dimension mismatch: sentences {mat.data.shape[-1]} vs query {q.data.shape[-1]}"
        )
    return matmul(mat, q)


def _greedy_walk(
    order: list[int], cands: list[Candidate], top_k: int, max_words: int
) -> tuple[list[int], int]:
    """Scan candidates in rank order; skip any sentence that would burst the
    word budget and keep scanning."""
    chosen = []
    total = 0
    for idx in order:
        if len(chosen) == top_k:
            break
        if total + cands[idx].words > max_words:
            continue
        chosen.append(idx)
        total += cands[idx].words
    return chosen, total


class Retriever:
    """Binds the encoders to the selection strategies."""

    def __init__(
        self,
        sentence_encoder: SentenceEncoder,
        query_encoder: SentenceEncoder,
        config: RetrievalConfig,
    ):
        self.sentence_encoder = sentence_encoder
        self.query_encoder = query_encoder
        self.config = config

    def encode_candidates(
        self, documents: list[EvidenceDocument]
    ) -> tuple[list[Candidate], Tensor | None]:
        """Split and batch-encode once; reusable across the sections of one
        biography within a single update."""
        cands = split_documents(documents)
        if not cands:
            return [], None
        mat = self.sentence_encoder.encode_ids_batch(
            [[self.sentence_encoder.vocab.token_to_id(t) for t in c.tokens] for c in cands]
        )
        return cands, mat

    def select(
        self,
        query: Query,
        documents: list[EvidenceDocument],
        candidates: tuple[list[Candidate], Tensor | None] | None = None,
    ) -> RetrievedEvidence:
        cfg = self.config
        if cfg.strategy == "baseline_truncate":
            return baseline_truncate(documents, cfg.max_words)
        if cfg.strategy == "two_stage":
            return self.select_two_stage(query, documents, candidates)
        return self._select_flat(query, documents, candidates)

    def _scored_candidates(self, query, documents, candidates):
        cands, mat = candidates if candidates is not None else self.encode_candidates(documents)
        if not cands:
            raise EmptyEvidence("no candidate sentences to retrieve from")
        q = self.query_encoder.encode_query_tokens(query.tokens())
        return cands, score(q, mat)

    def _finish(self, cands, scores, chosen, total) -> RetrievedEvidence:
        if not chosen:
            raise EmptyEvidence("no sentence fits the retrieval budget")
        weights = softmax(getitem(scores, np.array(chosen)), temperature=self.config.temperature)
        items = [
            RetrievedItem(
                tokens=list(cands[i].tokens),
                doc_index=cands[i].doc_index,
                sentence_index=cands[i].sentence_index,
                score=float(scores.data[i]),
                weight=float(weights.data[pos]),
                text=cands[i].text,
            )
            for pos, i in enumerate(chosen)
        ]
        return RetrievedEvidence(items=items, weights=weights, total_words=total)

    def _rank(self, cands: list[Candidate], scores: np.ndarray) -> list[int]:
        return sorted(
            range(len(cands)),
            key=lambda i: (-scores[i], cands[i].doc_index, cands[i].sentence_index),
        )

    def _select_flat(self, query, documents, candidates=None) -> RetrievedEvidence:
        cands, scores = self._scored_candidates(query, documents, candidates)
        order = self._rank(cands, scores.data)
        chosen, total = _greedy_walk(order, cands, self.config.top_k_sentences, self.config.max_words)
        return self._finish(cands, scores, chosen, total)

    def select_two_stage(self, query, documents, candidates=None) -> RetrievedEvidence:
        """Score documents by their best sentence, then select only within the
        winning document."""
        cands, scores = self._scored_candidates(query, documents, candidates)
        doc_best: dict[int, float] = {}
        for i, c in enumerate(cands):
            s = scores.data[i]
            if c.doc_index not in doc_best or s > doc_best[c.doc_index]:
                doc_best[c.doc_index] = s
        best_doc = min(doc_best, key=lambda d: (-doc_best[d], d))
        pool = [i for i, c in enumerate(cands) if c.doc_index == best_doc]
        order = [i for i in self._rank(cands, scores.data) if i in set(pool)]
        chosen, total = _greedy_walk(order, cands, self.config.top_k_sentences, self.config.max_words)
        return self._finish(cands, scores, chosen, total)


def baseline_truncate(documents: list[EvidenceDocument], max_tokens: int) -> RetrievedEvidence:
    """Order-preserving prefix of the concatenated hits, cut at a whitespace
    token boundary; zero scores, uniform weights. Tolerates an empty hit list.
    """
    if max_tokens <= 0:
        raise ValueError("max_tokens must be positive")
    items = []
    remaining = max_tokens
    for doc in documents:
        if remaining == 0:
            break
        words = doc.text.split()
        if not words:
            continue
        take = words[:remaining]
        remaining -= len(take)
        chunk = " ".join(take)
        items.append(
            RetrievedItem(
                tokens=tokenize(chunk),
                doc_index=doc.doc_index,
                sentence_index=0,
                score=0.0,
                weight=0.0,
                text=chunk,
            )
        )
    if not items:
        return RetrievedEvidence(items=[], weights=Tensor(np.zeros(0)), total_words=0)
    uniform = 1.0 / len(items)
    for item in items:
        item.weight = uniform
    weights = Tensor(np.full(len(items), uniform))
    return RetrievedEvidence(
        items=items, weights=weights, total_words=max_tokens - remaining
    )
