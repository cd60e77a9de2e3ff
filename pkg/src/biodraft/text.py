"""Word-level tokenization, vocabulary management, and sentence segmentation.

Tokenization lowercases; stored corpus text keeps its original casing so the
capitalization-based entity heuristic in the metrics module still works.
"""

from __future__ import annotations

import re
from collections import Counter
from pathlib import Path
from typing import Iterable

PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"
SEP = "<sep>"
NEXT_HEADING = "<next_heading>"
END_ARTICLE = "<end_article>"
UNK = "<unk>"

RESERVED = (PAD, BOS, EOS, SEP, NEXT_HEADING, END_ARTICLE, UNK)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)
# Sentence boundary: terminal punctuation followed by whitespace and a capital.
_BOUNDARY_RE = re.compile(r"[.!?](?=\s+[A-Z])")


def tokenize(text: str) -> list[str]:
    """Split into lowercased word and punctuation tokens."""
    return [t.lower() for t in _TOKEN_RE.findall(text)]


def word_count(text: str) -> int:
    """Number of whitespace-delimited words."""
    return len(text.split())


def sentence_split(text: str) -> list[str]:
    """Split on ., !, ? followed by whitespace plus a capital, or end of text.

    All non-whitespace characters are preserved; only the whitespace between
    sentences is dropped.
    """
    pieces = []
    start = 0
    for m in _BOUNDARY_RE.finditer(text):
        pieces.append(text[start:m.end()])
        start = m.end()
    pieces.append(text[start:])
    return [p.strip() for p in pieces if p.strip()]


class Vocabulary:
    """Immutable token <-> id bijection with reserved tokens at ids 0-6."""

    def __init__(self, tokens: Iterable[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self._tokens = tuple(tokens)
        self._ids = {t: i for i, t in enumerate(self._tokens)}

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def sep_id(self) -> int:
        return 3

    @property
    def next_heading_id(self) -> int:
        return 4

    @property
    def end_article_id(self) -> int:
        return 5

    @property
    def unk_id(self) -> int:
        return 6

    def token_to_id(self, token: str) -> int:
        return self._ids.get(token, self.unk_id)

    def id_to_token(self, idx: int) -> str:
        if not 0 <= idx < len(self._tokens):
            raise ValueError(f"token id {idx} out of range for vocabulary of size {len(self._tokens)}")
        return self._tokens[idx]

    def encode(self, text: str) -> list[int]:
        """Tokenize and map to ids; unknown tokens map to UNK."""
        return [self.token_to_id(t) for t in tokenize(text)]

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        """Space-joined tokens; reproduces input up to casing/whitespace."""
        toks = [self.id_to_token(i) for i in ids]
        if skip_special:
            toks = [t for t in toks if t not in RESERVED]
        return " ".join(toks)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self._tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


def build_vocab(texts: Iterable[str], max_size: int) -> Vocabulary:
    """Most frequent tokens across ``texts``, ties broken lexicographically.

    The 7 reserved tokens always occupy ids 0-6 and count against max_size.
    """
    if max_size <= len(RESERVED):
        raise ValueError(f"max_size must exceed {len(RESERVED)}, got {max_size}")
    counts: Counter[str] = Counter()
    for text in texts:
        counts.update(tokenize(text))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [tok for tok, _ in ranked[: max_size - len(RESERVED)]]
    return Vocabulary(list(RESERVED) + keep)
