"""Section-level citation attribution and bracket rendering.

A section cites exactly the documents that contributed at least one retrieved
sentence; citations render as 1-based bracketed indices like ``[1,3,4]``.
"""

from __future__ import annotations

import re

from .retriever import RetrievedEvidence

_BRACKET_RE = re.compile(r"^\[(\d+(?:,\d+)*)\]$")


def attribute(evidence: RetrievedEvidence) -> list[int]:
    """Deduplicated, ascending doc_index values of the selected sentences."""
    return sorted({item.doc_index for item in evidence.items})


def render(citations: list[int]) -> str:
    """0-based indices -> "[i+1,...]"; empty list renders as empty string."""
    if not citations:
        return ""
    if any(citations[i] >= citations[i + 1] for i in range(len(citations) - 1)):
        raise ValueError("citations must be strictly increasing")
    if citations[0] < 0:
        raise ValueError("citations must be nonnegative")
    return "[" + ",".join(str(i + 1) for i in citations) + "]"


def parse(rendered: str) -> list[int]:
    """Inverse of :func:`render`; "" -> []."""
    if rendered == "":
        return []
    m = _BRACKET_RE.match(rendered)
    if not m:
        raise ValueError(f"not a citation bracket: {rendered!r}")
    return [int(s) - 1 for s in m.group(1).split(",")]
