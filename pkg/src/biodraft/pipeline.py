"""Full-article generation: section loop, heading chaining, cache threading,
citation attribution, plain-text rendering, and a parse-back helper.

Articles start at the "toplevel" sentinel heading. Each iteration retrieves
evidence for the current heading, generates the section body plus the next
heading, cites the contributing documents, and carries the decoder cache
forward. Generation stops on the END_ARTICLE sentinel, on a repeated heading,
on a missing next heading, or at max_sections.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from . import citer
from .corpus import TOPLEVEL, EvidenceDocument
from .generator import (
    DecodeConstraints,
    Generator,
    SectionCache,
    section_sequence,
)
from .numerics import Tensor, no_grad
from .retriever import EmptyEvidence, Query, RetrievedEvidence, Retriever
from .text import Vocabulary

_REF_LINE_RE = re.compile(r"^(\d+)\. (\S+)$")
_HEADING_LINE_RE = re.compile(r"^=(.+)=$")
_TRAILING_CITES_RE = re.compile(r" (\[\d+(?:,\d+)*\])$")


@dataclass(frozen=True)
class PipelineConfig:
    max_sections: int = 10
    constraints: DecodeConstraints = field(default_factory=DecodeConstraints)
    query_mode: str = "full"

    def __post_init__(self):
        if self.max_sections < 1:
            raise ValueError("max_sections must be >= 1")


@dataclass
class ArticleModel:
    """Everything needed to write articles; components must share one
    vocabulary."""

    vocab: Vocabulary
    retriever: Retriever
    generator: Generator

    def validate(self) -> None:
        for part, v in (
            ("generator", self.generator.vocab),
            ("sentence encoder", self.retriever.sentence_encoder.vocab),
            ("query encoder", self.retriever.query_encoder.vocab),
        ):
            if v.tokens != self.vocab.tokens:
                raise ValueError(f"vocabulary mismatch between model and {part}")


@dataclass
class DraftSection:
    heading: str
    text: str
    citations: list[int]


@dataclass
class ArticleDraft:
    name: str
    occupations: list[str]
    sections: list[DraftSection]
    references: dict[int, str]


@dataclass
class SectionTrace:
    """Instrumentation record handed to the optional write_article hook."""

    index: int
    heading: str
    query: Query
    evidence: RetrievedEvidence | None
    cache_before: SectionCache
    states: list[Tensor]
    cache_after: SectionCache
    body_tokens: list[str]
    heading_tokens: list[str]
    finished: bool


def write_article(
    name: str,
    occupations: list[str],
    hits: list[EvidenceDocument],
    model: ArticleModel,
    config: PipelineConfig,
    trace: Callable[[SectionTrace], None] | None = None,
) -> ArticleDraft:
    """Generate one article section by section over pre-filtered hits."""
    model.validate()
    gen = model.generator
    heading = TOPLEVEL
    seen = {TOPLEVEL}
    cache = gen.empty_cache()
    sections: list[DraftSection] = []
    cited_docs: set[int] = set()
    for index in range(config.max_sections):
        query = Query(name, tuple(occupations), heading, config.query_mode)
        try:
            evidence = model.retriever.select(query, hits)
        except EmptyEvidence:
            evidence = None
        body, next_heading, finished = gen.generate_section(
            query.tokens(), evidence, cache, config.constraints
        )
        citations = citer.attribute(evidence) if evidence is not None else []
        cited_docs.update(citations)
        sections.append(DraftSection(heading=heading, text=" ".join(body), citations=citations))
        with no_grad():
            _, states = gen.forward_with_states(
                query.tokens(), evidence,
                section_sequence(body, next_heading, finished), cache,
            )
        new_cache = gen.update_cache(states)
        if trace is not None:
            trace(SectionTrace(
                index=index, heading=heading, query=query, evidence=evidence,
                cache_before=cache, states=states, cache_after=new_cache,
                body_tokens=body, heading_tokens=next_heading, finished=finished,
            ))
        cache = new_cache
        if finished or not next_heading:
            break
        heading = " ".join(next_heading)
        if heading in seen:
            break
        seen.add(heading)
    url_of = {h.doc_index: h.url for h in hits}
    references = {d: url_of[d] for d in sorted(cited_docs)}
    return ArticleDraft(
        name=name, occupations=list(occupations), sections=sections, references=references
    )


def write_article_whole(
    name: str,
    occupations: list[str],
    hits: list[EvidenceDocument],
    model: ArticleModel,
    config: PipelineConfig,
    trace: Callable[[Query, RetrievedEvidence | None], None] | None = None,
) -> ArticleDraft:
    """Generate the entire article from a single toplevel query.

    One retrieval feeds one long decode with section separators kept inline,
    so the draft comes back as a single section whose text interleaves bodies
    and headings in reading order. Used by the granularity comparison, where
    only the flat text and the citation set matter.
    """
    model.validate()
    query = Query(name, tuple(occupations), TOPLEVEL, config.query_mode)
    try:
        evidence = model.retriever.select(query, hits)
    except EmptyEvidence:
        evidence = None
    if trace is not None:
        trace(query, evidence)
    tokens, _ = model.generator.generate_article(
        query.tokens(), evidence, config.constraints
    )
    nh = model.vocab.id_to_token(model.vocab.next_heading_id)
    text = " ".join(t for t in tokens if t != nh)
    citations = citer.attribute(evidence) if evidence is not None else []
    url_of = {h.doc_index: h.url for h in hits}
    references = {d: url_of[d] for d in citations}
    return ArticleDraft(
        name=name,
        occupations=list(occupations),
        sections=[DraftSection(heading=TOPLEVEL, text=text, citations=citations)],
        references=references,
    )


def render_article(draft: ArticleDraft) -> str:
    """Toplevel body, then "=heading=" blocks, each body line carrying its
    trailing citation bracket, then "i. url" reference lines (1-based doc
    indices matching the brackets)."""
    lines: list[str] = []
    for i, sec in enumerate(draft.sections):
        if i > 0:
            lines.append("")
            lines.append(f"={sec.heading}=")
        bracket = citer.render(sec.citations)
        lines.append(sec.text + (" " + bracket if bracket else ""))
    if draft.references:
        lines.append("")
        for d in sorted(draft.references):
            lines.append(f"{d + 1}. {draft.references[d]}")
    return "\n".join(lines) + "\n"


def parse_article(text: str) -> tuple[list[tuple[str, str, list[int]]], dict[int, str]]:
    """Structural inverse of render_article for round-trip checks.

    Returns ([(heading, body, citations), ...], references).
    """
    lines = text.splitlines()
    references: dict[int, str] = {}
    while lines and (m := _REF_LINE_RE.match(lines[-1])):
        references[int(m.group(1)) - 1] = m.group(2)
        lines.pop()
    while lines and not lines[-1]:
        lines.pop()
    sections: list[tuple[str, str, list[int]]] = []
    heading = TOPLEVEL
    for line in lines:
        if not line:
            continue
        if m := _HEADING_LINE_RE.match(line):
            heading = m.group(1)
            continue
        citations: list[int] = []
        body = line
        if m := _TRAILING_CITES_RE.search(line):
            citations = citer.parse(m.group(1))
            body = line[: m.start()]
        sections.append((heading, body, citations))
    return sections, references


def draft_to_record(draft: ArticleDraft) -> dict:
    return {
        "name": draft.name,
        "occupations": list(draft.occupations),
        "sections": [
            {"heading": s.heading, "text": s.text, "citations": s.citations}
            for s in draft.sections
        ],
        "references": {str(k): v for k, v in draft.references.items()},
    }


def write_drafts(drafts: Iterable[ArticleDraft], path: str | Path) -> None:
    """JSONL sidecar consumed by the metrics module."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for d in drafts:
            fh.write(json.dumps(draft_to_record(d), ensure_ascii=False) + "\n")


def load_drafts(path: str | Path) -> list[ArticleDraft]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(ArticleDraft(
                name=rec["name"],
                occupations=list(rec["occupations"]),
                sections=[
                    DraftSection(s["heading"], s["text"], list(s["citations"]))
                    for s in rec["sections"]
                ],
                references={int(k): v for k, v in rec["references"].items()},
            ))
    return out
