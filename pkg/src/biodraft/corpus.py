"""Biography data model, JSONL ingestion, hit filtering, dataset statistics,
and deterministic synthetic-corpus generation for ablation experiments.
"""

from __future__ import annotations

import json
import random
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable
from urllib.parse import urlparse

from .text import sentence_split, tokenize, word_count

TOPLEVEL = "toplevel"

_RECORD_FIELDS = {"id", "name", "occupations", "sections", "web_hits"}
_SECTION_FIELDS = {"heading", "text"}
_HIT_FIELDS = {"url", "title", "text"}


class CorpusError(ValueError):
    """Malformed corpus file or invariant-violating record."""


@dataclass(frozen=True)
class EvidenceDocument:
    """One web hit; ``doc_index`` is the document's position in its hit list."""

    doc_index: int
    url: str
    title: str
    text: str


@dataclass(frozen=True)
class Section:
    heading: str
    text: str


@dataclass
class Biography:
    """One training/eval unit: subject, ordered sections, and web hits."""

    id: str
    name: str
    occupations: list[str]
    sections: list[Section]
    web_hits: list[EvidenceDocument]

    def validate(self) -> None:
        if not self.occupations:
            raise CorpusError(f"biography {self.id!r}: occupations must be non-empty")
        if not self.sections:
            raise CorpusError(f"biography {self.id!r}: needs at least one section")
        if self.sections[0].heading != TOPLEVEL:
            raise CorpusError(
                f"biography {self.id!r}: first section heading must be {TOPLEVEL!r}, "
                f"got {self.sections[0].heading!r}"
            )
        seen = set()
        for hit in self.web_hits:
            if not hit.url:
                raise CorpusError(f"biography {self.id!r}: evidence document with empty url")
            if hit.doc_index in seen:
                raise CorpusError(f"biography {self.id!r}: duplicate doc_index {hit.doc_index}")
            seen.add(hit.doc_index)

    def article_text(self) -> str:
        """Toplevel body followed by each heading and body, space-joined."""
        parts = [self.sections[0].text]
        for sec in self.sections[1:]:
            parts.append(sec.heading)
            parts.append(sec.text)
        return " ".join(parts)

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "occupations": list(self.occupations),
            "sections": [{"heading": s.heading, "text": s.text} for s in self.sections],
            "web_hits": [{"url": h.url, "title": h.title, "text": h.text} for h in self.web_hits],
        }


@dataclass
class DatasetStats:
    """Table-style corpus averages; hit-derived values use filtered hits."""

    avg_sections: float
    avg_section_len: float
    avg_article_len: float
    avg_hits: float
    avg_overlap: float

    def to_dict(self) -> dict:
        return {
            "avg_sections": self.avg_sections,
            "avg_section_len": self.avg_section_len,
            "avg_article_len": self.avg_article_len,
            "avg_hits": self.avg_hits,
            "avg_overlap": self.avg_overlap,
        }


def _record_to_biography(rec: dict, line_no: int, strict: bool) -> Biography:
    if not isinstance(rec, dict):
        raise CorpusError(f"line {line_no}: record must be a JSON object")
    missing = _RECORD_FIELDS - rec.keys()
    if missing:
        raise CorpusError(f"line {line_no}: missing fields {sorted(missing)}")
    unknown = rec.keys() - _RECORD_FIELDS
    if unknown:
        if strict:
            raise CorpusError(f"line {line_no}: unknown fields {sorted(unknown)}")
        warnings.warn(f"line {line_no}: ignoring unknown fields {sorted(unknown)}")
    sections = []
    for s in rec["sections"]:
        extra = s.keys() - _SECTION_FIELDS
        if extra and strict:
            raise CorpusError(f"line {line_no}: unknown section fields {sorted(extra)}")
        sections.append(Section(heading=s["heading"], text=s["text"]))
    hits = []
    for i, h in enumerate(rec["web_hits"]):
        extra = h.keys() - _HIT_FIELDS
        if extra and strict:
            raise CorpusError(f"line {line_no}: unknown web_hit fields {sorted(extra)}")
        hits.append(EvidenceDocument(doc_index=i, url=h["url"], title=h["title"], text=h["text"]))
    bio = Biography(
        id=rec["id"],
        name=rec["name"],
        occupations=list(rec["occupations"]),
        sections=sections,
        web_hits=hits,
    )
    try:
        bio.validate()
    except CorpusError as e:
        raise CorpusError(f"line {line_no}: {e}") from None
    return bio


def load_corpus(path: str | Path, strict: bool = True) -> list[Biography]:
    """Parse a JSONL corpus file, preserving record order.

    Raises :class:`CorpusError` naming the offending line on malformed JSON
    or invariant violations.
    """
    path = Path(path)
    bios = []
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"line {line_no}: malformed JSON ({e.msg})") from None
            bios.append(_record_to_biography(rec, line_no, strict))
    return bios


def write_corpus(corpus: Iterable[Biography], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for bio in corpus:
            fh.write(json.dumps(bio.to_record(), ensure_ascii=False) + "\n")


def filter_hits(hits: list[EvidenceDocument], cap: int = 20) -> list[EvidenceDocument]:
    """Drop Wikipedia-hosted hits, truncate to ``cap``, reindex positions."""
    if cap <= 0:
        raise ValueError(f"cap must be positive, got {cap}")
    kept = []
    for hit in hits:
        host = urlparse(hit.url).hostname or ""
        if host == "wikipedia.org" or host.endswith(".wikipedia.org"):
            continue
        kept.append(hit)
        if len(kept) == cap:
            break
    return [
        EvidenceDocument(doc_index=i, url=h.url, title=h.title, text=h.text)
        for i, h in enumerate(kept)
    ]


def _content_unigrams(text: str) -> set[str]:
    return {t for t in tokenize(text) if any(c.isalnum() for c in t)}


def unigram_overlap(biography_text: str, hits: Iterable[EvidenceDocument]) -> float:
    """Fraction of the biography's unique unigrams present in any hit.

    Denominator is the biography's unigram set; an empty biography yields 0.
    """
    bio_grams = _content_unigrams(biography_text)
    if not bio_grams:
        return 0.0
    hit_grams: set[str] = set()
    for h in hits:
        hit_grams |= _content_unigrams(h.text)
    return len(bio_grams & hit_grams) / len(bio_grams)


def corpus_stats(corpus: list[Biography], hit_cap: int = 20) -> DatasetStats:
    """Arithmetic means over the corpus; overlap/hits use filtered hit lists."""
    if not corpus:
        raise CorpusError("corpus_stats requires a non-empty corpus")
    n_sections = 0
    section_words = 0
    article_words = []
    hit_counts = []
    overlaps = []
    for bio in corpus:
        n_sections += len(bio.sections)
        words = [word_count(s.text) for s in bio.sections]
        section_words += sum(words)
        article_words.append(sum(words))
        filtered = filter_hits(bio.web_hits, cap=hit_cap)
        hit_counts.append(len(filtered))
        overlaps.append(unigram_overlap(bio.article_text(), filtered))
    n = len(corpus)
    return DatasetStats(
        avg_sections=n_sections / n,
        avg_section_len=section_words / n_sections,
        avg_article_len=sum(article_words) / n,
        avg_hits=sum(hit_counts) / n,
        avg_overlap=sum(overlaps) / n,
    )


# -- synthetic corpus ---------------------------------------------------------

FIRST_NAMES = (
    "Mira", "Lena", "Sofia", "Anneke", "Priya", "Yuki", "Salma", "Ingrid",
    "Noor", "Teresa", "Halima", "Vera", "Amara", "Edith", "Rosa", "Keiko",
)
LAST_NAMES = (
    "Ostrel", "Vandorn", "Quiroga", "Belmonte", "Harrow", "Senna", "Okafor",
    "Lindqvist", "Moreau", "Takada", "Abadi", "Kovach", "Duplesis", "Nerwin",
    "Calder", "Ferenc",
)
OCCUPATIONS = (
    "physicist", "sculptor", "botanist", "violinist", "historian",
    "aviator", "chemist", "novelist",
)
CITIES = (
    "Velmora", "Tarnwick", "Ostenfel", "Brayville", "Quellan", "Mirodale",
    "Northgate", "Sarelle", "Vintermoor", "Ashport", "Lowenstad", "Corvella",
    "Drellin", "Marrowfield",
)
SCHOOLS = (
    "Bravenholm Academy", "Weller Academy", "Corvin Academy", "Halloway Academy",
    "Setter Academy", "Ruskin Academy", "Tallis Academy", "Veymont Academy",
    "Ondine Academy", "Gracewell Academy",
)
EMPLOYERS = (
    "Meridian Institute", "Calloway Institute", "Verity Institute", "Aldren Institute",
    "Stellar Institute", "Harmon Institute", "Windrow Institute", "Bellweather Institute",
    "Fairlight Institute", "Thornfield Institute",
)
AWARDS = (
    "Ostrel Prize", "Balfour Prize", "Merrow Medal", "Carrington Medal",
    "Silverain Prize", "Duval Medal", "Lanford Prize", "Whitmore Medal",
    "Everhart Prize", "Rosano Medal",
)
YEARS = tuple(str(y) for y in range(1880, 1976, 4))

_FILLER_SENTENCES = (
    "The weather report mentioned rain across the region.",
    "Local markets opened late on the holiday.",
    "The harbor festival drew a modest crowd this spring.",
    "A new bridge over the river is planned for next year.",
    "Train schedules changed twice during the renovation.",
    "The town council debated the library budget again.",
)

EARLY_HEADING = "early life"
CAREER_HEADING = "career"


@dataclass
class SynthConfig:
    """Knobs for the synthetic generator.

    ``low_evidence`` mimics subjects with poor web coverage: the section-level
    evidence documents are dropped and the gold sections use a shifted phrasing
    so a model trained on the standard style has something to adapt to.
    """

    distractors: bool = True
    low_evidence: bool = False
    two_occupation_rate: float = 0.3
    n_filler_docs: int = 2
    include_wikipedia_hit: bool = True


@dataclass(frozen=True)
class _Facts:
    city: str
    year: str
    school: str
    employer: str
    award: str


def _occupation_phrase(occupations: list[str]) -> str:
    return " and ".join(occupations)


def _standard_sections(name: str, occ: str, f: _Facts) -> list[Section]:
    return [
        Section(TOPLEVEL, f"{name} is a {occ} from {f.city}."),
        Section(EARLY_HEADING, f"The {occ} {name} was born in {f.year} and studied at {f.school}."),
        Section(CAREER_HEADING, f"The {occ} {name} worked at {f.employer} and received the {f.award}."),
    ]


def _shifted_sections(name: str, occ: str, f: _Facts) -> list[Section]:
    return [
        Section(TOPLEVEL, f"{name}, a {occ}, comes from {f.city}."),
        Section(EARLY_HEADING, f"Born in {f.year}, the {occ} {name} studied at {f.school}."),
        Section(CAREER_HEADING, f"At {f.employer} the {occ} {name} earned the {f.award}."),
    ]


def _subject_docs(name: str, occ: str, f: _Facts) -> list[tuple[str, str]]:
    return [
        (
            f"About the {occ} {name}",
            f"Visitors often ask about the {occ} from {f.city}. {name} is a {occ} from {f.city}.",
        ),
        (
            f"{name} early years",
            f"Her early life is well documented. The {occ} {name} was born in {f.year} and studied at {f.school}.",
        ),
        (
            f"{name} career notes",
            f"Her career drew wide notice. The {occ} {name} worked at {f.employer} and received the {f.award}.",
        ),
    ]


def _homonym_docs(name: str, docc: str, df: _Facts) -> list[tuple[str, str]]:
    return [
        (
            f"The {docc} {name}",
            f"Admirers praise the {docc} from {df.city}. {name} is a {docc} from {df.city}.",
        ),
        (
            f"{name} early years",
            f"Her early life was different. The {docc} {name} was born in {df.year} and studied at {df.school}.",
        ),
        (
            f"{name} career notes",
            f"Her career took another path. The {docc} {name} worked at {df.employer} and received the {df.award}.",
        ),
        (
            f"{name} on tour",
            f"Crowds in {df.city} cheered the {docc}. The {docc} {name} toured widely last season.",
        ),
    ]


def _draw_facts(rng: random.Random, avoid: "_Facts | None" = None) -> _Facts:
    def pick(pool: tuple[str, ...], taken: str | None) -> str:
        choices = pool if taken is None else [v for v in pool if v != taken]
        return rng.choice(choices)

    return _Facts(
        city=pick(CITIES, avoid.city if avoid else None),
        year=pick(YEARS, avoid.year if avoid else None),
        school=pick(SCHOOLS, avoid.school if avoid else None),
        employer=pick(EMPLOYERS, avoid.employer if avoid else None),
        award=pick(AWARDS, avoid.award if avoid else None),
    )


def synth_generate(seed: int, n_bios: int, config: SynthConfig | None = None) -> list[Biography]:
    """Build ``n_bios`` templated biographies, deterministic in ``seed``.

    Every planted fact string occurs verbatim in exactly one non-Wikipedia
    evidence document and in its gold section. With distractors on, several
    hits concern a same-named person with a different occupation, so queries
    carrying the occupation can disambiguate where name-only queries cannot.
    """
    if n_bios <= 0:
        raise ValueError(f"n_bios must be positive, got {n_bios}")
    config = config or SynthConfig()
    rng = random.Random(seed)
    bios = []
    for i in range(n_bios):
        name = f"{rng.choice(FIRST_NAMES)} {rng.choice(LAST_NAMES)}"
        occupations = [rng.choice(OCCUPATIONS)]
        if rng.random() < config.two_occupation_rate:
            second = rng.choice([o for o in OCCUPATIONS if o != occupations[0]])
            occupations.append(second)
        occ = _occupation_phrase(occupations)
        facts = _draw_facts(rng)
        sections = (
            _shifted_sections(name, occ, facts)
            if config.low_evidence
            else _standard_sections(name, occ, facts)
        )

        docs = [(t, b, False) for t, b in _subject_docs(name, occ, facts)]
        if config.low_evidence:
            # Poor web coverage: only the general document survives.
            docs = docs[:1]
        if config.distractors:
            docc = rng.choice([o for o in OCCUPATIONS if o not in occupations])
            dfacts = _draw_facts(rng, avoid=facts)
            docs += [(t, b, False) for t, b in _homonym_docs(name, docc, dfacts)]
        for _ in range(config.n_filler_docs):
            body = " ".join(rng.sample(_FILLER_SENTENCES, 2))
            docs.append(("Regional notes", body, False))
        if config.include_wikipedia_hit:
            wiki_text = " ".join(s.text for s in sections)
            docs.append((name, wiki_text, True))
        rng.shuffle(docs)

        hits = []
        for j, (title, body, is_wiki) in enumerate(docs):
            if is_wiki:
                url = f"https://en.wikipedia.org/wiki/{name.replace(' ', '_')}"
            else:
                url = f"https://example.org/{i}/{j}"
            hits.append(EvidenceDocument(doc_index=j, url=url, title=title, text=body))

        bio = Biography(
            id=f"synth-{i:04d}",
            name=name,
            occupations=occupations,
            sections=sections,
            web_hits=hits,
        )
        bio.validate()
        bios.append(bio)
    return bios
