"""Automatic evaluation: ROUGE-L, bidirectional sentence equivalence, named
entity coverage, retrieval concentration, and the ablation report over query
modes and generation granularities.

All metrics are pure functions of their inputs. The headline ROUGE-L value is
article level (full concatenated text); per-section values are emitted
alongside for sections whose headings match a reference section.
"""

from __future__ import annotations

import csv
import io
import json
import re
import warnings
from collections import Counter
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

from .corpus import Biography, filter_hits
from .pipeline import (
    ArticleModel,
    PipelineConfig,
    write_article,
    write_article_whole,
)
from .retriever import MODES, RetrievedEvidence
from .text import sentence_split, tokenize
from .trainer import GRANULARITIES

METRIC_FAMILIES = ("rouge", "equivalence", "coverage", "concentration")

_CASED_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)
_EDGE_PUNCT_RE = re.compile(r"^\W+|\W+$", re.UNICODE)

# Articles, conjunctions, prepositions, and pronouns; verbs count as content.
_STOPWORDS = frozenset(
    "a an the and or but if than then as at by for from in into of on onto "
    "to with without over under she he it they them we i you her his its "
    "their this that these those here there".split()
)


class RougeScore(NamedTuple):
    precision: float
    recall: float
    f1: float


class Coverage(NamedTuple):
    value: float
    vacuous: bool


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            if x == y:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(generated: str, reference: str) -> RougeScore:
    """Token-level longest-common-subsequence precision, recall, and F1.

    Both sides empty scores (1, 1, 1); exactly one side empty scores
    (0, 0, 0).
    """
    gen = tokenize(generated)
    ref = tokenize(reference)
    if not gen and not ref:
        return RougeScore(1.0, 1.0, 1.0)
    if not gen or not ref:
        return RougeScore(0.0, 0.0, 0.0)
    lcs = _lcs_length(gen, ref)
    if lcs == 0:
        return RougeScore(0.0, 0.0, 0.0)
    p = lcs / len(gen)
    r = lcs / len(ref)
    return RougeScore(p, r, 2.0 * p * r / (p + r))


def default_extractor(text: str) -> set[str]:
    """Capitalization-based entity stand-in.

    Entities are maximal runs of capitalized words: runs of length >= 1
    anywhere except sentence start, runs of length >= 2 at sentence start
    (a lone capitalized first word is ordinary orthography). Words are
    stripped of edge punctuation and lowercased; trailing punctuation ends
    a run.
    """
    entities: set[str] = set()
    for sentence in sentence_split(text):
        words = sentence.split()
        run: list[str] = []
        run_start = -1

        def flush() -> None:
            nonlocal run, run_start
            if run and (run_start > 0 or len(run) >= 2):
                entities.add(" ".join(run))
            run = []
            run_start = -1

        for i, word in enumerate(words):
            core = _EDGE_PUNCT_RE.sub("", word)
            if core and core[0].isupper():
                if not run:
                    run_start = i
                run.append(core.lower())
                if re.search(r"\W$", word):
                    flush()
            else:
                flush()
        flush()
    return entities


def default_scorer(sentence_a: str, sentence_b: str) -> bool:
    """Equivalence stand-in: stopword-filtered token-set F1 >= 0.8.

    Symmetric by construction. Two sentences with no content tokens at all
    are trivially equivalent; one empty side is not.
    """
    ca = {t for t in tokenize(sentence_a) if t not in _STOPWORDS and any(c.isalnum() for c in t)}
    cb = {t for t in tokenize(sentence_b) if t not in _STOPWORDS and any(c.isalnum() for c in t)}
    if not ca and not cb:
        return True
    if not ca or not cb:
        return False
    inter = len(ca & cb)
    if inter == 0:
        return False
    p = inter / len(ca)
    r = inter / len(cb)
    return 2.0 * p * r / (p + r) >= 0.8 - 1e-9


def equivalence_rate(
    generated: str,
    reference: str,
    scorer: Callable[[str, str], bool] = default_scorer,
) -> float:
    """Fraction of generated sentences with at least one equivalent
    reference sentence, the predicate applied in both directions and
    AND-ed."""
    gen_sentences = sentence_split(generated)
    ref_sentences = sentence_split(reference)
    if not gen_sentences:
        warnings.warn("no generated sentences; equivalence rate is 0")
        return 0.0
    hits = sum(
        1
        for g in gen_sentences
        if any(scorer(g, r) and scorer(r, g) for r in ref_sentences)
    )
    return hits / len(gen_sentences)


def entity_coverage(
    generated: str,
    reference: str,
    extractor: Callable[[str], set[str]] = default_extractor,
) -> Coverage:
    """Share of reference entities also detected in the generated text.

    A reference with no detected entities scores 1.0 with the vacuous flag
    set, keeping corpus means defined.
    """
    ref_entities = extractor(reference)
    if not ref_entities:
        return Coverage(1.0, True)
    gen_entities = extractor(generated)
    return Coverage(len(ref_entities & gen_entities) / len(ref_entities), False)


def recase(text: str, cased_sources: Iterable[str]) -> str:
    """Rebuild casing for caseless model output from corpus surface forms.

    Each whitespace token takes its most frequent cased form in the sources
    (ties prefer the lowercase form), and the first word of the text and of
    every sentence is capitalized. Casing-sensitive metrics (entity
    extraction, sentence splitting) then work on generated text.
    """
    forms: Counter[tuple[str, str]] = Counter()
    for source in cased_sources:
        for tok in _CASED_TOKEN_RE.findall(source):
            forms[(tok.lower(), tok)] += 1
    best: dict[str, str] = {}
    score: dict[str, tuple[int, int]] = {}
    for (low, cased), n in sorted(forms.items()):
        key = (n, 1 if cased == low else 0)
        if low not in best or key > score[low]:
            best[low] = cased
            score[low] = key
    out: list[str] = []
    sentence_start = True
    for chunk in text.split():
        mapped = best.get(chunk, chunk)
        if sentence_start and mapped and mapped[0].isalpha():
            mapped = mapped[0].upper() + mapped[1:]
            sentence_start = False
        if chunk in (".", "!", "?") or chunk[-1:] in (".", "!", "?"):
            sentence_start = True
        out.append(mapped)
    return " ".join(out)


@dataclass(frozen=True)
class SectionConcentration:
    histogram: dict[int, int]
    max_fraction: float


@dataclass(frozen=True)
class ConcentrationStats:
    sections: list[SectionConcentration]
    mean_max_fraction: float


def retrieval_concentration(
    evidence_list: Sequence[RetrievedEvidence],
) -> ConcentrationStats:
    """Per-section histogram of retrieved sentences per document plus the
    share captured by the most-used document; article value is the mean of
    the per-section max fractions."""
    if not evidence_list:
        raise ValueError("retrieval_concentration needs at least one evidence record")
    sections: list[SectionConcentration] = []
    for evidence in evidence_list:
        if not evidence.items:
            raise ValueError("evidence record with no retrieved sentences")
        hist = Counter(item.doc_index for item in evidence.items)
        max_fraction = max(hist.values()) / len(evidence.items)
        sections.append(SectionConcentration(dict(hist), max_fraction))
    mean = sum(s.max_fraction for s in sections) / len(sections)
    return ConcentrationStats(sections, mean)


@dataclass(frozen=True)
class ArticleEval:
    name: str
    rouge: RougeScore
    section_rouge: tuple[tuple[str, float], ...]
    equivalence: float
    coverage: float
    coverage_vacuous: bool
    concentration: float | None


def score_article(
    generated: str,
    reference: str,
    name: str = "",
    cased_sources: Sequence[str] = (),
    evidence_records: Sequence[RetrievedEvidence] = (),
    section_pairs: Sequence[tuple[str, str, str]] = (),
) -> ArticleEval:
    """Score one generated article against its reference.

    cased_sources supplies extra surface forms for recasing (the reference
    is always included); section_pairs is (heading, generated, reference)
    for per-section ROUGE.
    """
    recased = recase(generated, [reference, *cased_sources])
    concentration = None
    if evidence_records:
        concentration = retrieval_concentration(evidence_records).mean_max_fraction
    coverage = entity_coverage(recased, reference)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        equivalence = equivalence_rate(recased, reference)
    return ArticleEval(
        name=name,
        rouge=rouge_l(generated, reference),
        section_rouge=tuple(
            (heading, rouge_l(g, r).f1) for heading, g, r in section_pairs
        ),
        equivalence=equivalence,
        coverage=coverage.value,
        coverage_vacuous=coverage.vacuous,
        concentration=concentration,
    )


_FAMILY_COLUMNS = {
    "rouge": ("rouge_p", "rouge_r", "rouge_f1"),
    "equivalence": ("equivalence",),
    "coverage": ("coverage",),
    "concentration": ("concentration",),
}


@dataclass(frozen=True)
class EvalReport:
    """Per-article scores plus corpus means for one (mode, granularity)
    evaluation cell."""

    query_mode: str
    granularity: str
    strategy: str
    metrics: tuple[str, ...]
    articles: tuple[ArticleEval, ...]
    mean_rouge: RougeScore
    mean_equivalence: float
    mean_coverage: float
    mean_concentration: float | None

    def _row(self, a: ArticleEval) -> dict:
        values = {
            "rouge_p": a.rouge.precision,
            "rouge_r": a.rouge.recall,
            "rouge_f1": a.rouge.f1,
            "equivalence": a.equivalence,
            "coverage": a.coverage,
            "concentration": a.concentration,
        }
        row: dict = {"name": a.name}
        for family in self.metrics:
            for col in _FAMILY_COLUMNS[family]:
                row[col] = values[col]
        if "coverage" in self.metrics:
            row["coverage_vacuous"] = a.coverage_vacuous
        if "rouge" in self.metrics:
            row["section_rouge"] = [list(p) for p in a.section_rouge]
        return row

    def _mean_row(self) -> dict:
        values = {
            "rouge_p": self.mean_rouge.precision,
            "rouge_r": self.mean_rouge.recall,
            "rouge_f1": self.mean_rouge.f1,
            "equivalence": self.mean_equivalence,
            "coverage": self.mean_coverage,
            "concentration": self.mean_concentration,
        }
        row: dict = {"name": "<mean>"}
        for family in self.metrics:
            for col in _FAMILY_COLUMNS[family]:
                row[col] = values[col]
        return row

    def to_dict(self) -> dict:
        return {
            "query_mode": self.query_mode,
            "granularity": self.granularity,
            "strategy": self.strategy,
            "metrics": list(self.metrics),
            "mean": {k: v for k, v in self._mean_row().items() if k != "name"},
            "articles": [self._row(a) for a in self.articles],
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def _columns(self) -> list[str]:
        cols = ["name"]
        for family in self.metrics:
            cols.extend(_FAMILY_COLUMNS[family])
        return cols

    def to_table(self) -> str:
        """Aligned plain-text table: one row per article plus a mean row."""
        cols = self._columns()
        rows = [self._row(a) for a in self.articles] + [self._mean_row()]
        cells = [cols]
        for row in rows:
            rendered = []
            for c in cols:
                v = row.get(c)
                if v is None:
                    rendered.append("-")
                elif isinstance(v, float):
                    rendered.append(f"{v:.4f}")
                else:
                    rendered.append(str(v))
            cells.append(rendered)
        widths = [max(len(r[i]) for r in cells) for i in range(len(cols))]
        header = (
            f"query_mode={self.query_mode} granularity={self.granularity} "
            f"strategy={self.strategy} articles={len(self.articles)}"
        )
        lines = [header]
        for r in cells:
            lines.append("  ".join(val.ljust(w) for val, w in zip(r, widths)).rstrip())
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        cols = self._columns()
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for row in [self._row(a) for a in self.articles] + [self._mean_row()]:
            writer.writerow(["" if row.get(c) is None else row.get(c) for c in cols])
        return buf.getvalue()


def _validated_metrics(metrics: Sequence[str]) -> tuple[str, ...]:
    out = tuple(metrics)
    for m in out:
        if m not in METRIC_FAMILIES:
            raise ValueError(f"unknown metric family {m!r}; choose from {METRIC_FAMILIES}")
    if not out:
        raise ValueError("at least one metric family is required")
    return out


def evaluate_model(
    model: ArticleModel,
    corpus: Sequence[Biography],
    config: PipelineConfig,
    granularity: str = "section",
    hit_cap: int = 20,
    metrics: Sequence[str] = METRIC_FAMILIES,
) -> EvalReport:
    """Generate an article per biography and score it against the gold text.

    Section granularity runs the section loop with heading chaining; whole
    article granularity decodes everything from one toplevel query against
    the concatenated gold sections.
    """
    if granularity not in GRANULARITIES:
        raise ValueError(f"granularity must be one of {GRANULARITIES}, got {granularity!r}")
    metrics = _validated_metrics(metrics)
    evals: list[ArticleEval] = []
    for bio in corpus:
        hits = filter_hits(bio.web_hits, hit_cap)
        evidence_records: list[RetrievedEvidence] = []
        section_pairs: list[tuple[str, str, str]] = []
        if granularity == "section":
            draft = write_article(
                bio.name, list(bio.occupations), hits, model, config,
                trace=lambda t: evidence_records.append(t.evidence),
            )
            parts = [draft.sections[0].text]
            for sec in draft.sections[1:]:
                parts.append(sec.heading)
                parts.append(sec.text)
            generated = " ".join(p for p in parts if p)
            gold = {sec.heading: sec.text for sec in bio.sections}
            for sec in draft.sections:
                if sec.heading in gold:
                    section_pairs.append((sec.heading, sec.text, gold[sec.heading]))
        else:
            draft = write_article_whole(
                bio.name, list(bio.occupations), hits, model, config,
                trace=lambda q, ev: evidence_records.append(ev),
            )
            generated = draft.sections[0].text
        evidence_records = [ev for ev in evidence_records if ev is not None and ev.items]
        evals.append(score_article(
            generated,
            bio.article_text(),
            name=bio.name,
            cased_sources=[h.text for h in hits],
            evidence_records=evidence_records,
            section_pairs=section_pairs,
        ))
    n = len(evals)
    if n == 0:
        raise ValueError("cannot evaluate an empty corpus")
    mean_rouge = RougeScore(
        sum(e.rouge.precision for e in evals) / n,
        sum(e.rouge.recall for e in evals) / n,
        sum(e.rouge.f1 for e in evals) / n,
    )
    with_conc = [e.concentration for e in evals if e.concentration is not None]
    return EvalReport(
        query_mode=config.query_mode,
        granularity=granularity,
        strategy=model.retriever.config.strategy,
        metrics=metrics,
        articles=tuple(evals),
        mean_rouge=mean_rouge,
        mean_equivalence=sum(e.equivalence for e in evals) / n,
        mean_coverage=sum(e.coverage for e in evals) / n,
        mean_concentration=(sum(with_conc) / len(with_conc)) if with_conc else None,
    )


def ablation_report(
    corpus: Sequence[Biography],
    variants: Mapping[tuple[str, str], ArticleModel],
    modes: Sequence[str] = MODES,
    granularities: Sequence[str] = GRANULARITIES,
    config: PipelineConfig | None = None,
    hit_cap: int = 20,
    metrics: Sequence[str] = METRIC_FAMILIES,
) -> list[EvalReport]:
    """Evaluate every requested (query mode x granularity) cell.

    variants maps each cell to its trained model; a missing cell raises with
    the absent variants listed.
    """
    for m in modes:
        if m not in MODES:
            raise ValueError(f"unknown query mode {m!r}; choose from {MODES}")
    for g in granularities:
        if g not in GRANULARITIES:
            raise ValueError(f"unknown granularity {g!r}; choose from {GRANULARITIES}")
    base = config if config is not None else PipelineConfig()
    requested = [(m, g) for m in modes for g in granularities]
    missing = [cell for cell in requested if cell not in variants]
    if missing:
        listed = ", ".join(f"{m}/{g}" for m, g in missing)
        raise ValueError(f"missing model variant(s): {listed}")
    reports = []
    for mode, granularity in requested:
        cell_config = replace(base, query_mode=mode)
        reports.append(evaluate_model(
            variants[(mode, granularity)], corpus, cell_config,
            granularity=granularity, hit_cap=hit_cap, metrics=metrics,
        ))
    return reports


def ablation_table(reports: Sequence[EvalReport]) -> str:
    """One aligned summary row per report (corpus means only)."""
    cols = [
        "query_mode", "granularity", "strategy",
        "rouge_p", "rouge_r", "rouge_f1", "equivalence", "coverage", "concentration",
    ]
    cells = [cols]
    for rep in reports:
        conc = "-" if rep.mean_concentration is None else f"{rep.mean_concentration:.4f}"
        cells.append([
            rep.query_mode, rep.granularity, rep.strategy,
            f"{rep.mean_rouge.precision:.4f}", f"{rep.mean_rouge.recall:.4f}",
            f"{rep.mean_rouge.f1:.4f}", f"{rep.mean_equivalence:.4f}",
            f"{rep.mean_coverage:.4f}", conc,
        ])
    widths = [max(len(r[i]) for r in cells) for i in range(len(cols))]
    lines = [
        "  ".join(val.ljust(w) for val, w in zip(r, widths)).rstrip() for r in cells
    ]
    return "\n".join(lines) + "\n"
