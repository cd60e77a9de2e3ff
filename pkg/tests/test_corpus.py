"""Corpus data model, serialization, statistics, and the synthetic generator."""

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biodraft.corpus import (
    TOPLEVEL,
    Biography,
    CorpusError,
    EvidenceDocument,
    Section,
    SynthConfig,
    corpus_stats,
    filter_hits,
    load_corpus,
    synth_generate,
    unigram_overlap,
    write_corpus,
)


def _hit(i, url="https://example.org/x", text="some text"):
    return EvidenceDocument(doc_index=i, url=url, title=f"t{i}", text=text)


def _bio(sections=None, hits=None):
    sections = sections or [Section(TOPLEVEL, "Intro text here."), Section("career", "Body words.")]
    return Biography(
        id="b0",
        name="Ada Quinn",
        occupations=("chemist",),
        sections=tuple(sections),
        web_hits=tuple(hits or [_hit(0)]),
    )


def test_biography_requires_toplevel_first():
    with pytest.raises(ValueError):
        _bio(sections=[Section("career", "x"), Section(TOPLEVEL, "y")]).validate()


def test_biography_requires_occupations():
    bio = Biography(
        id="b", name="A B", occupations=(), sections=(Section(TOPLEVEL, "t"),), web_hits=()
    )
    with pytest.raises(ValueError):
        bio.validate()


def test_load_corpus_roundtrip(tmp_path):
    corpus = synth_generate(seed=3, n_bios=2, config=SynthConfig())
    path = tmp_path / "c.jsonl"
    write_corpus(corpus, path)
    loaded = load_corpus(path)
    assert loaded == corpus


def test_load_corpus_preserves_order(tmp_path):
    corpus = synth_generate(seed=3, n_bios=5, config=SynthConfig())
    path = tmp_path / "c.jsonl"
    write_corpus(corpus, path)
    assert [b.id for b in load_corpus(path)] == [b.id for b in corpus]


def test_load_corpus_rejects_empty_occupations(tmp_path):
    rec = {
        "id": "x", "name": "A B", "occupations": [],
        "sections": [{"heading": TOPLEVEL, "text": "t"}], "web_hits": [],
    }
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(rec) + "\n", encoding="utf-8")
    with pytest.raises(CorpusError):
        load_corpus(path)


def test_load_corpus_names_bad_line(tmp_path):
    corpus = synth_generate(seed=3, n_bios=2, config=SynthConfig())
    path = tmp_path / "c.jsonl"
    write_corpus(corpus, path)
    lines = path.read_text(encoding="utf-8").splitlines()
    lines.append('{"truncated": ')
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(CorpusError, match="line 3"):
        load_corpus(path)


def test_load_corpus_strict_rejects_unknown_fields(tmp_path):
    rec = {
        "id": "x", "name": "A B", "occupations": ["poet"],
        "sections": [{"heading": TOPLEVEL, "text": "t"}], "web_hits": [],
        "surprise": 1,
    }
    path = tmp_path / "c.jsonl"
    path.write_text(json.dumps(rec) + "\n", encoding="utf-8")
    with pytest.raises(CorpusError):
        load_corpus(path, strict=True)
    with pytest.warns(UserWarning):
        out = load_corpus(path, strict=False)
    assert out[0].name == "A B"


def test_filter_hits_removes_wikipedia_and_caps():
    hits = [_hit(i) for i in range(20)]
    hits.insert(3, _hit(99, url="https://en.wikipedia.org/wiki/X"))
    hits.insert(10, _hit(98, url="https://wikipedia.org/wiki/Y"))
    out = filter_hits(hits, cap=20)
    assert len(out) == 20
    assert all("wikipedia.org" not in h.url for h in out)
    assert [h.doc_index for h in out] == list(range(20))


def test_filter_hits_small_list_unchanged():
    hits = [_hit(i) for i in range(5)]
    assert filter_hits(hits, cap=20) == hits


def test_filter_hits_all_wikipedia_gives_empty():
    hits = [_hit(i, url="https://de.wikipedia.org/wiki/X") for i in range(3)]
    assert filter_hits(hits, cap=20) == []


def test_filter_hits_does_not_match_lookalike_hosts():
    hits = [_hit(0, url="https://notwikipedia.org/a"), _hit(1, url="https://wikipedia.org.evil.com/b")]
    out = filter_hits(hits, cap=20)
    assert len(out) == 2


def test_filter_hits_idempotent():
    hits = [_hit(i) for i in range(25)]
    hits[4] = _hit(4, url="https://en.wikipedia.org/wiki/Z")
    once = filter_hits(hits, cap=20)
    assert filter_hits(once, cap=20) == once


def test_unigram_overlap_examples():
    bio = "a b c d"
    assert unigram_overlap(bio, [_hit(0, text="a x"), _hit(1, text="c y")]) == 0.5
    assert unigram_overlap(bio, [_hit(0, text=bio)]) == 1.0
    assert unigram_overlap(bio, [_hit(0, text="x y z")]) == 0.0
    assert unigram_overlap("", [_hit(0)]) == 0.0


@given(st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_unigram_overlap_monotone_in_hits(seed):
    import random

    rng = random.Random(seed)
    words = ["a", "b", "c", "d", "e", "f"]
    bio = " ".join(rng.choices(words, k=6))
    base = [_hit(0, text=" ".join(rng.choices(words, k=4)))]
    more = base + [_hit(1, text=" ".join(rng.choices(words, k=4)))]
    assert unigram_overlap(bio, more) >= unigram_overlap(bio, base)


def test_corpus_stats_arithmetic():
    b1 = _bio(sections=[Section(TOPLEVEL, " ".join(["w"] * 10)), Section("career", " ".join(["w"] * 20))])
    stats = corpus_stats([b1])
    assert stats.avg_sections == 2.0
    assert stats.avg_section_len == 15.0
    assert stats.avg_article_len == 30.0

    b3 = _bio(sections=[Section(TOPLEVEL, "x")] + [Section(f"h{i}", "x") for i in range(2)])
    b5 = _bio(sections=[Section(TOPLEVEL, "x")] + [Section(f"h{i}", "x") for i in range(4)])
    assert corpus_stats([b3, b5]).avg_sections == 4.0


def test_corpus_stats_independent_recomputation():
    corpus = synth_generate(seed=5, n_bios=4, config=SynthConfig())
    stats = corpus_stats(corpus, hit_cap=20)
    n = len(corpus)
    exp_sections = sum(len(b.sections) for b in corpus) / n
    per_section = [len(s.text.split()) for b in corpus for s in b.sections]
    exp_section_len = sum(per_section) / len(per_section)
    exp_article_len = sum(
        sum(len(s.text.split()) for s in b.sections) for b in corpus
    ) / n
    exp_hits = sum(len(filter_hits(list(b.web_hits), 20)) for b in corpus) / n
    exp_overlap = sum(
        unigram_overlap(b.article_text(), filter_hits(list(b.web_hits), 20)) for b in corpus
    ) / n
    assert abs(stats.avg_sections - exp_sections) < 1e-9
    assert abs(stats.avg_section_len - exp_section_len) < 1e-9
    assert abs(stats.avg_article_len - exp_article_len) < 1e-9
    assert abs(stats.avg_hits - exp_hits) < 1e-9
    assert abs(stats.avg_overlap - exp_overlap) < 1e-9


def test_corpus_stats_rejects_empty():
    with pytest.raises(ValueError):
        corpus_stats([])


def test_synth_deterministic(tmp_path):
    a = synth_generate(seed=9, n_bios=4, config=SynthConfig())
    b = synth_generate(seed=9, n_bios=4, config=SynthConfig())
    assert a == b
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_corpus(a, p1)
    write_corpus(b, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_synth_different_seeds_differ():
    a = synth_generate(seed=1, n_bios=3, config=SynthConfig())
    b = synth_generate(seed=2, n_bios=3, config=SynthConfig())
    assert a != b


def test_synth_planted_facts_present():
    corpus = synth_generate(seed=7, n_bios=6, config=SynthConfig())
    for bio in corpus:
        non_wiki = filter_hits(list(bio.web_hits), 20)
        for sec in bio.sections:
            # the whole gold sentence is planted verbatim in exactly one
            # non-Wikipedia evidence document
            holders = [h for h in non_wiki if sec.text in h.text]
            assert len(holders) == 1, (bio.name, sec.heading)


def test_synth_section_structure():
    corpus = synth_generate(seed=7, n_bios=3, config=SynthConfig())
    for bio in corpus:
        assert [s.heading for s in bio.sections] == [TOPLEVEL, "early life", "career"]
        assert bio.occupations
        bio.validate()


def test_synth_distractor_share():
    corpus = synth_generate(seed=7, n_bios=8, config=SynthConfig())
    for bio in corpus:
        hits = filter_hits(list(bio.web_hits), 20)
        homonym = [
            h for h in hits
            if bio.name in h.text and not any(o in h.text for o in bio.occupations)
        ]
        assert len(homonym) / len(hits) >= 0.30


def test_synth_distractors_off():
    corpus = synth_generate(seed=7, n_bios=4, config=SynthConfig(distractors=False))
    for bio in corpus:
        for h in bio.web_hits:
            if bio.name in h.text:
                assert any(o in h.text for o in bio.occupations)


def test_synth_low_evidence_reduces_support():
    full = synth_generate(seed=7, n_bios=4, config=SynthConfig())
    low = synth_generate(seed=7, n_bios=4, config=SynthConfig(low_evidence=True))
    for fb, lb in zip(full, low):
        assert len(lb.web_hits) < len(fb.web_hits)
