"""Shared fixtures: small corpora, vocabularies, and desk-scale model
configurations used across the suite."""

from __future__ import annotations

import pytest

from biodraft.corpus import SynthConfig, synth_generate
from biodraft.encoder import EncoderConfig
from biodraft.generator import GeneratorConfig
from biodraft.retriever import RetrievalConfig
from biodraft.text import build_vocab
from biodraft.trainer import ExperimentConfig, TrainConfig, corpus_vocabulary


def desk_experiment(
    seed: int = 0,
    max_updates: int = 30,
    warmup: int = 5,
    lr: float = 3e-3,
    query_mode: str = "full",
    granularity: str = "section",
    top_k: int = 8,
    max_words: int = 100,
    temperature: float = 1.0,
    **train_kwargs,
) -> ExperimentConfig:
    """Small but real configuration; fast enough for per-test training."""
    return ExperimentConfig(
        encoder=EncoderConfig(layers=1, model_dim=32, heads=2, ff_dim=64),
        generator=GeneratorConfig(
            enc_layers=1, dec_layers=2, model_dim=32, heads=2, ff_dim=64,
            max_source=220, max_target=96, cache_size=32,
        ),
        retrieval=RetrievalConfig(
            top_k_sentences=top_k, max_words=max_words, temperature=temperature,
        ),
        train=TrainConfig(
            lr=lr, warmup_updates=warmup, max_updates=max_updates, seed=seed,
            **train_kwargs,
        ),
        query_mode=query_mode,
        granularity=granularity,
    )


@pytest.fixture(scope="session")
def small_corpus():
    return synth_generate(seed=11, n_bios=3, config=SynthConfig())


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return corpus_vocabulary(small_corpus, 2000)


@pytest.fixture(scope="session")
def word_vocab():
    """Generic vocabulary over plain words for component tests."""
    text = (
        "alpha beta gamma delta epsilon zeta eta theta iota kappa "
        "the cat sat on a mat early life career toplevel born in studied "
        "worked at and received prize . ,"
    )
    return build_vocab([text], max_size=200)
