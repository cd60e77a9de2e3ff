"""Sentence/query encoder: shapes, determinism, pooling, query construction."""

import numpy as np
import pytest

from biodraft.encoder import EncoderConfig, SentenceEncoder, build_encoders
from biodraft.numerics import backward, tensor_sum
from biodraft.text import SEP


@pytest.fixture(scope="module")
def encoder(word_vocab):
    return SentenceEncoder(EncoderConfig(layers=1, model_dim=16, heads=2, ff_dim=32), word_vocab, seed=3)


def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        EncoderConfig(model_dim=30, heads=4)


@pytest.mark.parametrize("field", ["layers", "model_dim", "heads", "ff_dim", "max_positions"])
def test_config_rejects_nonpositive(field):
    with pytest.raises(ValueError):
        EncoderConfig(**{field: 0})


def test_same_tokens_give_identical_vectors(encoder):
    a = encoder.encode_sentence(["the", "cat", "sat"]).vector.data
    b = encoder.encode_sentence(["the", "cat", "sat"]).vector.data
    assert np.array_equal(a, b)


@pytest.mark.parametrize("n", [1, 5, 30])
def test_embedding_shape_and_finite(encoder, n):
    vec = encoder.encode_sentence(["cat"] * n).vector.data
    assert vec.shape == (16,)
    assert np.all(np.isfinite(vec))


def test_permuting_tokens_changes_embedding(encoder):
    a = encoder.encode_sentence(["the", "cat", "sat", "on", "a", "mat"]).vector.data
    b = encoder.encode_sentence(["mat", "a", "on", "sat", "cat", "the"]).vector.data
    assert np.linalg.norm(a - b) > 0


def test_empty_sentence_rejected(encoder):
    with pytest.raises(ValueError):
        encoder.encode_sentence([])


def test_overlong_input_truncates_with_warning(word_vocab):
    enc = SentenceEncoder(
        EncoderConfig(layers=1, model_dim=16, heads=2, ff_dim=32, max_positions=8),
        word_vocab,
        seed=3,
    )
    tokens = ["cat"] * 12
    with pytest.warns(UserWarning, match="truncated"):
        long = enc.encode_sentence(tokens).vector.data
    short = enc.encode_sentence(tokens[:8]).vector.data
    assert np.array_equal(long, short)


def test_batched_encoding_matches_single(encoder):
    sentences = [
        ["the", "cat", "sat"],
        ["alpha"],
        ["born", "in", "the", "mat", "early", "life", "career"],
    ]
    batched = [
        e.vector.data
        for e in encoder.encode_sentences([(s, (0, i)) for i, s in enumerate(sentences)])
    ]
    singles = [encoder.encode_sentence(s).vector.data for s in sentences]
    for b, s in zip(batched, singles):
        assert np.allclose(b, s, atol=1e-10)


def test_provenance_passthrough(encoder):
    emb = encoder.encode_sentence(["cat"], provenance=(4, 7))
    assert emb.provenance == (4, 7)
    assert encoder.encode_sentence(["cat"]).provenance == (-1, -1)
    out = encoder.encode_sentences([(["cat"], (1, 2)), (["mat"], (3, 0))])
    assert [e.provenance for e in out] == [(1, 2), (3, 0)]


def test_query_token_construction(encoder):
    direct = encoder.encode_query("Alpha Beta", ["cat"], "career").vector.data
    explicit = encoder.encode_query_tokens(
        ["alpha", "beta", SEP, "cat", SEP, "career"]
    ).vector.data
    assert np.array_equal(direct, explicit)


def test_query_occupations_in_given_order(encoder):
    ab = encoder.encode_query("alpha", ["cat", "mat"], "career").vector.data
    explicit = encoder.encode_query_tokens(
        ["alpha", SEP, "cat", "mat", SEP, "career"]
    ).vector.data
    ba = encoder.encode_query("alpha", ["mat", "cat"], "career").vector.data
    assert np.array_equal(ab, explicit)
    assert np.linalg.norm(ab - ba) > 0


def test_query_heading_changes_embedding(encoder):
    a = encoder.encode_query("alpha beta", ["cat"], "toplevel").vector.data
    b = encoder.encode_query("alpha beta", ["cat"], "career").vector.data
    assert np.linalg.norm(a - b) > 0


def test_query_empty_occupations_warns(encoder):
    with pytest.warns(UserWarning, match="occupations"):
        emb = encoder.encode_query("alpha", [], "career")
    assert np.all(np.isfinite(emb.vector.data))


def test_query_requires_name_and_heading(encoder):
    with pytest.raises(ValueError):
        encoder.encode_query("", ["cat"], "career")
    with pytest.raises(ValueError):
        encoder.encode_query("alpha", ["cat"], "")


def test_gradient_reaches_token_embeddings(word_vocab):
    enc = SentenceEncoder(EncoderConfig(layers=1, model_dim=16, heads=2, ff_dim=32), word_vocab, seed=5)
    loss = tensor_sum(enc.encode_sentence(["the", "cat"]).vector)
    backward(loss)
    grad = enc.tok_emb.weight.grad
    assert grad is not None
    assert np.linalg.norm(grad) > 0


def test_tied_encoders_share_parameters(word_vocab):
    cfg = EncoderConfig(layers=1, model_dim=16, heads=2, ff_dim=32)
    sent, query = build_encoders(cfg, word_vocab, seed=1)
    assert sent is query
    sent2, query2 = build_encoders(
        EncoderConfig(layers=1, model_dim=16, heads=2, ff_dim=32, tied_encoders=False),
        word_vocab,
        seed=1,
    )
    assert sent2 is not query2
    assert sent2.params().keys() == query2.params().keys()
    assert not np.array_equal(
        sent2.tok_emb.weight.data, query2.tok_emb.weight.data
    )
