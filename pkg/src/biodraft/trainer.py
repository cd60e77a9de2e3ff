"""End-to-end training: teacher forcing through retrieval soft weights and the
section cache, Adam with linear warmup + polynomial (linear) decay, CSV loss
logging, and a versioned binary checkpoint container.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Biography, filter_hits
from .encoder import EncoderConfig, build_encoders
from .generator import Generator, GeneratorConfig
from .numerics import AdamState, adam_update, backward, label_smoothed_nll, no_grad
from .pipeline import ArticleModel
from .retriever import MODES, EmptyEvidence, Query, RetrievalConfig, Retriever
from .text import END_ARTICLE, NEXT_HEADING, Vocabulary, build_vocab, tokenize

GRANULARITIES = ("section", "whole_article")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; message carries update index and lr."""


@dataclass(frozen=True)
class TrainConfig:
    """Paper-scale defaults except max_updates, whose desk default keeps runs
    laptop-sized (the documented full-scale value is 50000)."""

    lr: float = 3e-5
    schedule: str = "polynomial"
    warmup_updates: int = 500
    max_updates: int = 2000
    dropout: float = 0.1
    attention_dropout: float = 0.1
    label_smoothing: float = 0.1
    weight_decay: float = 0.01
    batch_size: int = 1
    seed: int = 0
    frozen_retrieval: bool = False

    def __post_init__(self):
        if self.schedule != "polynomial":
            raise ValueError("only the polynomial (linear) decay schedule is supported")
        if self.warmup_updates > self.max_updates:
            raise ValueError("warmup_updates must not exceed max_updates")
        if self.max_updates < 0 or self.warmup_updates < 0:
            raise ValueError("update counts must be nonnegative")
        for name in ("dropout", "attention_dropout", "label_smoothing"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {v}")
        if self.lr <= 0 or self.weight_decay < 0 or self.batch_size < 1:
            raise ValueError("invalid lr/weight_decay/batch_size")


@dataclass(frozen=True)
class ExperimentConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    query_mode: str = "full"
    granularity: str = "section"
    vocab_size: int = 2000

    def __post_init__(self):
        if self.query_mode not in MODES:
            raise ValueError(f"query_mode must be one of {MODES}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"granularity must be one of {GRANULARITIES}")
        if self.vocab_size <= 7:
            raise ValueError("vocab_size must exceed the reserved token count")


def lr_at(update: int, config: TrainConfig) -> float:
    """Learning rate for 1-based update ``update``: linear warmup to the peak
    at warmup_updates, then linear decay to 0 at max_updates."""
    if update < 1:
        raise ValueError("updates are 1-based")
    if config.warmup_updates > 0 and update <= config.warmup_updates:
        return config.lr * update / config.warmup_updates
    if config.max_updates == config.warmup_updates:
        return config.lr
    frac = (config.max_updates - update) / (config.max_updates - config.warmup_updates)
    return config.lr * max(0.0, frac)


@dataclass
class TrainExample:
    heading: str
    target: list[str]


def make_examples(bio: Biography) -> list[TrainExample]:
    """One example per section: query uses the section's gold heading; the
    target is its body, NEXT_HEADING, then the following gold heading
    (END_ARTICLE after the last section)."""
    out = []
    for i, sec in enumerate(bio.sections):
        nxt = (
            tokenize(bio.sections[i + 1].heading)
            if i + 1 < len(bio.sections)
            else [END_ARTICLE]
        )
        out.append(TrainExample(heading=sec.heading, target=tokenize(sec.text) + [NEXT_HEADING] + nxt))
    return out


def make_article_example(bio: Biography) -> TrainExample:
    """Whole-article variant: a single toplevel-query example whose target
    serializes every section."""
    target: list[str] = []
    for i, sec in enumerate(bio.sections):
        if i > 0:
            target += [NEXT_HEADING] + tokenize(sec.heading)
        target += tokenize(sec.text)
    target += [NEXT_HEADING, END_ARTICLE]
    return TrainExample(heading=bio.sections[0].heading, target=target)


def corpus_vocabulary(corpus: list[Biography], max_size: int) -> Vocabulary:
    texts = []
    for bio in corpus:
        texts.append(bio.name)
        texts.extend(bio.occupations)
        texts.append(bio.article_text())
        texts.extend(h.text for h in bio.web_hits)
    return build_vocab(texts, max_size=max_size)


def build_model(config: ExperimentConfig, vocab: Vocabulary) -> ArticleModel:
    """Fresh random initialization; sub-seeds derive from train.seed."""
    seed = config.train.seed
    senc, qenc = build_encoders(config.encoder, vocab, seed=seed * 16 + 1)
    gen = Generator(config.generator, vocab, seed=seed * 16 + 2)
    retriever = Retriever(senc, qenc, config.retrieval)
    return ArticleModel(vocab=vocab, retriever=retriever, generator=gen)


def model_params(model: ArticleModel):
    """Stable name -> Tensor mapping across all trainable components."""
    out = {}
    senc = model.retriever.sentence_encoder
    qenc = model.retriever.query_encoder
    for k, v in senc.params().items():
        out[f"encoder.{k}"] = v
    if qenc is not senc:
        for k, v in qenc.params().items():
            out[f"query_encoder.{k}"] = v
    for k, v in model.generator.params().items():
        out[f"generator.{k}"] = v
    return out


# -- checkpoint container ---------------------------------------------------

_MAGIC = b"BDCK"
_VERSION = 1
_DTYPE_F64 = 0


def config_to_dict(config: ExperimentConfig) -> dict:
    return dataclasses.asdict(config)


def config_from_dict(d: dict) -> ExperimentConfig:
    return ExperimentConfig(
        encoder=EncoderConfig(**d["encoder"]),
        generator=GeneratorConfig(**d["generator"]),
        retrieval=RetrievalConfig(**d["retrieval"]),
        train=TrainConfig(**d["train"]),
        query_mode=d["query_mode"],
        granularity=d["granularity"],
        vocab_size=d["vocab_size"],
    )


@dataclass
class Checkpoint:
    """Self-contained training state; see save/load for the binary layout."""

    config: dict
    vocab_tokens: tuple[str, ...]
    params: dict[str, np.ndarray]
    adam_first: dict[str, np.ndarray]
    adam_second: dict[str, np.ndarray]
    adam_step: int
    updates: int
    version: int = _VERSION
    loss_history: list[float] | None = None  # convenience only; not serialized

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.vocab_tokens)

    def experiment_config(self) -> ExperimentConfig:
        return config_from_dict(self.config)

    def build(self) -> ArticleModel:
        """Reconstruct the model with these exact parameter values."""
        config = self.experiment_config()
        model = build_model(config, self.vocabulary())
        tensors = model_params(model)
        if tensors.keys() != self.params.keys():
            missing = sorted(set(tensors) ^ set(self.params))
            raise ValueError(f"checkpoint/model parameter name mismatch: {missing[:5]}")
        for name, tensor in tensors.items():
            if tensor.data.shape != self.params[name].shape:
                raise ValueError(f"shape mismatch for {name}")
            tensor.data[...] = self.params[name]
        return model

    def save(self, path: str | Path) -> None:
        """Layout: magic, uint32 version, uint32 JSON length, JSON blob
        (config, vocab, counters), then one record per array: uint32 name
        length, name bytes, uint8 dtype tag, uint32 rank, uint32 dims,
        little-endian float64 payload."""
        blob = json.dumps(
            {
                "config": self.config,
                "vocab": list(self.vocab_tokens),
                "adam_step": self.adam_step,
                "updates": self.updates,
            },
            ensure_ascii=False,
        ).encode("utf-8")
        records: list[tuple[str, np.ndarray]] = []
        records += [(f"param.{k}", v) for k, v in sorted(self.params.items())]
        records += [(f"adam.first.{k}", v) for k, v in sorted(self.adam_first.items())]
        records += [(f"adam.second.{k}", v) for k, v in sorted(self.adam_second.items())]
        with Path(path).open("wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", self.version))
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for name, arr in records:
                nb = name.encode("utf-8")
                fh.write(struct.pack("<I", len(nb)))
                fh.write(nb)
                fh.write(struct.pack("<B", _DTYPE_F64))
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if raw[:4] != _MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {raw[:4]!r}")
        version = struct.unpack_from("<I", raw, 4)[0]
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        blob_len = struct.unpack_from("<I", raw, 8)[0]
        off = 12
        meta = json.loads(raw[off:off + blob_len].decode("utf-8"))
        off += blob_len
        arrays: dict[str, np.ndarray] = {}
        while off < len(raw):
            (name_len,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + name_len].decode("utf-8")
            off += name_len
            (tag,) = struct.unpack_from("<B", raw, off)
            off += 1
            if tag != _DTYPE_F64:
                raise ValueError(f"unknown dtype tag {tag} in record {name!r}")
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(dims)
            off += 8 * count
            arrays[name] = arr.astype(np.float64)
        def bucket(prefix):
            plen = len(prefix)
            return {k[plen:]: v for k, v in arrays.items() if k.startswith(prefix)}
        return cls(
            config=meta["config"],
            vocab_tokens=tuple(meta["vocab"]),
            params=bucket("param."),
            adam_first=bucket("adam.first."),
            adam_second=bucket("adam.second."),
            adam_step=meta["adam_step"],
            updates=meta["updates"],
            version=version,
        )


def _snapshot(model: ArticleModel, config: ExperimentConfig, adam: AdamState,
              names: list[str], updates: int, losses: list[float]) -> Checkpoint:
    tensors = model_params(model)
    return Checkpoint(
        config=config_to_dict(config),
        vocab_tokens=model.vocab.tokens,
        params={k: v.data.copy() for k, v in tensors.items()},
        adam_first={k: m.copy() for k, m in zip(names, adam.first_moment)},
        adam_second={k: m.copy() for k, m in zip(names, adam.second_moment)},
        adam_step=adam.step,
        updates=updates,
        loss_history=losses,
    )


def _bio_loss(model: ArticleModel, bio: Biography, config: ExperimentConfig):
    """Differentiable per-biography loss: mean over its examples of the
    token-mean label-smoothed NLL, with the cache threaded across sections."""
    gen = model.generator
    vocab = model.vocab
    docs = filter_hits(bio.web_hits)
    frozen = config.train.frozen_retrieval
    if config.granularity == "whole_article":
        examples = [make_article_example(bio)]
    else:
        examples = make_examples(bio)

    def retrieve(query, candidates):
        try:
            return model.retriever.select(query, docs, candidates=candidates)
        except EmptyEvidence:
            return None

    candidates = None
    if docs and config.retrieval.strategy != "baseline_truncate":
        if frozen:
            with no_grad():
                candidates = model.retriever.encode_candidates(docs)
        else:
            candidates = model.retriever.encode_candidates(docs)
    total = None
    cache = gen.empty_cache() if config.granularity == "section" else None
    for ex in examples:
        query = Query(bio.name, tuple(bio.occupations), ex.heading, config.query_mode)
        if frozen:
            with no_grad():
                evidence = retrieve(query, candidates)
        else:
            evidence = retrieve(query, candidates)
        logits, states = gen.forward_with_states(query.tokens(), evidence, ex.target, cache)
        target_ids = np.array(
            [vocab.token_to_id(t) for t in ex.target] + [vocab.eos_id]
        )
        loss = label_smoothed_nll(logits, target_ids, config.train.label_smoothing)
        total = loss if total is None else total + loss
        if cache is not None:
            cache = gen.update_cache(states)
    return total / len(examples)


def train(
    corpus: list[Biography],
    config: ExperimentConfig,
    vocab: Vocabulary | None = None,
    init_from: Checkpoint | None = None,
    log_path: str | Path | None = None,
) -> Checkpoint:
    """Run max_updates optimizer steps (one batch of biographies each) and
    return the final state. Deterministic given config.train.seed.
    """
    if not corpus:
        raise ValueError("cannot train on an empty corpus")
    tc = config.train
    if vocab is None:
        vocab = (
            init_from.vocabulary() if init_from is not None
            else corpus_vocabulary(corpus, config.vocab_size)
        )
    if init_from is not None and tuple(init_from.vocab_tokens) != vocab.tokens:
        raise ValueError("checkpoint vocabulary does not match the requested vocabulary")
    model = build_model(config, vocab)
    if init_from is not None:
        tensors = model_params(model)
        if tensors.keys() != init_from.params.keys():
            raise ValueError("checkpoint parameters incompatible with this configuration")
        for name, tensor in tensors.items():
            tensor.data[...] = init_from.params[name]

    tensors = model_params(model)
    names = list(tensors)
    params = [tensors[n] for n in names]
    adam = AdamState.for_params(params)
    order_rng = np.random.default_rng(tc.seed * 7919 + 11)
    drop_rng = np.random.default_rng(tc.seed * 7919 + 12)
    model.retriever.sentence_encoder.set_regularization(tc.dropout, tc.attention_dropout, drop_rng)
    if model.retriever.query_encoder is not model.retriever.sentence_encoder:
        model.retriever.query_encoder.set_regularization(tc.dropout, tc.attention_dropout, drop_rng)
    model.generator.set_regularization(tc.dropout, tc.attention_dropout, drop_rng)

    def set_training(mode: bool):
        model.retriever.sentence_encoder.train(mode)
        model.retriever.query_encoder.train(mode)
        model.generator.train(mode)

    losses: list[float] = []
    log_rows: list[str] = []
    set_training(True)
    try:
        epoch_order: list[int] = []
        for update in range(1, tc.max_updates + 1):
            batch = []
            for _ in range(tc.batch_size):
                if not epoch_order:
                    epoch_order = list(order_rng.permutation(len(corpus)))
                batch.append(corpus[epoch_order.pop(0)])
            loss = None
            for bio in batch:
                part = _bio_loss(model, bio, config)
                loss = part if loss is None else loss + part
            loss = loss / len(batch)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at update {update} (lr {lr_at(update, tc):.3e})"
                )
            for p in params:
                p.zero_grad()
            backward(loss)
            grads = [
                p.grad if p.grad is not None else np.zeros_like(p.data) for p in params
            ]
            adam_update(
                params, grads, adam, lr=lr_at(update, tc), weight_decay=tc.weight_decay
            )
            losses.append(value)
            log_rows.append(f"{update},{lr_at(update, tc):.8e},{value:.8f}")
    finally:
        set_training(False)
        if log_path is not None:
            Path(log_path).write_text(
                "update,lr,loss\n" + "".join(r + "\n" for r in log_rows), encoding="utf-8"
            )
    return _snapshot(model, config, adam, names, updates=tc.max_updates, losses=losses)


def finetune(
    checkpoint: Checkpoint,
    corpus: list[Biography],
    config: ExperimentConfig,
    vocab: Vocabulary | None = None,
    log_path: str | Path | None = None,
) -> Checkpoint:
    """Continue from checkpoint parameters with a fresh optimizer and
    schedule."""
    ckpt_vocab = checkpoint.vocabulary()
    if vocab is not None and vocab.tokens != ckpt_vocab.tokens:
        raise ValueError("finetune vocabulary must match the checkpoint vocabulary")
    return train(corpus, config, vocab=ckpt_vocab, init_from=checkpoint, log_path=log_path)
