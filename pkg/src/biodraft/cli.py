"""Command-line entry point: corpus synthesis, training, finetuning,
generation, evaluation, ablation, and corpus statistics.

Every artifact-producing run writes a JSON manifest next to its main output
(sha256 hashes of inputs and outputs, the fully resolved configuration, seed,
and wall-clock duration), so a run can be reproduced from the manifest alone.
Config precedence is CLI flag > config file > built-in default; the config
file is a flat JSON object whose keys use dotted paths into the experiment
config ("train.lr", "encoder.layers", "query_mode").

Exit codes: 0 success, 1 internal error, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .corpus import (
    SynthConfig,
    corpus_stats,
    filter_hits,
    load_corpus,
    synth_generate,
    write_corpus,
)
from .generator import DecodeConstraints
from .metrics import (
    METRIC_FAMILIES,
    EvalReport,
    ablation_table,
    evaluate_model,
)
from .pipeline import PipelineConfig, render_article, write_article, write_drafts
from .retriever import MODES, STRATEGIES
from .trainer import (
    GRANULARITIES,
    Checkpoint,
    ExperimentConfig,
    config_from_dict,
    config_to_dict,
    corpus_vocabulary,
    finetune,
    train,
)

ARTICLE_SEPARATOR = "===="


class CliError(Exception):
    """Usage or input problem; maps to exit code 2."""


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _file_entry(path: str | Path) -> dict:
    p = Path(path)
    return {"path": str(p), "sha256": _sha256(p)}


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {path}")
    return p


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    seed: int | None = None
    config: dict | None = None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    duration_seconds: float = 0.0

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")


def _manifest_path(out: str) -> str:
    return out + ".manifest.json"


# -- config resolution --------------------------------------------------------


def _set_flat(tree: dict, key: str, value) -> None:
    parts = key.split(".")
    node = tree
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise CliError(f"unknown config key: {key}")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise CliError(f"unknown config key: {key}")
    if isinstance(node[leaf], dict):
        raise CliError(f"config key {key} names a section, not a value")
    node[leaf] = value


def _resolve_config(
    config_path: str | None,
    overrides: dict[str, object],
    defaults: dict | None = None,
) -> ExperimentConfig:
    """flag > file > default; returns the validated experiment config."""
    tree = copy.deepcopy(defaults if defaults is not None else config_to_dict(ExperimentConfig()))
    if config_path is not None:
        p = _require_file(config_path, "config file")
        try:
            file_cfg = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise CliError(f"config file is not valid JSON: {e}") from e
        if not isinstance(file_cfg, dict):
            raise CliError("config file must be a JSON object of dotted keys")
        for k, v in file_cfg.items():
            _set_flat(tree, k, v)
    for k, v in overrides.items():
        if v is not None:
            _set_flat(tree, k, v)
    try:
        return config_from_dict(tree)
    except (ValueError, TypeError) as e:
        raise CliError(f"invalid configuration: {e}") from e


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config file (dotted keys)")
    p.add_argument("--seed", type=int, help="training seed (train.seed)")
    p.add_argument("--lr", type=float, help="peak learning rate")
    p.add_argument("--max-updates", type=int)
    p.add_argument("--warmup-updates", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--query-mode", choices=MODES)
    p.add_argument("--granularity", choices=GRANULARITIES)
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--frozen-retrieval", type=_on_off, metavar="{on,off}")
    p.add_argument("--top-k", type=int, help="retrieval sentence budget")
    p.add_argument("--max-words", type=int, help="retrieval word budget")
    p.add_argument("--temperature", type=float, help="retrieval softmax temperature")
    p.add_argument("--model-dim", type=int, help="encoder and generator width")
    p.add_argument("--heads", type=int, help="encoder and generator attention heads")
    p.add_argument("--ff-dim", type=int, help="encoder and generator feed-forward width")


def _train_overrides(args: argparse.Namespace) -> dict[str, object]:
    out: dict[str, object] = {
        "train.seed": args.seed,
        "train.lr": args.lr,
        "train.max_updates": args.max_updates,
        "train.warmup_updates": args.warmup_updates,
        "train.batch_size": args.batch_size,
        "vocab_size": args.vocab_size,
        "query_mode": args.query_mode,
        "granularity": args.granularity,
        "retrieval.strategy": args.strategy,
        "train.frozen_retrieval": args.frozen_retrieval,
        "retrieval.top_k_sentences": args.top_k,
        "retrieval.max_words": args.max_words,
        "retrieval.temperature": args.temperature,
        "encoder.model_dim": args.model_dim,
        "generator.model_dim": args.model_dim,
        "encoder.heads": args.heads,
        "generator.heads": args.heads,
        "encoder.ff_dim": args.ff_dim,
        "generator.ff_dim": args.ff_dim,
    }
    return out


def _add_decode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--beam", type=int, default=5, help="beam size (1 = greedy)")
    p.add_argument("--min-len", type=int, default=None)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--length-penalty", type=float, default=0.0)
    p.add_argument("--max-sections", type=int, default=10)


def _pipeline_config(args: argparse.Namespace, query_mode: str) -> PipelineConfig:
    try:
        constraints = DecodeConstraints(
            beam_size=args.beam,
            min_len=args.min_len,
            max_len=args.max_len,
            length_penalty=args.length_penalty,
        )
        return PipelineConfig(
            max_sections=args.max_sections,
            constraints=constraints,
            query_mode=query_mode,
        )
    except ValueError as e:
        raise CliError(f"invalid decode settings: {e}") from e


def _load_corpus(path: str) -> list:
    p = _require_file(path, "corpus")
    try:
        corpus = load_corpus(p)
    except Exception as e:
        raise CliError(f"failed to load corpus {path}: {e}") from e
    return corpus


def _load_checkpoint(path: str):
    p = _require_file(path, "checkpoint")
    try:
        return Checkpoint.load(p)
    except Exception as e:
        raise CliError(f"failed to load checkpoint {path}: {e}") from e


# -- commands -----------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    started = time.monotonic()
    config = SynthConfig(
        distractors=args.distractors,
        low_evidence=args.low_evidence,
    )
    corpus = synth_generate(seed=args.seed, n_bios=args.n, config=config)
    write_corpus(corpus, args.out)
    manifest = RunManifest(
        command="synth",
        argv=list(sys.argv[1:]),
        seed=args.seed,
        config={"n": args.n, **asdict(config)},
        outputs={"corpus": _file_entry(args.out)},
        duration_seconds=time.monotonic() - started,
    )
    manifest.write(_manifest_path(args.out))
    print(f"wrote {len(corpus)} biographies to {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    started = time.monotonic()
    corpus_path = _require_file(args.corpus, "corpus")
    corpus = _load_corpus(args.corpus)
    config = _resolve_config(args.config, _train_overrides(args))
    log_path = args.log if args.log else args.out + ".loss.csv"
    checkpoint = train(corpus, config, log_path=log_path)
    checkpoint.save(args.out)
    manifest = RunManifest(
        command="train",
        argv=list(sys.argv[1:]),
        seed=config.train.seed,
        config=config_to_dict(config),
        inputs={"corpus": _file_entry(corpus_path)},
        outputs={
            "checkpoint": _file_entry(args.out),
            "loss_log": _file_entry(log_path),
        },
        duration_seconds=time.monotonic() - started,
    )
    manifest.write(_manifest_path(args.out))
    print(f"trained {config.train.max_updates} updates -> {args.out}")
    return 0


def cmd_finetune(args: argparse.Namespace) -> int:
    started = time.monotonic()
    corpus_path = _require_file(args.corpus, "corpus")
    init_path = _require_file(args.init_from, "checkpoint")
    corpus = _load_corpus(args.corpus)
    base = _load_checkpoint(args.init_from)
    # The checkpoint's own config is the default layer so architecture
    # settings carry over unless explicitly overridden.
    config = _resolve_config(args.config, _train_overrides(args), defaults=base.config)
    log_path = args.log if args.log else args.out + ".loss.csv"
    checkpoint = finetune(base, corpus, config, log_path=log_path)
    checkpoint.save(args.out)
    manifest = RunManifest(
        command="finetune",
        argv=list(sys.argv[1:]),
        seed=config.train.seed,
        config=config_to_dict(config),
        inputs={
            "corpus": _file_entry(corpus_path),
            "init_from": _file_entry(init_path),
        },
        outputs={
            "checkpoint": _file_entry(args.out),
            "loss_log": _file_entry(log_path),
        },
        duration_seconds=time.monotonic() - started,
    )
    manifest.write(_manifest_path(args.out))
    print(f"finetuned {config.train.max_updates} updates -> {args.out}")
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    started = time.monotonic()
    if bool(args.corpus) == bool(args.name):
        raise CliError("provide exactly one of --corpus or --name")
    checkpoint = _load_checkpoint(args.checkpoint)
    model = checkpoint.build()
    query_mode = args.query_mode or checkpoint.config["query_mode"]
    config = _pipeline_config(args, query_mode)
    subjects: list[tuple[str, list[str], list]] = []
    inputs: dict = {"checkpoint": _file_entry(args.checkpoint)}
    if args.corpus:
        corpus = _load_corpus(args.corpus)
        inputs["corpus"] = _file_entry(args.corpus)
        for bio in corpus:
            subjects.append((bio.name, list(bio.occupations), filter_hits(bio.web_hits)))
    else:
        subjects.append((args.name, list(args.occupation or []), []))
    drafts = []
    rendered: list[str] = []
    for name, occupations, hits in subjects:
        draft = write_article(name, occupations, hits, model, config)
        drafts.append(draft)
        rendered.append(render_article(draft))
    text = ("\n" + ARTICLE_SEPARATOR + "\n").join(rendered)
    Path(args.out).write_text(text, encoding="utf-8")
    sidecar = args.out + ".drafts.jsonl"
    write_drafts(drafts, sidecar)
    manifest = RunManifest(
        command="generate",
        argv=list(sys.argv[1:]),
        seed=None,
        config={
            "query_mode": query_mode,
            "max_sections": config.max_sections,
            **asdict(config.constraints),
        },
        inputs=inputs,
        outputs={
            "articles": _file_entry(args.out),
            "drafts": _file_entry(sidecar),
        },
        duration_seconds=time.monotonic() - started,
    )
    manifest.write(_manifest_path(args.out))
    print(f"wrote {len(drafts)} articles to {args.out}")
    return 0


def _parse_metrics(spec: str) -> tuple[str, ...]:
    names = tuple(s.strip() for s in spec.split(",") if s.strip())
    for n in names:
        if n not in METRIC_FAMILIES:
            raise CliError(f"unknown metric {n!r}; choose from {', '.join(METRIC_FAMILIES)}")
    if not names:
        raise CliError("at least one metric is required")
    return names


def cmd_evaluate(args: argparse.Namespace) -> int:
    started = time.monotonic()
    checkpoint = _load_checkpoint(args.checkpoint)
    corpus = _load_corpus(args.corpus)
    model = checkpoint.build()
    metrics = _parse_metrics(args.metrics)
    query_mode = args.query_mode or checkpoint.config["query_mode"]
    granularity = args.granularity or checkpoint.config["granularity"]
    config = _pipeline_config(args, query_mode)
    report = evaluate_model(
        model, corpus, config, granularity=granularity, metrics=metrics
    )
    Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    outputs = {"report": _file_entry(args.out)}
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
        outputs["csv"] = _file_entry(args.csv)
    print(report.to_table(), end="")
    manifest = RunManifest(
        command="evaluate",
        argv=list(sys.argv[1:]),
        seed=None,
        config={
            "query_mode": query_mode,
            "granularity": granularity,
            "metrics": list(metrics),
            "max_sections": config.max_sections,
            **asdict(config.constraints),
        },
        inputs={
            "checkpoint": _file_entry(args.checkpoint),
            "corpus": _file_entry(args.corpus),
        },
        outputs=outputs,
        duration_seconds=time.monotonic() - started,
    )
    manifest.write(_manifest_path(args.out))
    return 0


def _parse_seeds(spec: str) -> list[int]:
    try:
        seeds = [int(s) for s in spec.split(",") if s.strip()]
    except ValueError as e:
        raise CliError(f"bad --seeds value: {e}") from e
    if not seeds:
        raise CliError("at least one seed is required")
    return seeds


def _report_means(report: EvalReport) -> dict:
    return {
        "rouge_p": report.mean_rouge.precision,
        "rouge_r": report.mean_rouge.recall,
        "rouge_f1": report.mean_rouge.f1,
        "equivalence": report.mean_equivalence,
        "coverage": report.mean_coverage,
        "concentration": report.mean_concentration,
    }


def cmd_ablate(args: argparse.Namespace) -> int:
    started = time.monotonic()
    corpus_path = _require_file(args.corpus, "corpus")
    eval_path = _require_file(args.eval_corpus, "eval corpus")
    train_corpus = _load_corpus(args.corpus)
    eval_corpus = _load_corpus(args.eval_corpus)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    granularities = [g.strip() for g in args.granularities.split(",") if g.strip()]
    for m in modes:
        if m not in MODES:
            raise CliError(f"unknown query mode {m!r}; choose from {', '.join(MODES)}")
    for g in granularities:
        if g not in GRANULARITIES:
            raise CliError(f"unknown granularity {g!r}; choose from {', '.join(GRANULARITIES)}")
    if not modes or not granularities:
        raise CliError("at least one mode and one granularity are required")
    seeds = _parse_seeds(args.seeds)
    metrics = _parse_metrics(args.metrics)
    base_config = _resolve_config(args.config, _train_overrides(args))

    rows: list[dict] = []
    means: list[dict] = []
    flat_reports: list[EvalReport] = []
    vocab = corpus_vocabulary(train_corpus, base_config.vocab_size)
    for mode in modes:
        for granularity in granularities:
            cell_values: list[dict] = []
            for seed in seeds:
                tree = config_to_dict(base_config)
                tree["query_mode"] = mode
                tree["granularity"] = granularity
                tree["train"]["seed"] = seed
                cell_config = config_from_dict(tree)
                checkpoint = train(train_corpus, cell_config, vocab=vocab)
                pipe = _pipeline_config(args, mode)
                report = evaluate_model(
                    checkpoint.build(), eval_corpus, pipe,
                    granularity=granularity, metrics=metrics,
                )
                values = _report_means(report)
                rows.append({
                    "query_mode": mode, "granularity": granularity, "seed": seed,
                    **values,
                })
                cell_values.append(values)
                flat_reports.append(report)
            keys = cell_values[0].keys()
            mean_entry = {"query_mode": mode, "granularity": granularity, "seeds": seeds}
            for k in keys:
                vals = [cv[k] for cv in cell_values if cv[k] is not None]
                mean_entry[k] = sum(vals) / len(vals) if vals else None
            means.append(mean_entry)

    table = _ablate_table(rows, means, metrics)
    print(table, end="")
    payload = {
        "modes": modes,
        "granularities": granularities,
        "seeds": seeds,
        "metrics": list(metrics),
        "rows": rows,
        "means": means,
    }
    Path(args.out).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    manifest = RunManifest(
        command="ablate",
        argv=list(sys.argv[1:]),
        seed=None,
        config=config_to_dict(base_config),
        inputs={
            "corpus": _file_entry(corpus_path),
            "eval_corpus": _file_entry(eval_path),
        },
        outputs={"report": _file_entry(args.out)},
        duration_seconds=time.monotonic() - started,
    )
    manifest.write(_manifest_path(args.out))
    return 0


def _ablate_table(rows: list[dict], means: list[dict], metrics: tuple[str, ...]) -> str:
    value_cols = []
    if "rouge" in metrics:
        value_cols += ["rouge_p", "rouge_r", "rouge_f1"]
    if "equivalence" in metrics:
        value_cols.append("equivalence")
    if "coverage" in metrics:
        value_cols.append("coverage")
    if "concentration" in metrics:
        value_cols.append("concentration")
    cols = ["query_mode", "granularity", "seed"] + value_cols
    cells = [cols]

    def fmt(v) -> str:
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    for mean in means:
        cell_rows = [
            r for r in rows
            if r["query_mode"] == mean["query_mode"]
            and r["granularity"] == mean["granularity"]
        ]
        for r in cell_rows:
            cells.append([fmt(r[c]) for c in cols])
        cells.append(
            [mean["query_mode"], mean["granularity"], "mean"]
            + [fmt(mean[c]) for c in value_cols]
        )
    widths = [max(len(r[i]) for r in cells) for i in range(len(cols))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in cells]
    return "\n".join(lines) + "\n"


def cmd_stats(args: argparse.Namespace) -> int:
    started = time.monotonic()
    corpus = _load_corpus(args.corpus)
    if not corpus:
        raise CliError(f"corpus is empty: {args.corpus}")
    stats = corpus_stats(corpus)
    payload = stats.to_dict()
    if args.json:
        text = json.dumps(payload, indent=2) + "\n"
    else:
        width = max(len(k) for k in payload)
        lines = []
        for k, v in payload.items():
            shown = f"{v:.4f}" if isinstance(v, float) else str(v)
            lines.append(f"{k.ljust(width)}  {shown}")
        text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        manifest = RunManifest(
            command="stats",
            argv=list(sys.argv[1:]),
            seed=None,
            config={"json": bool(args.json)},
            inputs={"corpus": _file_entry(args.corpus)},
            outputs={"stats": _file_entry(args.out)},
            duration_seconds=time.monotonic() - started,
        )
        manifest.write(_manifest_path(args.out))
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="biodraft",
        description="Retrieval-augmented section-by-section biography writer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=10, help="number of biographies")
    p.add_argument("--out", required=True)
    p.add_argument("--distractors", type=_on_off, default=True, metavar="{on,off}")
    p.add_argument("--low-evidence", type=_on_off, default=False, metavar="{on,off}")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from scratch")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="loss CSV path (default: <out>.loss.csv)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="continue training from a checkpoint")
    p.add_argument("--from", dest="init_from", required=True, help="base checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="loss CSV path (default: <out>.loss.csv)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("generate", help="write articles with a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", help="biography JSONL supplying subjects and hits")
    p.add_argument("--name", help="single ad-hoc subject name")
    p.add_argument("--occupation", action="append", help="repeatable with --name")
    p.add_argument("--query-mode", choices=MODES, help="default: checkpoint setting")
    p.add_argument("--out", required=True, help="rendered articles path")
    _add_decode_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score generations against gold articles")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--metrics", default=",".join(METRIC_FAMILIES))
    p.add_argument("--query-mode", choices=MODES, help="default: checkpoint setting")
    p.add_argument("--granularity", choices=GRANULARITIES, help="default: checkpoint setting")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--csv", help="also export per-article CSV")
    _add_decode_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and evaluate query-mode/granularity cells")
    p.add_argument("--corpus", required=True, help="training corpus")
    p.add_argument("--eval-corpus", required=True, help="held-out corpus")
    p.add_argument("--modes", default=",".join(MODES))
    p.add_argument("--granularities", default="section")
    p.add_argument("--seeds", default="0", help="comma-separated training seeds")
    p.add_argument("--metrics", default=",".join(METRIC_FAMILIES))
    p.add_argument("--out", required=True, help="report JSON path")
    _add_train_flags(p)
    _add_decode_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("stats", help="print corpus statistics")
    p.add_argument("--corpus", required=True)
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("--out", help="also write the summary to this path")
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except BrokenPipeError:
        return 1
    except Exception as e:  # internal failure, distinct from usage errors
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
