"""Command-line entry point: prepare, train, generate, eval, inspect, sweep.

Every command reads all state from flags and files, prints its result to
stdout, and on any handled failure writes a single ``error: <Type>: <why>``
line to stderr and exits nonzero. Numeric settings come from an optional
JSON config file whose values individual flags override; the effective
configuration is echoed at train time and embedded in checkpoints.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Mapping

import numpy as np

from .corpus import (
    GenrePattern,
    PhonologyLexicon,
    PoemExample,
    PreparedDataset,
    build_training_pairs,
    build_vocabulary,
    derive_genre_pattern,
    extract_keywords_textrank,
    load_default_stopwords,
    load_lexicon_file,
    load_pattern_library,
    read_corpus_file,
)
from .errors import ConfigError, DataError, WmPoetError
from .evaluation import (
    build_relevance_map,
    dump_attention,
    evaluate_model,
    slot_sweep,
)
from .generation import GenerationRequest, generate_poem
from .model import ModelConfig, WorkingMemoryModel
from .training import TrainConfig, load_checkpoint, train_model

_MODEL_KEYS = (
    "word_dim", "phonology_dim", "length_dim", "hidden", "trace_dim",
    "content_dim", "k1", "k2", "k3", "attn_dim", "dropout", "write_gamma",
    "use_genre_embedding", "use_topic_trace", "truncate_bptt",
    "max_line_length", "max_lines",
)
_TRAIN_KEYS = (
    "batch_size", "lr", "beta1", "beta2", "eps", "l2", "dropout", "gamma",
    "epochs", "seed", "grad_clip", "validate_every", "patience",
)
_EXTRA_KEYS = ("beam_size",)
VALID_CONFIG_KEYS = tuple(sorted(set(_MODEL_KEYS + _TRAIN_KEYS + _EXTRA_KEYS)))

_INT_KEYS = {
    "word_dim", "phonology_dim", "length_dim", "hidden", "trace_dim",
    "content_dim", "k1", "k2", "k3", "attn_dim", "max_line_length",
    "max_lines", "batch_size", "epochs", "seed", "validate_every",
    "patience", "beam_size",
}
_FLOAT_KEYS = {
    "dropout", "write_gamma", "lr", "beta1", "beta2", "eps", "l2", "gamma",
    "grad_clip",
}
_BOOL_KEYS = {"use_genre_embedding", "use_topic_trace", "truncate_bptt"}
_NULLABLE_KEYS = {"k3", "attn_dim"}


def _check_config_value(key: str, value):
    if key not in VALID_CONFIG_KEYS:
        raise ConfigError(
            f"unknown config key {key!r}; valid keys: {', '.join(VALID_CONFIG_KEYS)}"
        )
    if value is None:
        if key in _NULLABLE_KEYS:
            return None
        raise ConfigError(f"config key {key!r} must not be null")
    if key in _BOOL_KEYS:
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key!r} expects a boolean, got {value!r}")
        return value
    if key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key!r} expects an integer, got {value!r}")
        return value
    if key in _FLOAT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} expects a number, got {value!r}")
        return float(value)
    raise ConfigError(f"config key {key!r} is not typed")  # pragma: no cover


@dataclasses.dataclass
class RunConfig:
    """Merged numeric settings from config file plus flag overrides."""

    values: dict = dataclasses.field(default_factory=dict)

    @property
    def beam_size(self) -> int:
        return self.values.get("beam_size", 20)

    @property
    def seed(self) -> int:
        return self.values.get("seed", 0)

    def train_config(self) -> TrainConfig:
        fields = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.values.items() if k in fields})

    def model_overrides(self) -> dict:
        model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
        overrides = {
            k: v for k, v in self.values.items()
            if k in _MODEL_KEYS and k in model_fields
        }
        if "gamma" in self.values and "write_gamma" not in self.values:
            overrides["write_gamma"] = float(self.values["gamma"])
        return overrides

    def to_dict(self) -> dict:
        return dict(self.values)


def parse_config(path=None, overrides: Mapping | None = None) -> RunConfig:
    """Load a JSON config file and fold flag overrides on top.

    An absent or empty file means all defaults. Unknown keys and wrongly
    typed values are rejected with the full list of valid keys.
    """
    values: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        if text.strip():
            try:
                payload = json.loads(text)
            except json.JSONDecodeError as err:
                raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
        else:
            payload = {}
        if not isinstance(payload, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        for key, value in payload.items():
            values[key] = _check_config_value(key, value)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        values[key] = _check_config_value(key, value)
    return RunConfig(values=values)


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------


def _register_pattern(patterns: dict[str, GenrePattern], pattern: GenrePattern) -> GenrePattern:
    name = pattern.name
    suffix = 1
    while name in patterns and patterns[name] != dataclasses.replace(pattern, name=name):
        suffix += 1
        name = f"{pattern.name}-{suffix}"
    if name != pattern.name:
        pattern = dataclasses.replace(pattern, name=name)
    patterns[name] = pattern
    return pattern


def _cmd_prepare(args) -> int:
    raw_poems = read_corpus_file(args.corpus)
    if not raw_poems:
        raise DataError(f"corpus {args.corpus} holds no poems")
    lexicon = load_lexicon_file(args.lexicon)
    tunes = load_pattern_library(args.patterns) if args.patterns else None
    vocab = build_vocabulary((p.text for p in raw_poems), min_count=args.min_count)
    stopwords = load_default_stopwords()
    rng = np.random.default_rng(args.seed)

    patterns: dict[str, GenrePattern] = {}
    examples: list[PoemExample] = []
    for poem in raw_poems:
        keywords = poem.keywords or extract_keywords_textrank(
            poem.lines, k=args.keywords, stopwords=stopwords
        )
        keywords = keywords[:4]
        if not keywords:
            raise DataError(f"no keywords available for poem {poem.text!r}")
        pattern = _register_pattern(
            patterns, derive_genre_pattern(poem.lines, lexicon, tunes)
        )
        examples.append(PoemExample(
            keywords=tuple(keywords),
            lines=tuple(tuple(vocab.encode(line)) for line in poem.lines),
            pattern=pattern,
            genre=pattern.genre,
        ))

    n_test, n_valid = args.test, args.valid
    if n_test + n_valid >= len(examples):
        raise DataError(
            f"cannot hold out {n_test}+{n_valid} poems from a corpus of {len(examples)}"
        )
    order = rng.permutation(len(examples))
    test_idx = sorted(int(i) for i in order[:n_test])
    valid_idx = sorted(int(i) for i in order[n_test:n_test + n_valid])
    held_out = set(test_idx) | set(valid_idx)

    def single_pair(example: PoemExample) -> PoemExample:
        pairs = build_training_pairs(example)
        return pairs[int(rng.integers(len(pairs)))]

    train, valid, test = [], [], []
    for i, example in enumerate(examples):
        if i in held_out:
            continue
        train.extend(build_training_pairs(example))
    for i in valid_idx:
        valid.append(single_pair(examples[i]))
    for i in test_idx:
        test.append(single_pair(examples[i]))

    train_poem_lines = [
        raw_poems[i].lines for i in range(len(raw_poems)) if i not in held_out
    ]
    all_keywords = sorted({kw for ex in examples for kw in ex.keywords})
    relevance = build_relevance_map(train_poem_lines, all_keywords)

    embeddings = None
    if args.pretrain_embeddings:
        from .corpus import pretrain_embeddings

        id_lines = [
            vocab.encode(line)
            for i, poem in enumerate(raw_poems) if i not in held_out
            for line in poem.lines
        ]
        embeddings = pretrain_embeddings(
            id_lines, dim=args.embedding_dim, epochs=args.embedding_epochs,
            window=args.embedding_window, negatives=5, rng=rng,
            vocab_size=len(vocab),
        )

    genre_counts: dict[str, int] = {}
    for example in examples:
        genre_counts[example.genre] = genre_counts.get(example.genre, 0) + 1
    dataset = PreparedDataset(
        vocab=vocab,
        lexicon=lexicon,
        patterns=patterns,
        train=train,
        valid=valid,
        test=test,
        relevance_map=relevance,
        embeddings=embeddings,
        meta={
            "n_poems": len(examples),
            "seed": args.seed,
            "genres": genre_counts,
        },
    )
    dataset.save(args.out)
    print(
        f"prepared {len(examples)} poems -> {len(train)} train pairs, "
        f"{len(valid)} valid, {len(test)} test; vocabulary {len(vocab)} entries; "
        f"{len(patterns)} patterns -> {args.out}"
    )
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _data_extents(dataset: PreparedDataset) -> tuple[int, int]:
    max_len = 1
    max_lines = 2
    for pattern in dataset.patterns.values():
        max_len = max(max_len, pattern.max_line_length)
        max_lines = max(max_lines, len(pattern.lines))
    for split in (dataset.train, dataset.valid, dataset.test):
        for example in split:
            max_lines = max(max_lines, len(example.lines))
            max_len = max(max_len, max(len(line) for line in example.lines))
    return max_len, max_lines


def _build_model_config(dataset: PreparedDataset, run: RunConfig) -> ModelConfig:
    max_len, max_lines = _data_extents(dataset)
    base = {
        "vocab_size": len(dataset.vocab),
        "max_line_length": max_len,
        "max_lines": max_lines,
    }
    base.update(run.model_overrides())
    return ModelConfig(**base)


def _checkpoint_assets(dataset: PreparedDataset) -> dict:
    return {
        "lexicon": dataset.lexicon.to_dict(),
        "patterns": {name: p.to_dict() for name, p in dataset.patterns.items()},
        "relevance_map": {k: list(v) for k, v in dataset.relevance_map.items()},
        "meta": dict(dataset.meta),
    }


def _cmd_train(args) -> int:
    dataset = PreparedDataset.load(args.data)
    run = parse_config(args.config, {
        "epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr,
        "seed": args.seed, "hidden": args.hidden, "dropout": args.dropout,
        "patience": args.patience,
    })
    train_cfg = run.train_config()
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        model = resume.model
        model_cfg = model.config
    else:
        model_cfg = _build_model_config(dataset, run)
        embeddings = None
        if dataset.embeddings is not None and dataset.embeddings.shape == (
            model_cfg.vocab_size, model_cfg.word_dim,
        ):
            embeddings = dataset.embeddings
        model = WorkingMemoryModel(
            model_cfg, dataset.vocab, np.random.default_rng(train_cfg.seed),
            embedding_table=embeddings,
        )
    effective = {
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "beam_size": run.beam_size,
    }
    print(json.dumps({"config": effective}, ensure_ascii=False, sort_keys=True))
    result = train_model(
        model, dataset.train, dataset.valid, train_cfg,
        out_dir=args.out, assets=_checkpoint_assets(dataset),
        resume=resume, log=print,
    )
    best = f"{result.best_valid_pp:.4f}" if result.history else "n/a"
    print(
        f"finished after {len(result.history)} epochs; best validation "
        f"perplexity {best} at epoch {result.best_epoch}; checkpoints in {args.out}"
    )
    return 0


# ---------------------------------------------------------------------------
# generate / eval / inspect / sweep
# ---------------------------------------------------------------------------


def _load_generation_context(model_path):
    bundle = load_checkpoint(model_path)
    assets = bundle.assets
    if "lexicon" not in assets or "patterns" not in assets:
        raise ConfigError(
            "checkpoint lacks the lexicon/pattern assets needed for generation; "
            "retrain with this version to embed them"
        )
    lexicon = PhonologyLexicon.from_dict(assets["lexicon"])
    patterns = {
        name: GenrePattern.from_dict(payload)
        for name, payload in assets["patterns"].items()
    }
    return bundle, lexicon, patterns


def _cmd_generate(args) -> int:
    bundle, lexicon, patterns = _load_generation_context(args.model)
    if args.pattern not in patterns:
        known = ", ".join(sorted(patterns)) or "none"
        raise ConfigError(f"unknown pattern {args.pattern!r}; available: {known}")
    keywords = tuple(part.strip() for part in args.keywords.split(",") if part.strip())
    request = GenerationRequest(
        keywords=keywords,
        pattern=patterns[args.pattern],
        seed=args.seed,
        beam_size=args.beam,
        hard_constraint=not args.soft_constraints,
        n_best=args.n_best,
    )
    result = generate_poem(request, bundle.model, lexicon)
    text = result.text + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    if args.diagnostics:
        Path(args.diagnostics).write_text(
            json.dumps(result.diagnostics, ensure_ascii=False, sort_keys=True,
                       indent=1),
            encoding="utf-8",
        )
    return 0


def _cmd_eval(args) -> int:
    bundle, lexicon, _ = _load_generation_context(args.model)
    dataset = PreparedDataset.load(args.data)
    report = evaluate_model(
        bundle.model, dataset, args.split,
        beam_size=args.beam, seed=args.seed,
        hard_constraint=not args.soft_constraints,
    )
    payload = report.to_dict()
    if args.report:
        Path(args.report).write_text(
            json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=1),
            encoding="utf-8",
        )
    print(
        f"split={args.split} bleu={report.bleu:.4f} "
        f"perplexity={report.perplexity:.4f} "
        f"expression_ratio={report.expression_ratio:.4f}"
    )
    return 0


def _cmd_inspect(args) -> int:
    path = Path(args.diagnostics)
    if not path.exists():
        raise DataError(f"diagnostics file {path} does not exist")
    diagnostics = json.loads(path.read_text(encoding="utf-8"))
    out = dump_attention(diagnostics, args.line, args.out)
    print(f"wrote attention matrix for line {args.line} to {out}")
    return 0


def _cmd_sweep(args) -> int:
    dataset = PreparedDataset.load(args.data)
    run = parse_config(args.config, {
        "epochs": args.epochs, "seed": args.seed, "beam_size": args.beam,
    })
    if args.workers < 1:
        raise ConfigError(f"--workers must be >= 1, got {args.workers}")
    try:
        k2_values = [int(part) for part in args.k2.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"--k2 expects a comma-separated integer list, got {args.k2!r}") from None
    if not k2_values:
        raise ConfigError("--k2 expects at least one value")
    model_cfg = _build_model_config(dataset, run)
    rows = slot_sweep(
        dataset, model_cfg, run.train_config(), k2_values,
        beam_size=run.beam_size, log=print,
    )
    payload = {
        "k2_values": k2_values,
        "rows": rows,
        "config": {"model": model_cfg.to_dict(), "train": run.train_config().to_dict()},
    }
    if args.report:
        Path(args.report).write_text(
            json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=1),
            encoding="utf-8",
        )
    for row in rows:
        print(f"k2={row['k2']} bleu={row['bleu']:.4f} perplexity={row['perplexity']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wm-poet",
        description="Working-memory poetry model: data preparation, training, "
                    "generation, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build a dataset directory from corpus files")
    p.add_argument("--corpus", required=True)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patterns", default=None, help="optional tune library JSON")
    p.add_argument("--valid", type=int, default=2)
    p.add_argument("--test", type=int, default=2)
    p.add_argument("--keywords", type=int, default=4)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pretrain-embeddings", action="store_true")
    p.add_argument("--embedding-dim", type=int, default=256)
    p.add_argument("--embedding-epochs", type=int, default=5)
    p.add_argument("--embedding-window", type=int, default=4)
    p.set_defaults(func=_cmd_prepare)

    p = sub.add_parser("train", help="train a model on a prepared dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("generate", help="generate a poem from a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--keywords", required=True, help="comma-separated, 1 to 4")
    p.add_argument("--pattern", required=True)
    p.add_argument("--beam", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-best", type=int, default=1, dest="n_best")
    p.add_argument("--soft-constraints", action="store_true")
    p.add_argument("--diagnostics", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--report", default=None)
    p.add_argument("--beam", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--soft-constraints", action="store_true")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("inspect", help="export one line's attention as CSV")
    p.add_argument("--diagnostics", required=True)
    p.add_argument("--line", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("sweep", help="retrain across history-slot counts")
    p.add_argument("--data", required=True)
    p.add_argument("--k2", required=True, help="comma-separated slot counts")
    p.add_argument("--report", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except WmPoetError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    except FileNotFoundError as err:
        print(f"error: FileNotFoundError: {err}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as err:
        print(f"error: JSONDecodeError: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
