"""Command-line driver: ``vgvae train | eval-sts | eval-syntax | nn``.

Exit codes: 0 success, 2 configuration error, 3 data or format error,
4 numeric divergence during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import DataFormatError, TreeParseError, build_vocab, load_paraphrases, load_sentences, load_sts, load_trees
from .evaluation import (
    EmptyIndex,
    NnEntry,
    NnIndex,
    UndefinedCorrelation,
    nearest_sentences,
    nn_labeled_f1,
    nn_parse_ted,
    nn_pos_accuracy,
    random_baseline_bucketed,
    random_baseline_ted,
    sts_eval,
    upper_bound_bucketed,
    upper_bound_ted,
)
from .model import InputError, ModelConfig, build_model
from .objectives import LOSS_NAMES, LossConfig
from .trainer import CheckpointError, DivergenceError, TrainConfig, Trainer, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

DATA_ERRORS = (OSError, DataFormatError, TreeParseError, CheckpointError, InputError, EmptyIndex,
               UndefinedCorrelation)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run configuration


def _owned_fields() -> dict[str, type]:
    """Every settable key and the dataclass that owns it."""
    owners = {}
    for cls, skip in ((ModelConfig, {"vocab_size", "kind"}), (LossConfig, {"enabled"}), (TrainConfig, set())):
        for f in dataclasses.fields(cls):
            if f.name not in skip:
                owners[f.name] = cls
    owners["losses"] = LossConfig
    owners["min_count"] = None
    return owners


def _coerce(key: str, raw: str):
    if key == "losses":
        return frozenset(s.strip() for s in raw.split(",") if s.strip())
    defaults = {"min_count": 1}
    for cls in (ModelConfig, LossConfig, TrainConfig):
        for f in dataclasses.fields(cls):
            if f.name == key and f.default is not dataclasses.MISSING:
                defaults[key] = f.default
    default = defaults.get(key)
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    if default is None and raw.lower() in ("", "none"):
        return None
    return raw


def read_config(path) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment; unknown keys are errors."""
    owners = _owned_fields()
    settings = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in owners:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        settings[key] = _coerce(key, value)
    return settings


def merge_settings(file_settings: dict, overrides: dict) -> dict:
    """Command line over config file over defaults; ``VGVAE_SEED`` only if nothing else sets the seed."""
    merged = dict(file_settings)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    if "seed" not in merged and os.environ.get("VGVAE_SEED"):
        merged["seed"] = _coerce("seed", os.environ["VGVAE_SEED"])
    return merged


def split_settings(settings: dict) -> tuple[dict, dict, dict, int]:
    owners = _owned_fields()
    parts: dict = {ModelConfig: {}, LossConfig: {}, TrainConfig: {}}
    min_count = settings.get("min_count", 1)
    for key, value in settings.items():
        owner = owners.get(key)
        if owner is not None:
            parts[owner]["enabled" if key == "losses" else key] = value
    return parts[ModelConfig], parts[LossConfig], parts[TrainConfig], min_count


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    overrides = {
        "losses": None if args.losses is None else _coerce("losses", args.losses),
        "encoder_kind": args.encoder,
        "decoder_kind": args.decoder,
        "dev_path": args.dev,
        "seed": args.seed,
        "epochs": args.epochs,
    }
    try:
        settings = merge_settings(read_config(args.config) if args.config else {}, overrides)
        model_kw, loss_kw, train_kw, min_count = split_settings(settings)
        if args.baseline:
            loss_kw.setdefault("enabled", frozenset({"dpl"}))
            if loss_kw["enabled"] != {"dpl"}:
                raise ConfigError("baselines train with dpl only")
            loss_kw.setdefault("dpl_start_epoch", 1)
            train_kw.setdefault("scramble", args.baseline == "blstmavg" and not args.no_scramble)
        loss_cfg = LossConfig(**loss_kw)
        train_cfg = TrainConfig(**train_kw)
    except (ConfigError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        raw = load_paraphrases(args.pairs)
        if not raw:
            raise DataFormatError(f"{args.pairs}: no paraphrase pairs")
        vocab = build_vocab((s for p in raw for s in (p.raw1, p.raw2)), min_count=min_count)
        pairs = [p.encode(vocab) for p in raw]
        dev = load_sts(train_cfg.dev_path) if train_cfg.dev_path else None
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA

    try:
        config = ModelConfig(vocab_size=len(vocab), kind=args.baseline or "vgvae", **model_kw)
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    model = build_model(config, seed=train_cfg.seed, vocab=vocab)
    log_path = Path(args.log) if args.log else Path(f"{args.out}.log")
    log_path.write_text("", encoding="utf-8")
    trainer = Trainer(model, pairs, loss_cfg, train_cfg, dev=dev, log_path=log_path)
    try:
        ckpt = trainer.run(checkpoint_path=args.out)
    except DivergenceError as exc:
        dump = Path(f"{args.out}.divergence.json")
        dump.write_text(json.dumps(exc.dump, sort_keys=True, indent=1), encoding="utf-8")
        print(f"error: {exc}; diagnostics in {dump}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(args.out, ckpt)
    print(f"pairs\t{len(pairs)}")
    print(f"vocab\t{len(vocab)}")
    print(f"steps\t{trainer.step_count}")
    if trainer.epoch_losses:
        print(f"final_epoch_loss\t{trainer.epoch_losses[-1]:.4f}")
    if trainer.dev_scores:
        print(f"best_dev_pearson\t{max(trainer.dev_scores):.4f}")
    print(f"checkpoint\t{args.out}")
    return EXIT_OK


def _write_csv(report, path) -> None:
    if path:
        Path(path).write_text(report.csv(), encoding="utf-8")


def cmd_eval_sts(args) -> int:
    try:
        ckpt = load_checkpoint(args.ckpt)
        data = load_sts(args.data)
        report = sts_eval(ckpt.build_model(), data, args.variable)
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(report.table())
    _write_csv(report, args.csv or f"{args.ckpt}.sts.{args.variable}.csv")
    return EXIT_OK


def cmd_eval_syntax(args) -> int:
    try:
        ckpt = load_checkpoint(args.ckpt)
        model = ckpt.build_model()
        candidates = [NnEntry(t.leaves(), t) for t in load_trees(args.data)]
        queries = [NnEntry(t.leaves(), t) for t in load_trees(args.queries)]
        if not candidates:
            raise EmptyIndex(f"{args.data}: no candidate trees")
        index = NnIndex.build(model, candidates, args.variable)
        qindex = NnIndex.build(model, queries, args.variable)
        rng = np.random.default_rng(args.seed)
        if args.task == "ted":
            report = nn_parse_ted(index, qindex)
            if args.baselines:
                report.baselines["random"] = random_baseline_ted(index, qindex, runs=10, rng=rng)
                report.baselines["oracle"] = upper_bound_ted(index, qindex, sample=100, rng=rng)
        else:
            metric = "f1" if args.task == "f1" else "pos_acc"
            report = nn_labeled_f1(index, qindex) if metric == "f1" else nn_pos_accuracy(index, qindex)
            if args.baselines:
                report.baselines["random"] = random_baseline_bucketed(index, qindex, metric, runs=10, rng=rng)
                report.baselines["oracle"] = upper_bound_bucketed(index, qindex, metric, sample=100, rng=rng)
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(report.table())
    _write_csv(report, args.csv or f"{args.ckpt}.{args.task}.{args.variable}.csv")
    return EXIT_OK


def cmd_nn(args) -> int:
    try:
        ckpt = load_checkpoint(args.ckpt)
        sentences = load_sentences(args.candidates)
        if not sentences:
            raise EmptyIndex(f"{args.candidates}: no candidate sentences")
        model = ckpt.build_model()
        index = NnIndex.build(model, [NnEntry(s) for s in sentences], args.variable)
        query = args.query.split()
        if not query:
            raise InputError("empty query")
        qvec = model.embed([query], args.variable)[0]
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    for rank, (entry, cos) in enumerate(nearest_sentences(index, qvec, args.top), 1):
        print(f"{rank}\t{cos:.4f}\t{' '.join(entry.tokens)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vgvae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a VGVAE or an averaging baseline")
    p.add_argument("--pairs", required=True, help="paraphrase TSV")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--losses", help=f"comma-separated subset of {','.join(LOSS_NAMES)}; empty for ELBO only")
    p.add_argument("--encoder", choices=("word_avg", "bilstm"))
    p.add_argument("--decoder", choices=("bow", "lstm"))
    p.add_argument("--dev", help="STS TSV for best-dev model selection")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--baseline", choices=("wordavg", "blstmavg"), help="train a DPL-only baseline instead")
    p.add_argument("--no-scramble", action="store_true", help="do not scramble blstmavg inputs")
    p.add_argument("--log", help="training log path (default: CKPT.log)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-sts", help="Pearson of latent cosines against STS gold scores")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="STS TSV")
    p.add_argument("--variable", choices=("semantic", "syntactic"), default="semantic")
    p.add_argument("--task", choices=("sts",), default="sts")
    p.add_argument("--csv", help="per-item CSV path (default: CKPT.sts.VARIABLE.csv)")
    p.set_defaults(func=cmd_eval_sts)

    p = sub.add_parser("eval-syntax", help="1-NN tree edit distance, labeled F1 or POS accuracy")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="candidate tree file")
    p.add_argument("--queries", required=True, help="query tree file")
    p.add_argument("--variable", choices=("semantic", "syntactic"), default="syntactic")
    p.add_argument("--task", choices=("ted", "f1", "pos"), required=True)
    p.add_argument("--baselines", action="store_true", help="also report random and oracle values")
    p.add_argument("--seed", type=int, default=0, help="seed for the baselines")
    p.add_argument("--csv", help="per-item CSV path (default: CKPT.TASK.VARIABLE.csv)")
    p.set_defaults(func=cmd_eval_syntax)

    p = sub.add_parser("nn", help="nearest neighbours of a query sentence")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--candidates", required=True, help="one tokenized sentence per line")
    p.add_argument("--query", required=True)
    p.add_argument("--variable", choices=("semantic", "syntactic"), default="semantic")
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(func=cmd_nn)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
