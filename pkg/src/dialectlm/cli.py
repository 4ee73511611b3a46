"""Command-line entry point for the pipeline.

One subcommand per pipeline stage: train-vocab, filter-corpus, pretrain,
finetune, evaluate, stats. Hyperparameters resolve in the order
defaults < config file < flags; every artifact-producing run appends a
manifest block next to its outputs from which the run can be replayed.
Exit codes: 0 success, 1 usage/validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .corpus import (
    FilterModel,
    build_corpus,
    corpus_stats,
    ingest,
    train_filter,
)
from .evaluation import load_dataset, parse_report_scores, run_multiseed
from .model import (
    Checkpoint,
    ConfigError,
    ModelConfig,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .tokenizer import Vocab, VocabError, encode, train_vocab
from .training import TrainConfig, finetune, pretrain

MANIFEST_NAME = "manifest.txt"

TRAIN_KEYS = {
    "batch_size": int, "max_len": int, "epochs": int,
    "learning_rate": float, "weight_decay": float, "warmup_fraction": float,
    "seed": int, "grad_clip_norm": float,
}
MODEL_KEYS = {
    "num_layers": int, "hidden_size": int, "num_heads": int,
    "intermediate_size": int, "max_position": int, "dropout_rate": float,
}
CONFIG_KEYS = {**TRAIN_KEYS, **MODEL_KEYS}

MODEL_DEFAULTS = {"num_layers": 12, "hidden_size": 768, "num_heads": 12,
                  "intermediate_size": 3072, "max_position": 512,
                  "dropout_rate": 0.1}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we want exit 1
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def load_config(path) -> dict:
    """Parse a key=value config file; unknown keys and bad values reject."""
    values: dict = {}
    for lineno, raw in enumerate(
            Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: malformed line {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = CONFIG_KEYS[key](value)
        except ValueError:
            raise UsageError(f"{path}:{lineno}: cannot parse {value!r} "
                             f"as {CONFIG_KEYS[key].__name__}")
    return values


def _resolve(args, file_values: dict, keys: dict, defaults: dict) -> dict:
    resolved = {}
    for key in keys:
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
        elif key in file_values:
            resolved[key] = file_values[key]
        else:
            resolved[key] = defaults[key]
    return resolved


def resolve_train_config(args) -> TrainConfig:
    file_values = load_config(args.config) if args.config else {}
    defaults = asdict(TrainConfig())
    return TrainConfig(**_resolve(args, file_values, TRAIN_KEYS, defaults))


def resolve_model_config(args, vocab_size: int,
                         num_labels: int = 0) -> ModelConfig:
    file_values = load_config(args.config) if args.config else {}
    geometry = _resolve(args, file_values, MODEL_KEYS, MODEL_DEFAULTS)
    return ModelConfig(vocab_size=vocab_size, num_labels=num_labels,
                       **geometry)


# ---------------------------------------------------------------------------
# manifest


def write_manifest(out_dir: Path, subcommand: str, args_used: dict,
                   resolved: dict, outputs: dict, started: str,
                   finished: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["[run]",
             f"subcommand={subcommand}",
             f"version={__version__}",
             f"started={started}",
             f"finished={finished}"]
    for key, value in args_used.items():
        if value is None:
            continue
        if isinstance(value, (list, tuple)):
            lines.extend(f"arg.{key}={v}" for v in value)
        else:
            lines.append(f"arg.{key}={value}")
    lines.extend(f"config.{k}={v}" for k, v in resolved.items())
    lines.extend(f"output.{k}={v}" for k, v in outputs.items())
    path = out_dir / MANIFEST_NAME
    with open(path, "a", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n\n")
    return path


def read_last_manifest(path) -> dict:
    """Parse the newest block of an append-only manifest into key->values."""
    blocks = [b for b in Path(path).read_text(encoding="utf-8").split("[run]")
              if b.strip()]
    if not blocks:
        raise ValueError(f"{path}: no manifest blocks")
    record: dict[str, list[str]] = {}
    for line in blocks[-1].strip().splitlines():
        key, _, value = line.partition("=")
        record.setdefault(key, []).append(value)
    return record


def manifest_to_argv(path) -> list[str]:
    """Reconstruct the argv of the run recorded in the newest block."""
    record = read_last_manifest(path)
    argv = [record["subcommand"][0]]
    for key, values in record.items():
        if key.startswith("arg."):
            argv.append("--" + key[len("arg."):].replace("_", "-"))
            if values != ["True"]:  # bare flag when stored as True
                argv.extend(values)
        elif key.startswith("config."):
            argv.extend(["--" + key[len("config."):].replace("_", "-"),
                         values[0]])
    return argv


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# argument parser


def _add_config_flags(sub, model_too: bool = True):
    sub.add_argument("--config", help="key=value config file")
    sub.add_argument("--seed", type=int, help="master random seed")
    for key in ("batch-size", "max-len", "epochs"):
        sub.add_argument(f"--{key}", type=int, dest=key.replace("-", "_"))
    for key in ("learning-rate", "weight-decay", "warmup-fraction",
                "grad-clip-norm"):
        sub.add_argument(f"--{key}", type=float, dest=key.replace("-", "_"))
    if model_too:
        for key in ("num-layers", "hidden-size", "num-heads",
                    "intermediate-size", "max-position"):
            sub.add_argument(f"--{key}", type=int,
                             dest=key.replace("-", "_"))
        sub.add_argument("--dropout-rate", type=float)


def build_parser() -> _Parser:
    parser = _Parser(prog="dialectlm",
                     description="Arabic dialect LM pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")

    p = subs.add_parser("train-vocab", parents=[], prog="dialectlm "
                        "train-vocab", help="train a WordPiece vocabulary")
    p.add_argument("--corpus", required=True, nargs="+",
                   help="input text files, one sentence per line")
    p.add_argument("--out", required=True, help="output vocabulary file")
    p.add_argument("--vocab-size", type=int, default=50_000)
    p.add_argument("--min-frequency", type=int, default=2)

    p = subs.add_parser("filter-corpus", prog="dialectlm filter-corpus",
                        help="split a dump into dialect and MSA streams")
    p.add_argument("--input", required=True, nargs="+")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--filter-ckpt", help="pre-trained binary filter")
    p.add_argument("--msa-train", help="MSA sentences for filter training")
    p.add_argument("--dialect-train",
                   help="dialect sentences for filter training")
    p.add_argument("--threshold", type=float, default=0.5)
    _add_config_flags(p)

    p = subs.add_parser("pretrain", prog="dialectlm pretrain",
                        help="masked-language-model pretraining")
    p.add_argument("--corpus", required=True, nargs="+")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p)

    p = subs.add_parser("finetune", prog="dialectlm finetune",
                        help="fine-tune a checkpoint for classification")
    p.add_argument("--dataset", required=True,
                   help="TSV file or directory with train/test TSVs")
    p.add_argument("--vocab", required=True)
    p.add_argument("--ckpt", required=True, help="starting checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p, model_too=False)

    p = subs.add_parser("evaluate", prog="dialectlm evaluate",
                        help="multi-seed fine-tuning evaluation")
    p.add_argument("--dataset", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", default="1,2,3,4,5",
                   help="comma-separated distinct seeds")
    p.add_argument("--baseline-report",
                   help="EvalReport file to compare against")
    p.add_argument("--baseline-name", default="baseline")
    p.add_argument("--paired", action="store_true",
                   help="paired-by-seed t-test instead of unpaired Welch")
    _add_config_flags(p, model_too=False)

    p = subs.add_parser("stats", prog="dialectlm stats",
                        help="corpus statistics after dedup")
    p.add_argument("--input", required=True, nargs="+")
    p.add_argument("--out", help="directory for stats.txt and manifest")
    return parser


# ---------------------------------------------------------------------------
# subcommand implementations


def _cmd_train_vocab(args) -> int:
    vocab = train_vocab(ingest(args.corpus), target_size=args.vocab_size,
                        min_frequency=args.min_frequency)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    started = _now()
    vocab.save(out)
    write_manifest(out.parent, "train-vocab",
                   {"corpus": args.corpus, "out": args.out,
                    "vocab_size": args.vocab_size,
                    "min_frequency": args.min_frequency},
                   {}, {"vocab": str(out)}, started, _now())
    print(f"wrote vocabulary of {len(vocab)} tokens to {out}")
    return 0


def _cmd_filter_corpus(args) -> int:
    started = _now()
    vocab = Vocab.load(args.vocab)
    train_cfg = resolve_train_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = {}

    if args.filter_ckpt and (args.msa_train or args.dialect_train):
        raise UsageError("--filter-ckpt conflicts with "
                         "--msa-train/--dialect-train")
    if args.filter_ckpt:
        model = FilterModel(load_checkpoint(args.filter_ckpt),
                            threshold=args.threshold)
    elif args.msa_train and args.dialect_train:
        model_cfg = resolve_model_config(args, len(vocab), num_labels=2)
        model = train_filter(list(ingest([args.msa_train])),
                             list(ingest([args.dialect_train])),
                             vocab, train_cfg, model_config=model_cfg,
                             threshold=args.threshold)
        ckpt_path = out_dir / "filter.ckpt"
        save_checkpoint(model.checkpoint, ckpt_path)
        outputs["filter_checkpoint"] = str(ckpt_path)
        print(f"filter held-out accuracy: {model.held_out_accuracy:.4f}")
    else:
        raise UsageError("filter-corpus needs either --filter-ckpt or both "
                         "--msa-train and --dialect-train")

    dialect, msa, stats, _ = build_corpus(args.input, model, vocab,
                                          max_len=train_cfg.max_len)
    for name, lines in (("dialect.txt", dialect), ("msa.txt", msa)):
        path = out_dir / name
        path.write_text("".join(s + "\n" for s in lines), encoding="utf-8")
        outputs[name.split(".")[0]] = str(path)
    stats_path = out_dir / "stats.txt"
    stats_path.write_text(stats.format() + "\n", encoding="utf-8")
    outputs["stats"] = str(stats_path)
    print(stats.format())

    write_manifest(out_dir, "filter-corpus",
                   {"input": args.input, "vocab": args.vocab,
                    "out": args.out, "filter_ckpt": args.filter_ckpt,
                    "msa_train": args.msa_train,
                    "dialect_train": args.dialect_train,
                    "threshold": args.threshold, "config": args.config},
                   asdict(train_cfg), outputs, started, _now())
    return 0


def _cmd_pretrain(args) -> int:
    started = _now()
    vocab = Vocab.load(args.vocab)
    train_cfg = resolve_train_config(args)
    model_cfg = resolve_model_config(args, len(vocab))
    corpus = [encode(line, vocab, train_cfg.max_len)
              for line in ingest(args.corpus)]
    out_dir = Path(args.out)
    checkpoint, log = pretrain(corpus, train_cfg, model_cfg, vocab,
                               out_dir=out_dir)
    final_path = out_dir / "final.ckpt"
    save_checkpoint(checkpoint, final_path)
    log_path = out_dir / "train_log.txt"
    log.write(log_path)
    write_manifest(out_dir, "pretrain",
                   {"corpus": args.corpus, "vocab": args.vocab,
                    "out": args.out, "config": args.config},
                   {**asdict(train_cfg),
                    **{k: v for k, v in asdict(model_cfg).items()
                       if k in MODEL_KEYS}},
                   {"checkpoint": str(final_path),
                    "train_log": str(log_path)}, started, _now())
    print(f"pretrained {checkpoint.step} steps; final epoch mean loss "
          f"{log.epoch_means[-1]:.4f}")
    return 0


def _cmd_finetune(args) -> int:
    started = _now()
    vocab = Vocab.load(args.vocab)
    train_cfg = resolve_train_config(args)
    start = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.dataset)
    train = [(encode(text, vocab, train_cfg.max_len), label)
             for text, label in dataset.train]
    dev = ([(encode(text, vocab, train_cfg.max_len), label)
            for text, label in dataset.dev] if dataset.dev else None)
    best, log, dev_acc = finetune(start, train, train_cfg,
                                  dataset.num_labels, dev=dev)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    best_path = out_dir / "best.ckpt"
    save_checkpoint(best, best_path)
    log_path = out_dir / "train_log.txt"
    log.write(log_path)
    write_manifest(out_dir, "finetune",
                   {"dataset": args.dataset, "vocab": args.vocab,
                    "ckpt": args.ckpt, "out": args.out,
                    "config": args.config},
                   asdict(train_cfg),
                   {"checkpoint": str(best_path), "train_log": str(log_path)},
                   started, _now())
    print(f"best dev accuracy {dev_acc:.4f} over {len(log.epoch_means)} "
          "epochs")
    return 0


def _cmd_evaluate(args) -> int:
    started = _now()
    vocab = Vocab.load(args.vocab)
    train_cfg = resolve_train_config(args)
    start = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.dataset)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s]
    except ValueError:
        raise UsageError(f"cannot parse --seeds {args.seeds!r}")
    baseline_scores = None
    if args.baseline_report:
        baseline_scores = parse_report_scores(args.baseline_report)
    report = run_multiseed(dataset, start, vocab, train_cfg, seeds,
                           baseline_name=args.baseline_name,
                           baseline_scores=baseline_scores,
                           paired=args.paired)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "eval_report.txt"
    report.write(report_path)
    write_manifest(out_dir, "evaluate",
                   {"dataset": args.dataset, "vocab": args.vocab,
                    "ckpt": args.ckpt, "out": args.out, "seeds": args.seeds,
                    "baseline_report": args.baseline_report,
                    "paired": args.paired or None,
                    "config": args.config},
                   asdict(train_cfg), {"report": str(report_path)},
                   started, _now())
    print("\n".join(report.to_lines()))
    return 0


def _cmd_stats(args) -> int:
    started = _now()
    stats = corpus_stats(args.input)
    print(stats.format())
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        stats_path = out_dir / "stats.txt"
        stats_path.write_text(stats.format() + "\n", encoding="utf-8")
        write_manifest(out_dir, "stats",
                       {"input": args.input, "out": args.out}, {},
                       {"stats": str(stats_path)}, started, _now())
    return 0


_COMMANDS = {
    "train-vocab": _cmd_train_vocab,
    "filter-corpus": _cmd_filter_corpus,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "evaluate": _cmd_evaluate,
    "stats": _cmd_stats,
}


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.subcommand is None:
            raise UsageError(parser.format_usage())
        return _COMMANDS[args.subcommand](args)
    except SystemExit as exc:  # --help / --version
        return 0 if exc.code in (0, None) else 1
    except (UsageError, ConfigError, VocabError) as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
