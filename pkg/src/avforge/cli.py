"""Command-line surface: generate / train / eval / score-transcripts / report.

Every command is deterministic given its flags plus the seeds in the config
files; all state lives at the paths named on the command line. Exit codes:
0 success, 1 runtime failure (missing/corrupt files, bad data), 2 usage
error (bad flags, unknown command, task mismatch).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import divergence
from .configio import ConfigError, load_generate_config, load_train_config
from .metrics import write_predictions
from .model import DFD, TFL, CheckpointError, load_checkpoint, save_checkpoint
from .syndata import DatasetFormatError, generate_dataset, read_dataset, write_dataset
from .trainer import TrainLog, evaluate, train

USAGE_ERROR = 2
RUNTIME_ERROR = 1


class UsageError(Exception):
    pass


def _limit_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=n)


def _emit(payload: dict, as_json: bool, text: str) -> None:
    if as_json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(text)


def _fmt(value) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def _report_table(report: dict) -> str:
    lines = []
    for section, entry in report.items():
        if isinstance(entry, dict):
            row = "  ".join(f"{k}={_fmt(v)}" for k, v in entry.items())
            lines.append(f"{section:8s} {row}")
        else:
            lines.append(f"{section:8s} {_fmt(entry)}")
    return "\n".join(lines)


def cmd_generate(args) -> int:
    cfg, counts = load_generate_config(args.config)
    out = Path(args.out)
    written = {}
    start = 0
    for split in ("train", "val", "test"):
        n = counts[split]
        if n <= 0:
            continue
        samples = generate_dataset(cfg, n, start_index=start)
        write_dataset(samples, out / split)
        written[split] = n
        start += n
    payload = {"out": str(out), "splits": written, "seed": cfg.seed}
    _emit(payload, args.json,
          "wrote " + ", ".join(f"{n} {s} samples" for s, n in written.items())
          + f" to {out}")
    return 0


def cmd_train(args) -> int:
    data = Path(args.data)
    train_samples = read_dataset(data / "train")
    val_samples = read_dataset(data / "val")
    if not train_samples or not val_samples:
        raise DatasetFormatError("train/val splits must be non-empty")
    model_cfg, train_cfg = load_train_config(args.config, d0=train_samples[0].d0)
    result = train(model_cfg, train_cfg, train_samples, val_samples,
                   verbose=not args.json)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.ckpt"
    log_path = out / "train_log.jsonl"
    save_checkpoint(result.network, ckpt)
    log_path.write_text(result.log.to_jsonl(), encoding="utf-8")
    payload = {
        "checkpoint": str(ckpt),
        "log": str(log_path),
        "best_epoch": result.best_epoch,
        "best_metric": result.best_metric,
        "epochs_run": len(result.log.records),
        "aborted": result.log.aborted,
    }
    _emit(payload, args.json,
          f"best {train_cfg.task} metric {result.best_metric:.4f} at epoch "
          f"{result.best_epoch} ({len(result.log.records)} epochs run)\n"
          f"checkpoint: {ckpt}\nlog: {log_path}")
    return 0


def cmd_eval(args) -> int:
    network = load_checkpoint(args.checkpoint)
    if args.task != network.config.task:
        raise UsageError(
            f"checkpoint was trained for task '{network.config.task}', "
            f"but --task {args.task} was requested"
        )
    samples = read_dataset(args.data)
    report, records = evaluate(network, samples, args.task, joint=args.joint,
                               level_aggregate=args.level_aggregate)
    if args.dump:
        write_predictions(records, args.dump)
    payload = {"task": args.task, "samples": len(samples), "report": report}
    _emit(payload, args.json, _report_table(report))
    return 0


def cmd_score_transcripts(args) -> int:
    pairs = divergence.read_transcript_pairs(args.pairs)
    if not pairs:
        raise ValueError(f"{args.pairs}: no transcript pairs found")
    granularity = "word" if args.words else "char"
    scores = divergence.score_transcript_pairs(pairs, granularity)
    summary = divergence.corpus_summary(scores)
    payload = {
        "granularity": granularity,
        "scores": scores,
        "summary": summary.to_dict(),
    }
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        for (a, b), score in zip(pairs, scores):
            print(f"{score:.4f}\t{a[:40]}\t{b[:40]}")
        print(
            f"n={summary.count} mean={summary.mean:.4f} median={summary.median:.4f} "
            f"q1={summary.q1:.4f} q3={summary.q3:.4f} "
            f"min={summary.min:.4f} max={summary.max:.4f}"
        )
    return 0


def cmd_report(args) -> int:
    log = TrainLog.from_jsonl(Path(args.log).read_text(encoding="utf-8"))
    if not log.records:
        raise ValueError(f"{args.log}: no epoch records")
    if args.json:
        print(json.dumps({
            "epochs": [
                {"epoch": r.epoch, "train": r.train, "val_metric": r.val_metric,
                 "lr": r.lr, "wall_s": r.wall_s}
                for r in log.records
            ],
            "aborted": log.aborted,
        }, indent=2, sort_keys=True))
        return 0
    train_keys = sorted({k for r in log.records for k in r.train})
    header = ["epoch"] + [f"train.{k}" for k in train_keys] + ["val_metric", "lr", "wall_s"]
    print("  ".join(f"{h:>12s}" for h in header))
    for r in log.records:
        cells = [f"{r.epoch:>12d}"]
        cells += [f"{r.train.get(k, float('nan')):>12.4f}" for k in train_keys]
        cells += [f"{r.val_metric:>12.4f}", f"{r.lr:>12.2e}", f"{r.wall_s:>12.1f}"]
        print("  ".join(cells))
    if log.aborted:
        print("run aborted on non-finite loss; log covers completed epochs")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avforge",
        description="Audio-visual temporal forgery localization toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="directory with train/ and val/")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset split directory")
    p.add_argument("--task", required=True, choices=(DFD, TFL))
    p.add_argument("--joint", action="store_true",
                   help="include the cross-modality joint view (tfl only)")
    p.add_argument("--level-aggregate", choices=("mean", "deepest"),
                   default="mean", dest="level_aggregate",
                   help="how pyramid levels combine before decoding")
    p.add_argument("--dump", help="write decoded proposals to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score-transcripts",
                       help="divergence scores for tab-separated transcript pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--words", action="store_true",
                   help="compare word tokens instead of characters")
    p.set_defaults(func=cmd_score_transcripts)

    p = sub.add_parser("report", help="render a training log as text tables")
    p.add_argument("--log", required=True)
    p.set_defaults(func=cmd_report)

    for sp in sub.choices.values():
        sp.add_argument("--json", action="store_true",
                        help="machine-readable output")
        sp.add_argument("--threads", type=int, default=None,
                        help="cap BLAS worker threads")
    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        _limit_threads(args.threads)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (ConfigError, DatasetFormatError, CheckpointError, FileNotFoundError,
            IsADirectoryError, NotADirectoryError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
