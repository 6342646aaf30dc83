"""Command-line entry point: ``adaptercl <verb> [options]``.

Exit codes: 0 success, 1 configuration or input error, 2 runtime assertion
failure (freeze violation, failed pretraining threshold).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .backbone import PretrainingError, load_backbone, save_backbone
from .checkpoint import CheckpointError
from .data import DatasetFormatError, write_dataset_file
from .engine import MemoryBudgetError, evaluate_round, load_model
from .runner import (
    ABLATION_MATRIX,
    ConfigError,
    RunLog,
    load_config,
    load_run_data,
    parse_override,
    prepare,
    read_run_log,
    run_ablation,
    run_baseline,
    run_continual,
    summarize,
    write_metrics_csv,
)

log = logging.getLogger("adaptercl")

EXIT_OK, EXIT_CONFIG, EXIT_ASSERT = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; here that code means an assertion failure."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, seed_required: bool = False) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key, e.g. engine.adapter_epochs=30"
    )
    p.add_argument("--seed", type=int, required=seed_required)
    p.add_argument("--backbone", help="pretrained backbone checkpoint (skips pretraining)")


def _config(args):
    overrides = [parse_override(s) for s in args.set]
    if getattr(args, "seed", None) is not None:
        overrides.append(("seed", args.seed))
    return load_config(args.config, overrides)


def _prepared(args, cfg):
    bb = load_backbone(args.backbone, cfg.backbone) if getattr(args, "backbone", None) else None
    prep = prepare(cfg, bb)
    if prep.pretrain is not None:
        log.info("pretraining held-out accuracy %.3f", prep.pretrain.heldout_accuracy)
    return prep


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fresh_log(out: Path, name: str) -> RunLog:
    path = out / name
    if path.exists():
        path.unlink()
    return RunLog(path)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    prep_data = load_run_data(cfg)
    out = _out_dir(args.out)
    write_dataset_file(out / "train.acld", prep_data.x_train, prep_data.y_train)
    write_dataset_file(out / "test.acld", prep_data.x_test, prep_data.y_test)
    print(json.dumps({"train": str(out / "train.acld"), "test": str(out / "test.acld"), "classes": prep_data.classes}))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    prep = prepare(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_backbone(prep.backbone, out)
    print(json.dumps({"checkpoint": str(out), "checksum": prep.backbone.checksum(), **asdict(prep.pretrain)}))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    prep = _prepared(args, cfg)
    reports = run_continual(
        cfg, prep, log=_fresh_log(out, "run_log.jsonl"), checkpoint_dir=None if args.no_checkpoints else out
    )
    write_metrics_csv(out / "metrics.csv", reports)
    for rep in reports:
        print(f"round {rep.round}: mcr {rep.mcr:.4f} head-selection {rep.head_selection_acc:.4f}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    prep = _prepared(args, cfg)
    reports = run_baseline(args.kind, cfg, prep, _fresh_log(out, f"{args.kind}_log.jsonl"), not args.last_only)
    write_metrics_csv(out / f"{args.kind}_metrics.csv", reports)
    for rep in reports:
        print(f"{args.kind} round {rep.round}: mcr {rep.mcr:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    out = _out_dir(args.out)
    runlog = _fresh_log(out, "ablation_log.jsonl")
    seeds = args.seeds if args.seeds else [None]
    all_reports = []
    for seed in seeds:
        args.seed = seed
        cfg = _config(args)
        prep = _prepared(args, cfg)
        result = run_ablation(cfg, args.rows, prep, runlog)
        for name, reps in result.items():
            all_reports += reps
            print(f"seed {cfg.seed} {name}: last-round mcr {reps[-1].mcr:.4f}")
    write_metrics_csv(out / "ablation_metrics.csv", all_reports)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    model = load_model(args.model)
    data = load_run_data(cfg)
    metrics = evaluate_round(model, data.x_test, data.y_test, debug=cfg.debug)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_summary(args) -> int:
    records = [rec for path in args.logs for rec in read_run_log(path)]
    rows = summarize(records)
    if args.last_only:
        last = {}
        for row in rows:
            last[row["run"]] = row
        rows = list(last.values())
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adaptercl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write the synthetic dataset as binary tensor files")
    _common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain the backbone on the base classes and save it")
    _common(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", help="run every continual-learning round")
    _common(p, seed_required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-checkpoints", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("baseline", help="naive sequential fine-tuning or joint training")
    _common(p)
    p.add_argument("--kind", choices=["naive", "joint"], required=True)
    p.add_argument("--last-only", action="store_true", help="joint: train only the final round")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("ablate", help="run the ablation matrix")
    _common(p)
    p.add_argument("--seeds", type=int, nargs="+", help="run every row for each of these seeds")
    p.add_argument("--rows", nargs="+", choices=list(ABLATION_MATRIX), default=list(ABLATION_MATRIX))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a saved model on the test split")
    _common(p)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("summary", help="mean/std of MCR across seeds from run logs")
    p.add_argument("logs", nargs="+")
    p.add_argument("--last-only", action="store_true")
    p.set_defaults(func=cmd_summary)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, MemoryBudgetError, DatasetFormatError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AssertionError, PretrainingError, FloatingPointError) as exc:
        print(f"assertion failure: {exc}", file=sys.stderr)
        return EXIT_ASSERT


if __name__ == "__main__":
    sys.exit(main())
