"""Command line entry point: ``semiseg <verb> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 every sweep
cell failed.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .config import load_config
from .dataset import DataError
from .evaluate import render_diff
from .experiment import (
    AllCellsFailed,
    DataSource,
    ExperimentMatrix,
    evaluate_checkpoint,
    prepare,
    run_experiment,
    run_name,
    run_selftrain,
    run_semi,
    summarize,
)
from .train import PIPELINES, ConfigError, PipelineConfig

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ALL_FAILED = 0, 2, 3, 4

log = logging.getLogger("semiseg")


def _size(text: str) -> tuple[int, int]:
    parts = text.lower().replace("*", "x").split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}") from None
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2:
        raise argparse.ArgumentTypeError(f"bad size {text!r}")
    return dims


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", required=True, help="synthetic:blobs, synthetic:two-intensity, a dataset name, or a .npz file")
    p.add_argument("--data-root", help="directory with images/ and masks/ for named datasets")
    p.add_argument("--n-samples", type=int, default=200, help="synthetic sample count")
    p.add_argument("--size", type=_size, default=(128, 128), help="synthetic image size, e.g. 128 or 128x128")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--data-seed", type=int, default=0)


def _add_run_args(p: argparse.ArgumentParser, multi: bool = False) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", type=Path, default=Path("runs"))
    if multi:
        p.add_argument("--seed", type=int, nargs="+", default=[0])
    else:
        p.add_argument("--seed", type=int, default=0)


def _source(args) -> DataSource:
    return DataSource(args.dataset, args.data_root, args.n_samples, tuple(args.size), args.test_fraction, args.data_seed)


def _base_config(args, base: PipelineConfig) -> PipelineConfig:
    cfg = load_config(args.config, base) if args.config else base
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    return cfg


def cmd_prepare(args) -> int:
    path = prepare(_source(args), args.out, args.mode)
    print(path)
    return EXIT_OK


def cmd_train_semi(args) -> int:
    unsup, policy = PIPELINES[args.pipeline]
    cfg = _base_config(args, PipelineConfig.semi())
    cfg = cfg.replace(unsup_loss=unsup, checkpoint_policy=policy, label_ratio=args.ratio, seed=args.seed)
    source = _source(args)
    run_dir = args.out / run_name(source.slug, unsup, args.ratio, args.seed)
    rows = run_semi(source, cfg, run_dir)
    for row in rows:
        print(f"{row['pipeline']} ({row['policy']}, epoch {row['epoch']}): mean IoU {row['mean_iou']:.4f}")
    print(run_dir)
    return EXIT_OK


def cmd_train_self(args) -> int:
    cfg = _base_config(args, PipelineConfig.self_supervised(n_classes=args.classes))
    aux = args.aux_classes or cfg.n_aux_classes or 2 * args.classes
    table = run_selftrain(_source(args), args.classes, aux, args.seed, args.out, cfg)
    print(table.read_text(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    report, _, _ = evaluate_checkpoint(args.checkpoint, _source(args), args.head, args.mode)
    row = report.as_row()
    out = args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
        writer.writeheader()
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    print(f"mean IoU {report.mean_iou:.4f} ({report.aggregation}-aggregated, {report.n_samples} samples)")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _base_config(args, PipelineConfig.semi())
    matrix = ExperimentMatrix(args.dataset, tuple(args.pipeline), tuple(args.ratio), tuple(args.seed))
    try:
        summary = run_experiment(matrix, args.out, cfg, _source(args))
    except AllCellsFailed as exc:
        log.error("%s", exc)
        return EXIT_ALL_FAILED
    print(summary.read_text(), end="")
    return EXIT_OK


def cmd_summarize(args) -> int:
    print(summarize(args.out).read_text(), end="")
    return EXIT_OK


def cmd_render(args) -> int:
    _, test, preds = evaluate_checkpoint(args.checkpoint, _source(args), args.head, args.mode)
    args.out.mkdir(parents=True, exist_ok=True)
    for sample, pred in list(zip(test, preds))[: args.count]:
        print(render_diff(pred, sample.diagnostic_mask, sample.image, args.out / f"diff_{sample.id}.png"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semiseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("prepare", help="ingest or synthesize a dataset into an .npz file")
    _add_data_args(p)
    p.add_argument("--mode", choices=("semi", "self"), default="semi")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train-semi", help="one semi-supervised run (both checkpoint policies)")
    _add_data_args(p)
    _add_run_args(p)
    p.add_argument("--ratio", type=float, default=0.1)
    p.add_argument("--pipeline", choices=sorted(PIPELINES), default="P1")
    p.set_defaults(func=cmd_train_semi)

    p = sub.add_parser("train-self", help="self-supervised run with main/auxiliary head table")
    _add_data_args(p)
    _add_run_args(p)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--aux-classes", type=int)
    p.set_defaults(func=cmd_train_self)

    p = sub.add_parser("eval", help="score a checkpoint on the test split")
    _add_data_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--head", choices=("main", "aux"), default="main")
    p.add_argument("--mode", choices=("semi", "self"), default="semi")
    p.add_argument("--out", type=Path, default=Path("metrics.csv"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="pipelines x label ratios x seeds")
    _add_data_args(p)
    _add_run_args(p, multi=True)
    p.add_argument("--pipeline", nargs="+", choices=sorted(PIPELINES), default=sorted(PIPELINES))
    p.add_argument("--ratio", type=float, nargs="+", default=[0.1, 0.25, 0.5])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("summarize", help="rebuild summary tables from run directories")
    p.add_argument("--out", type=Path, default=Path("runs"))
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("render", help="write original/GT/prediction/difference panels")
    _add_data_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--head", choices=("main", "aux"), default="main")
    p.add_argument("--mode", choices=("semi", "self"), default="semi")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--out", type=Path, default=Path("reports"))
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, DataError):
            log.error("data error: %s", exc)
            return EXIT_DATA
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
