"""Experiment harness: data sources, single runs, label-ratio sweeps and summaries.

A run directory holds ``config.json`` (data source + pipeline config),
``config.txt`` (flat config, reusable with ``--config``), ``norm_stats.txt``,
``traces.csv``, ``state.json``, ``checkpoints/{best_supervised,best_final}.pt``,
``metrics.csv`` and ``reports/``.
"""
from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import config_to_flat
from .dataset import (
    DATASETS,
    DataError,
    ImageSample,
    generate_synthetic,
    load_dataset,
    make_label_split,
    normalize,
    split_holdout,
    NormStats,
)
from .evaluate import matched_mean_iou, mean_iou, render_diff
from .model import UNet, load_checkpoint
from .train import PIPELINES, POLICY_TRACE, PipelineConfig, build_network, predict_samples, select_checkpoint, self_train, semi_train

logger = logging.getLogger(__name__)

SYNTHETIC_PREFIX = "synthetic:"
METRIC_FIELDS = ("kind", "pipeline", "head", "policy", "unsup_loss", "ratio", "seed", "epoch", "mean_iou",
                 "matched_mean_iou", "mean_iou_per_image", "degenerate_flag", "status")


class AllCellsFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class DataSource:
    """Where samples come from and how the held-out test split is drawn.

    ``dataset`` is ``synthetic:<kind>``, a known dataset name (read from
    ``data_root``), or a path to an ``.npz`` file written by ``prepare``.
    A ``data_root`` with ``train/`` and ``test/`` subdirectories uses them as
    splits; otherwise ``test_fraction`` of the samples are held out.
    """

    dataset: str
    data_root: str | None = None
    n_samples: int = 200
    size: tuple[int, int] = (128, 128)
    test_fraction: float = 0.2
    seed: int = 0

    @property
    def slug(self) -> str:
        name = Path(self.dataset).stem if self.dataset.endswith(".npz") else self.dataset
        return name.replace(SYNTHETIC_PREFIX, "synthetic-").replace("/", "-")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["size"] = list(self.size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DataSource":
        d = dict(d)
        d["size"] = tuple(d["size"])
        return cls(**d)


def _holdout_test(samples, source: DataSource):
    train, test = split_holdout(samples, source.test_fraction, source.seed, split="test")
    return train, test


def load_source(source: DataSource, mode: str = "semi") -> tuple[list[ImageSample], list[ImageSample], int]:
    """Return ``(train, test, n_classes)`` for ``source``."""
    name = source.dataset
    if name.startswith(SYNTHETIC_PREFIX):
        samples = generate_synthetic(name[len(SYNTHETIC_PREFIX):], source.n_samples, source.size, source.seed)
        train, test = _holdout_test(samples, source)
        return train, test, 2
    if name.endswith(".npz"):
        path = Path(name)
        if not path.exists():
            raise DataError(f"prepared dataset {path} not found")
        with np.load(path, allow_pickle=False) as data:
            images, masks, ids, splits = data["images"], data["masks"], data["ids"], data["splits"]
            n_classes = int(data["n_classes"])
        samples = [ImageSample(im, m, str(i), str(s)) for im, m, i, s in zip(images, masks, ids, splits)]
        train = [s for s in samples if s.split == "train"]
        test = [s for s in samples if s.split == "test"]
        if not test:
            train, test = _holdout_test(train, source)
        return train, test, n_classes
    if name in DATASETS:
        spec = DATASETS[name]
        if source.data_root is None:
            raise DataError(f"dataset {name} needs --data-root")
        root = Path(source.data_root)
        if (root / "train").is_dir() and (root / "test").is_dir():
            train = load_dataset(root / "train", spec, mode)
            test = load_dataset(root / "test", spec, mode, split="test")
        else:
            train, test = _holdout_test(load_dataset(root, spec, mode), source)
        return train, test, spec.class_count
    raise DataError(f"unknown dataset {name!r}: use synthetic:<kind>, one of {sorted(DATASETS)}, or a .npz path")


def prepare(source: DataSource, out_path, mode: str = "semi") -> Path:
    """Materialize a data source as an ``.npz`` with images, masks, ids and splits."""
    train, test, n_classes = load_source(source, mode)
    samples = train + test
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        out_path,
        images=np.stack([s.image for s in samples]),
        masks=np.stack([s.diagnostic_mask for s in samples]),
        ids=np.array([s.id for s in samples]),
        splits=np.array([s.split for s in samples]),
        n_classes=np.array(n_classes),
    )
    return out_path


def _prepare_splits(source: DataSource, cfg: PipelineConfig):
    train, test, n_classes = load_source(source, cfg.mode)
    if n_classes != cfg.n_classes:
        raise DataError(f"dataset has {n_classes} classes but config has n_classes={cfg.n_classes}")
    train, val = split_holdout(train, cfg.val_fraction, cfg.seed)
    train, rest, stats = normalize(train, val + test)
    return train, rest[: len(val)], rest[len(val):], stats


def _write_run_config(run_dir: Path, source: DataSource, cfg: PipelineConfig, kind: str) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    payload = {"kind": kind, "data": source.to_dict(), "config": cfg.to_dict()}
    (run_dir / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    (run_dir / "config.txt").write_text(config_to_flat(cfg))


def _write_metrics(run_dir: Path, rows: Sequence[dict]) -> Path:
    path = run_dir / "metrics.csv"
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row.get(k, "")) for k in METRIC_FIELDS})
    return path


def _cell(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.6f}"
    return v


def _hard(probs_list):
    return [p.argmax(axis=0) for p in probs_list]


def run_semi(source: DataSource, cfg: PipelineConfig, run_dir) -> list[dict]:
    """Train one semi-supervised run and evaluate both checkpoint policies on the test split."""
    run_dir = Path(run_dir)
    train, val, test, stats = _prepare_splits(source, cfg)
    _write_run_config(run_dir, source, cfg, "semi")
    stats.save(run_dir / "norm_stats.txt")
    split = make_label_split(train, cfg.label_ratio, cfg.seed)
    net = build_network(cfg)
    state = semi_train(net, train, split, cfg, val, run_dir=run_dir, stats_path="../norm_stats.txt")
    gts = [s.diagnostic_mask for s in test]
    rows = []
    for policy in POLICY_TRACE:
        ckpt = select_checkpoint(state, policy)
        ckpt.load_into(net)
        preds = _hard(predict_samples(net, test))
        report = mean_iou(preds, gts, range(cfg.n_classes))
        pipeline = next(p for p, pair in PIPELINES.items() if pair == (cfg.unsup_loss, policy))
        rows.append({
            "kind": "semi", "pipeline": pipeline, "head": "main", "policy": policy,
            "unsup_loss": cfg.unsup_loss, "ratio": cfg.label_ratio, "seed": cfg.seed,
            "epoch": ckpt.epoch, "mean_iou": report.mean_iou,
            "mean_iou_per_image": report.mean_iou_per_image,
            "degenerate_flag": state.traces["degenerate_flag"][ckpt.epoch - 1], "status": "ok",
        })
        render_diff(preds[0], gts[0], test[0].image, run_dir / "reports" / f"diff_{policy}_{test[0].id}.png")
    _write_metrics(run_dir, rows)
    return rows


def run_self(source: DataSource, cfg: PipelineConfig, run_dir) -> list[dict]:
    """Train one self-supervised run; evaluate the main head directly and the auxiliary head by cluster matching."""
    run_dir = Path(run_dir)
    train, val, test, stats = _prepare_splits(source, cfg)
    _write_run_config(run_dir, source, cfg, "self")
    stats.save(run_dir / "norm_stats.txt")
    net = build_network(cfg)
    state = self_train(net, train, cfg, val, run_dir=run_dir, stats_path="../norm_stats.txt")
    ckpt = select_checkpoint(state, "best_final")
    ckpt.load_into(net)
    gts = [s.diagnostic_mask for s in test]
    main = _hard(predict_samples(net, test, head="main"))
    aux = _hard(predict_samples(net, test, head="aux"))
    k = cfg.n_classes
    direct = mean_iou(main, gts, range(k))
    main_matched = matched_mean_iou(main, gts, k, k)
    aux_matched = matched_mean_iou(aux, gts, cfg.n_aux_classes, k)
    flag = state.traces["degenerate_flag"][ckpt.epoch - 1]
    common = {"kind": "self", "policy": "best_final", "unsup_loss": "iid", "seed": cfg.seed,
              "epoch": ckpt.epoch, "degenerate_flag": flag, "status": "ok"}
    rows = [
        {**common, "head": "main", "mean_iou": direct.mean_iou, "matched_mean_iou": main_matched.mean_iou,
         "mean_iou_per_image": direct.mean_iou_per_image},
        {**common, "head": "auxiliary", "mean_iou": aux_matched.mean_iou, "matched_mean_iou": aux_matched.mean_iou,
         "mean_iou_per_image": aux_matched.mean_iou_per_image},
    ]
    _write_metrics(run_dir, rows)
    write_selftrain_table(run_dir / "reports" / "selftrain.csv", {source.dataset: rows})
    return rows


# -- sweeps ------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentMatrix:
    """Pipelines x label ratios x seeds on one dataset.

    Pipelines that differ only in checkpoint policy (P1/P2, P3/P4) share one
    training run; each cell is the pair (run directory, policy).
    """

    dataset: str
    pipelines: tuple[str, ...] = tuple(PIPELINES)
    ratios: tuple[float, ...] = (0.1, 0.25, 0.5)
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        unknown = set(self.pipelines) - set(PIPELINES)
        if unknown:
            raise ValueError(f"unknown pipelines {sorted(unknown)}")
        if not self.pipelines or not self.ratios or not self.seeds:
            raise ValueError("matrix needs at least one pipeline, ratio and seed")

    def cells(self) -> list[tuple[str, float, int]]:
        return list(itertools.product(self.pipelines, self.ratios, self.seeds))

    def trainings(self) -> list[tuple[str, float, int]]:
        seen = {}
        for pipeline, ratio, seed in self.cells():
            key = (PIPELINES[pipeline][0], ratio, seed)
            seen.setdefault(key, None)
        return list(seen)


def run_name(slug: str, unsup: str, ratio: float, seed: int) -> str:
    return f"{slug}-{unsup}-r{ratio:.2f}-s{seed}"


def run_experiment(matrix: ExperimentMatrix, out_dir, base_cfg: PipelineConfig, source: DataSource | None = None) -> Path:
    """Run every training of ``matrix`` and write ``summary.csv`` under ``out_dir``.

    Failed trainings are recorded in ``cells.csv`` and skipped; if all fail
    :class:`AllCellsFailed` is raised after the summary is written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    source = source or DataSource(matrix.dataset)
    (out_dir / "matrix.json").write_text(json.dumps(dataclasses.asdict(matrix), indent=2, sort_keys=True) + "\n")
    status = {}
    for unsup, ratio, seed in matrix.trainings():
        name = run_name(source.slug, unsup, ratio, seed)
        cfg = base_cfg.replace(unsup_loss=unsup, label_ratio=ratio, seed=seed, mode="semi")
        try:
            run_semi(source, cfg, out_dir / name)
            status[(unsup, ratio, seed)] = "ok"
        except Exception as exc:  # a failed cell must not stop the sweep
            logger.exception("run %s failed", name)
            status[(unsup, ratio, seed)] = f"failed: {type(exc).__name__}: {exc}"
    with (out_dir / "cells.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pipeline", "ratio", "seed", "run", "status"])
        for pipeline, ratio, seed in matrix.cells():
            unsup = PIPELINES[pipeline][0]
            writer.writerow([pipeline, f"{ratio:g}", seed, run_name(source.slug, unsup, ratio, seed), status[(unsup, ratio, seed)]])
    summary = summarize(out_dir)
    if all(s != "ok" for s in status.values()):
        raise AllCellsFailed("every cell of the sweep failed")
    return summary


def _read_runs(out_dir: Path) -> list[tuple[dict, list[dict]]]:
    runs = []
    for cfg_path in sorted(out_dir.glob("*/config.json")):
        metrics = cfg_path.parent / "metrics.csv"
        if not metrics.exists():
            continue
        with metrics.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        runs.append((json.loads(cfg_path.read_text()), rows))
    return runs


def _ratio_label(ratio: float) -> str:
    return f"{ratio * 100:g}%"


def summarize(out_dir) -> Path:
    """Rebuild ``summary.csv``, ``bars.csv`` and ``selftrain.csv`` from run directories.

    ``summary.csv`` has one block per dataset, one row per label ratio and one
    column per pipeline; values are test mean IoU averaged over seeds.
    """
    out_dir = Path(out_dir)
    matrix_path = out_dir / "matrix.json"
    wanted = None
    if matrix_path.exists():
        m = json.loads(matrix_path.read_text())
        wanted = (tuple(m["pipelines"]), tuple(float(r) for r in m["ratios"]), tuple(int(s) for s in m["seeds"]))
    semi = defaultdict(list)
    self_rows = defaultdict(list)
    for run_cfg, rows in _read_runs(out_dir):
        dataset = run_cfg["data"]["dataset"]
        for row in rows:
            if row["status"] != "ok":
                continue
            if row["kind"] == "semi":
                ratio, seed = float(row["ratio"]), int(row["seed"])
                if wanted and (row["pipeline"] not in wanted[0] or ratio not in wanted[1] or seed not in wanted[2]):
                    continue
                semi[(dataset, ratio, row["pipeline"])].append(float(row["mean_iou"]))
            elif row["kind"] == "self":
                self_rows[dataset].append(row)
    pipelines = list(wanted[0]) if wanted else sorted({k[2] for k in semi})
    datasets = sorted({k[0] for k in semi})
    summary = out_dir / "summary.csv"
    with summary.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["dataset", "ratio"] + pipelines)
        for dataset in datasets:
            ratios = sorted({k[1] for k in semi if k[0] == dataset})
            for ratio in ratios:
                cells = []
                for p in pipelines:
                    vals = semi.get((dataset, ratio, p))
                    cells.append(f"{np.mean(vals):.4f}" if vals else "")
                writer.writerow([dataset, _ratio_label(ratio)] + cells)
    with (out_dir / "bars.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["dataset", "pipeline", "ratio", "mean_iou"])
        for (dataset, ratio, p), vals in sorted(semi.items()):
            writer.writerow([dataset, p, _ratio_label(ratio), f"{np.mean(vals):.4f}"])
    if self_rows:
        write_selftrain_table(out_dir / "selftrain.csv", self_rows)
    return summary


def write_selftrain_table(path, rows_by_dataset: dict[str, list[dict]]) -> Path:
    """Two-row table: main head and auxiliary head mean IoU per dataset."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    datasets = sorted(rows_by_dataset)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["head"] + datasets)
        for head, label in (("main", "main head"), ("auxiliary", "auxiliary head")):
            cells = []
            for d in datasets:
                vals = [float(r["mean_iou"]) for r in rows_by_dataset[d] if r["head"] == head]
                cells.append(f"{np.mean(vals):.4f}" if vals else "")
            writer.writerow([label] + cells)
    return path


def run_selftrain(source: DataSource, n_classes: int, n_aux_classes: int, seed: int, out_dir,
                  base_cfg: PipelineConfig | None = None) -> Path:
    """Self-supervised training plus the two-row head comparison table."""
    base_cfg = base_cfg or PipelineConfig.self_supervised()
    cfg = base_cfg.replace(mode="self", n_classes=n_classes, n_aux_classes=n_aux_classes, seed=seed)
    run_dir = Path(out_dir) / f"{source.slug}-self-k{n_classes}-a{n_aux_classes}-s{seed}"
    run_self(source, cfg, run_dir)
    return run_dir / "reports" / "selftrain.csv"


# -- checkpoint evaluation ---------------------------------------------------


def load_for_eval(checkpoint) -> tuple[UNet, dict, NormStats | None]:
    net, payload = load_checkpoint(checkpoint)
    stats = None
    if payload.get("stats_path"):
        stats_path = (Path(checkpoint).parent / payload["stats_path"]).resolve()
        if stats_path.exists():
            stats = NormStats.load(stats_path)
    return net, payload, stats


def evaluate_checkpoint(checkpoint, source: DataSource, head: str = "main", mode: str = "semi"):
    """Score a checkpoint on the test split of ``source``.

    Returns ``(report, test_samples, hard_predictions)``. Auxiliary-head (and
    any self-supervised) predictions are matched to classes by overlap.
    """
    net, payload, stats = load_for_eval(checkpoint)
    _, test, n_classes = load_source(source, mode)
    if stats is not None:
        test = [s.with_image(stats.apply(s.image)) for s in test]
    preds = _hard(predict_samples(net, test, head=head))
    gts = [s.diagnostic_mask for s in test]
    k = net.n_classes if head == "main" else net.aux_head.out_channels
    if head == "aux" or net.has_aux:
        report = matched_mean_iou(preds, gts, max(k, n_classes), n_classes)
    else:
        report = mean_iou(preds, gts, range(n_classes))
    return report, test, preds
