"""Semi-supervised consistency training and self-supervised IIC training.

Randomness: a run's seed feeds :class:`numpy.random.SeedSequence`, which is
spawned into independent streams (see :data:`STREAMS`) so the order in which
work is consumed within one stream never perturbs another.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .augment import (
    AffineRecord,
    StrongPolicy,
    WeakPolicy,
    apply_affine,
    canvas_validity,
    invert_affine,
    sample_strong,
    strong_augment,
    warp,
)
from .dataset import ImageSample, LabelSplit
from .losses import LossValue, combine, dice_loss, iic_loss, kl_consistency
from .model import SoftPrediction, UNet, save_checkpoint

logger = logging.getLogger(__name__)

PIPELINES = {
    "P1": ("kldiv", "best_supervised"),
    "P2": ("kldiv", "best_final"),
    "P3": ("iid", "best_supervised"),
    "P4": ("iid", "best_final"),
}
POLICY_TRACE = {"best_supervised": "val_sup", "best_final": "val_final"}
STREAMS = ("shuffle", "augment", "validation")
TRACE_COLUMNS = ("epoch", "sup_loss", "unsup_loss", "final_loss", "val_sup", "val_final", "degenerate_flag")
DEGENERATE_FRACTION = 0.1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    """Full description of one training run.

    The defaults follow the semi-supervised setup; use :meth:`semi` and
    :meth:`self_supervised` for the two standard configurations.
    """

    mode: str = "semi"
    unsup_loss: str = "kldiv"
    checkpoint_policy: str = "best_supervised"
    label_ratio: float = 0.1
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_step_factor: float = 0.1
    lr_step_period: int | None = 40
    epochs: int = 100
    batch_size: int = 1
    seed: int = 0
    unsup_weight: float = 1.0
    augment_order: str = "strong_first"
    iic_half_width: int = 0
    self_rot_range: tuple[float, float] = (0.0, 360.0)
    n_classes: int = 2
    n_aux_classes: int | None = None
    base_width: int = 64
    batch_norm: bool = False
    in_channels: int = 1
    val_fraction: float = 0.1
    weak: WeakPolicy = WeakPolicy()
    strong: StrongPolicy = StrongPolicy()

    def __post_init__(self):
        choices = {
            "mode": ("semi", "self"),
            "unsup_loss": ("kldiv", "iid"),
            "checkpoint_policy": tuple(POLICY_TRACE),
            "optimizer": ("adam", "rmsprop"),
            "augment_order": ("strong_first", "weak_first"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if not 0 < self.label_ratio <= 1:
            raise ConfigError("label_ratio must be in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")

    @classmethod
    def semi(cls, **overrides) -> "PipelineConfig":
        return cls(**overrides)

    @classmethod
    def self_supervised(cls, **overrides) -> "PipelineConfig":
        n_classes = overrides.get("n_classes", 2)
        base = dict(
            mode="self",
            unsup_loss="iid",
            checkpoint_policy="best_final",
            label_ratio=1.0,
            optimizer="rmsprop",
            lr=0.01,
            lr_step_period=None,
            epochs=10,
            batch_size=10,
            n_aux_classes=2 * n_classes,
            # without normalization the initial output is near-constant and the MI gradient vanishes
            batch_norm=True,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_pipeline(cls, name: str, **overrides) -> "PipelineConfig":
        try:
            unsup, policy = PIPELINES[name]
        except KeyError:
            raise ConfigError(f"unknown pipeline {name!r}; expected one of {sorted(PIPELINES)}") from None
        return cls(unsup_loss=unsup, checkpoint_policy=policy, **overrides)

    @property
    def pipeline(self) -> str | None:
        for name, pair in PIPELINES.items():
            if pair == (self.unsup_loss, self.checkpoint_policy):
                return name
        return None

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weak"] = dataclasses.asdict(self.weak)
        d["strong"] = dataclasses.asdict(self.strong)
        return json.loads(json.dumps(d))


# -- state -------------------------------------------------------------------


@dataclass
class Checkpoint:
    policy: str
    epoch: int
    path: Path | None = None
    state_dict: dict | None = None

    def load_into(self, net: torch.nn.Module) -> torch.nn.Module:
        if self.state_dict is not None:
            net.load_state_dict(self.state_dict)
        elif self.path is not None:
            payload = torch.load(self.path, map_location="cpu", weights_only=False)
            net.load_state_dict(payload["state_dict"])
        else:
            raise ValueError(f"checkpoint {self.policy} has neither weights nor a path")
        return net


@dataclass
class TrainState:
    epoch: int = 0
    traces: dict[str, list] = field(default_factory=lambda: {c: [] for c in TRACE_COLUMNS})
    initial: dict[str, float] = field(default_factory=dict)
    best_checkpoints: dict[str, Checkpoint] = field(default_factory=dict)
    step_counts: list[dict] = field(default_factory=list)
    extra_traces: dict[str, list] = field(default_factory=dict)

    def record(self, row: dict) -> None:
        for c in TRACE_COLUMNS:
            self.traces[c].append(row.get(c, math.nan))
        for k, v in row.items():
            if k not in TRACE_COLUMNS:
                self.extra_traces.setdefault(k, []).append(v)
        self.epoch = row["epoch"]

    def write_traces(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_COLUMNS)
            if self.initial:
                writer.writerow([0] + [_fmt(self.initial.get(c, math.nan)) for c in TRACE_COLUMNS[1:]])
            for i in range(len(self.traces["epoch"])):
                writer.writerow([_fmt(self.traces[c][i]) for c in TRACE_COLUMNS])
        return path

    def summary(self) -> dict:
        return {
            "epoch": self.epoch,
            "initial": self.initial,
            "best_checkpoints": {
                k: {"epoch": v.epoch, "path": None if v.path is None else str(v.path)}
                for k, v in self.best_checkpoints.items()
            },
            "step_counts": self.step_counts,
            "extra_traces": self.extra_traces,
        }


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{float(v):.6f}"


def select_checkpoint(state: TrainState, policy: str) -> Checkpoint:
    """Return the checkpoint with minimal validation loss for ``policy``.

    Ties go to the earliest epoch.
    """
    if policy not in POLICY_TRACE:
        raise ValueError(f"unknown checkpoint policy {policy!r}")
    trace = [math.inf if v is None or math.isnan(v) else v for v in state.traces[POLICY_TRACE[policy]]]
    if not trace:
        raise ValueError("empty trace: train for at least one epoch")
    best = int(np.argmin(trace))
    epoch = state.traces["epoch"][best]
    ckpt = state.best_checkpoints.get(policy)
    if ckpt is None:
        return Checkpoint(policy, epoch)
    if ckpt.epoch != epoch:
        raise RuntimeError(f"stored {policy} checkpoint is from epoch {ckpt.epoch}, expected {epoch}")
    return ckpt


# -- helpers -----------------------------------------------------------------


class _Streams:
    def __init__(self, seed: int):
        children = np.random.SeedSequence(seed).spawn(len(STREAMS))
        self.seeds = dict(zip(STREAMS, children))
        self.shuffle = np.random.default_rng(self.seeds["shuffle"])
        self.augment = np.random.default_rng(self.seeds["augment"])

    def validation(self) -> np.random.Generator:
        # fresh each epoch, so validation views are identical across epochs
        return np.random.default_rng(self.seeds["validation"])


def _cycled(n: int, total: int, rng: np.random.Generator) -> list[int]:
    order: list[int] = []
    while len(order) < total:
        order.extend(rng.permutation(n).tolist())
    return order[:total]


def _param_dtype(net) -> torch.dtype:
    return next(net.parameters()).dtype


def _images(samples: Sequence[ImageSample], dtype) -> torch.Tensor:
    return torch.as_tensor(np.stack([s.image for s in samples])).to(dtype)


def _make_optimizer(net, cfg: PipelineConfig):
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    else:
        opt = torch.optim.RMSprop(net.parameters(), lr=cfg.lr)
    sched = None
    if cfg.lr_step_period:
        sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.lr_step_period, gamma=cfg.lr_step_factor)
    return opt, sched


def _unsup_fn(cfg: PipelineConfig):
    if cfg.unsup_loss == "kldiv":
        return kl_consistency
    return lambda a, b: iic_loss(a, b, cfg.iic_half_width)


def _paired_views(images: torch.Tensor, cfg: PipelineConfig, rng):
    """Build weak view X', strong view X'' and the record aligning Y'' onto Y'."""
    weak_imgs, strong_imgs, weak_valid, strong_valid, align = [], [], [], [], []
    h, w = images.shape[-2:]
    for img in images:
        w_rec = cfg.weak.sample(rng)
        if cfg.augment_order == "strong_first":
            # X'' = W(S(X)) with both spatial parts in a single resampling
            base, s_rec = sample_strong(img, cfg.strong, rng)
            total = w_rec.compose(s_rec)
            x2 = warp(base, total) if not total.is_identity else base
        else:
            x1_tmp = warp(img, w_rec)
            x2, s_rec = strong_augment(x1_tmp, cfg.strong, rng)
            total = s_rec.compose(w_rec)
        x1 = warp(img, w_rec) if not w_rec.is_identity else img
        weak_imgs.append(x1)
        strong_imgs.append(x2)
        weak_valid.append(canvas_validity(w_rec, h, w))
        strong_valid.append(canvas_validity(total, h, w))
        align.append(total.compose(w_rec.inverse()))
    return (
        torch.stack(weak_imgs),
        torch.stack(strong_imgs),
        torch.stack(weak_valid),
        torch.stack(strong_valid),
        align,
    )


def _align(pred: SoftPrediction, records: Sequence[AffineRecord]) -> SoftPrediction:
    parts = [invert_affine(pred[i], rec) for i, rec in enumerate(records)]
    return SoftPrediction(torch.cat([p.probs for p in parts]), torch.cat([p.validity for p in parts]))


def consistency_loss(net, images: torch.Tensor, cfg: PipelineConfig, rng) -> LossValue:
    """Unsupervised loss between Y' (detached target) and realigned Y''."""
    x1, x2, v1, v2, align = _paired_views(images, cfg, rng)
    with torch.no_grad():
        y1, _ = net(x1)
    y2, _ = net(x2)
    target = SoftPrediction(y1, v1)
    student = _align(SoftPrediction(y2, v2), align)
    return _unsup_fn(cfg)(target, student)


def supervised_loss(net, images: torch.Tensor, masks: torch.Tensor, cfg: PipelineConfig, rng) -> LossValue:
    aug_imgs, aug_masks, valid = [], [], []
    for img, mask in zip(images, masks):
        rec = cfg.weak.sample(rng)
        a_img, a_mask, v = apply_affine(img, rec, mask)
        aug_imgs.append(a_img)
        aug_masks.append(a_mask)
        valid.append(v)
    probs, _ = net(torch.stack(aug_imgs))
    return dice_loss(SoftPrediction(probs, torch.stack(valid)), torch.stack(aug_masks))


def _degenerate(probs_list: Sequence[torch.Tensor], k: int) -> tuple[bool, float]:
    marginal = torch.stack([p.mean(dim=(0, 2, 3)) for p in probs_list]).mean(dim=0)
    ent = float(-(torch.xlogy(marginal, marginal)).sum())
    return ent < DEGENERATE_FRACTION * math.log(k), ent


def _save(policy, epoch, net, cfg, run_dir, stats_path, state: TrainState):
    if run_dir is None:
        snap = {k: v.detach().clone() for k, v in net.state_dict().items()}
        state.best_checkpoints[policy] = Checkpoint(policy, epoch, None, snap)
        return
    path = Path(run_dir) / "checkpoints" / f"{policy}.pt"
    save_checkpoint(path, net, cfg.to_dict(), stats_path, epoch=epoch, policy=policy)
    state.best_checkpoints[policy] = Checkpoint(policy, epoch, path)


def _finish(state: TrainState, run_dir, cfg: PipelineConfig) -> None:
    if run_dir is None:
        return
    run_dir = Path(run_dir)
    state.write_traces(run_dir / "traces.csv")
    (run_dir / "state.json").write_text(json.dumps(state.summary(), indent=2, sort_keys=True) + "\n")


# -- semi-supervised ---------------------------------------------------------


@torch.no_grad()
def _validate_semi(net, val: Sequence[ImageSample], cfg: PipelineConfig, streams: _Streams, with_unsup: bool) -> dict:
    was_training = net.training
    net.eval()
    dtype = _param_dtype(net)
    rng = streams.validation()
    sup, unsup, probs_list = [], [], []
    for sample in val:
        img = _images([sample], dtype)
        probs, _ = net(img)
        probs_list.append(probs)
        sup.append(float(dice_loss(SoftPrediction.full(probs), torch.as_tensor(sample.mask)[None])))
        if with_unsup:
            unsup.append(float(consistency_loss(net, img, cfg, rng)))
    net.train(was_training)
    val_sup = float(np.mean(sup))
    val_unsup = float(np.mean(unsup)) if unsup else 0.0
    flag, ent = _degenerate(probs_list, cfg.n_classes)
    return {
        "val_sup": val_sup,
        "val_unsup": val_unsup,
        "val_final": val_sup + cfg.unsup_weight * val_unsup,
        "degenerate_flag": flag,
        "marginal_entropy": ent,
    }


def semi_train(
    net: UNet,
    train: Sequence[ImageSample],
    split: LabelSplit,
    cfg: PipelineConfig,
    val: Sequence[ImageSample],
    run_dir=None,
    stats_path=None,
) -> TrainState:
    """Train with a supervised Dice stream and an unsupervised consistency stream.

    Every epoch runs ``ceil(max(L, U) / batch_size)`` steps; the smaller
    stream is cycled so both streams take the same number of steps with the
    same batch size. Each step sums the two losses before a single update.
    Checkpoints for both policies are kept.
    """
    if cfg.mode != "semi":
        raise ConfigError("semi_train needs cfg.mode == 'semi'")
    labeled, unlabeled = split.apply(train)
    if not labeled:
        raise ValueError("semi-supervised training needs labeled samples; use self_train for none")
    if not val:
        raise ValueError("semi_train needs validation samples")
    if not unlabeled:
        warnings.warn("no unlabeled samples: training is purely supervised", stacklevel=2)
    streams = _Streams(cfg.seed)
    dtype = _param_dtype(net)
    opt, sched = _make_optimizer(net, cfg)
    with_unsup = bool(unlabeled)
    state = TrainState()
    init = _validate_semi(net, val, cfg, streams, with_unsup)
    state.initial = {"val_sup": init["val_sup"], "val_final": init["val_final"], "degenerate_flag": init["degenerate_flag"]}
    best = {p: math.inf for p in POLICY_TRACE}
    bs = cfg.batch_size
    n_steps = math.ceil(max(len(labeled), len(unlabeled)) / bs)
    label_masks = [s.mask for s in labeled]

    for epoch in range(1, cfg.epochs + 1):
        net.train()
        sup_order = _cycled(len(labeled), n_steps * bs, streams.shuffle)
        unsup_order = _cycled(len(unlabeled), n_steps * bs, streams.shuffle) if with_unsup else []
        counts = {"supervised": 0, "unsupervised": 0, "batch_size": bs}
        sums = {"sup": 0.0, "unsup": 0.0, "final": 0.0}
        for step in range(n_steps):
            idx = sup_order[step * bs : (step + 1) * bs]
            imgs = _images([labeled[i] for i in idx], dtype)
            masks = torch.as_tensor(np.stack([label_masks[i] for i in idx]))
            opt.zero_grad()
            sup = supervised_loss(net, imgs, masks, cfg, streams.augment)
            counts["supervised"] += 1
            unsup = None
            if with_unsup:
                uidx = unsup_order[step * bs : (step + 1) * bs]
                uimgs = _images([unlabeled[i] for i in uidx], dtype)
                unsup = consistency_loss(net, uimgs, cfg, streams.augment)
                counts["unsupervised"] += 1
            total = combine(sup, unsup, cfg.unsup_weight)
            total.value.backward()
            opt.step()
            sums["sup"] += float(sup)
            sums["unsup"] += float(unsup) if unsup is not None else 0.0
            sums["final"] += float(total)
        if sched is not None:
            sched.step()
        metrics = _validate_semi(net, val, cfg, streams, with_unsup)
        row = {
            "epoch": epoch,
            "sup_loss": sums["sup"] / n_steps,
            "unsup_loss": sums["unsup"] / n_steps if with_unsup else math.nan,
            "final_loss": sums["final"] / n_steps,
            **metrics,
        }
        state.record(row)
        state.step_counts.append(counts)
        for policy, key in POLICY_TRACE.items():
            if row[key] < best[policy]:
                best[policy] = row[key]
                _save(policy, epoch, net, cfg, run_dir, stats_path, state)
        logger.info(
            "epoch %d: sup %.4f unsup %.4f val_sup %.4f val_final %.4f",
            epoch, row["sup_loss"], sums["unsup"] / n_steps, row["val_sup"], row["val_final"],
        )
    _finish(state, run_dir, cfg)
    return state


# -- self-supervised ---------------------------------------------------------


def _self_losses(net, images: torch.Tensor, cfg: PipelineConfig, rng) -> tuple[LossValue, LossValue, torch.Tensor]:
    h, w = images.shape[-2:]
    records = [AffineRecord(float(rng.uniform(*cfg.self_rot_range)) % 360.0) for _ in range(len(images))]
    rotated = torch.stack([warp(img, r) if not r.is_identity else img for img, r in zip(images, records)])
    valid = torch.stack([canvas_validity(r, h, w) for r in records])
    main_a, aux_a = net(images)
    main_b, aux_b = net(rotated)
    main = iic_loss(SoftPrediction.full(main_a), _align(SoftPrediction(main_b, valid), records), cfg.iic_half_width)
    aux = iic_loss(SoftPrediction.full(aux_a), _align(SoftPrediction(aux_b, valid), records), cfg.iic_half_width)
    return main, aux, main_a


@torch.no_grad()
def _validate_self(net, val: Sequence[ImageSample], cfg: PipelineConfig, streams: _Streams) -> dict:
    was_training = net.training
    net.eval()
    dtype = _param_dtype(net)
    rng = streams.validation()
    mains, auxs, probs_list = [], [], []
    for start in range(0, len(val), cfg.batch_size):
        imgs = _images(val[start : start + cfg.batch_size], dtype)
        main, aux, probs = _self_losses(net, imgs, cfg, rng)
        mains.append(float(main) * len(imgs))
        auxs.append(float(aux) * len(imgs))
        probs_list.append(probs)
    net.train(was_training)
    n = len(val)
    flag, ent = _degenerate(probs_list, cfg.n_classes)
    val_main, val_aux = sum(mains) / n, sum(auxs) / n
    return {
        "val_final": val_main + val_aux,
        "val_main": val_main,
        "val_aux": val_aux,
        "degenerate_flag": flag,
        "marginal_entropy": ent,
    }


def self_train(
    net: UNet,
    samples: Sequence[ImageSample],
    cfg: PipelineConfig,
    val: Sequence[ImageSample],
    run_dir=None,
    stats_path=None,
) -> TrainState:
    """Maximize mutual information between predictions of an image and its rotation.

    Both heads contribute an IIC term; the sum is minimized. Masks are never
    read. The ``best_final`` checkpoint tracks the validation total.
    """
    if cfg.mode != "self":
        raise ConfigError("self_train needs cfg.mode == 'self'")
    if not getattr(net, "has_aux", False):
        raise ValueError("self-supervised training needs a network with an auxiliary head")
    if not samples or not val:
        raise ValueError("self_train needs training and validation images")
    streams = _Streams(cfg.seed)
    dtype = _param_dtype(net)
    opt, sched = _make_optimizer(net, cfg)
    state = TrainState()
    init = _validate_self(net, val, cfg, streams)
    state.initial = {"val_final": init["val_final"], "degenerate_flag": init["degenerate_flag"]}
    best = math.inf
    bs = cfg.batch_size
    n_steps = math.ceil(len(samples) / bs)
    for epoch in range(1, cfg.epochs + 1):
        net.train()
        order = streams.shuffle.permutation(len(samples))
        sums = {"main": 0.0, "aux": 0.0}
        for step in range(n_steps):
            idx = order[step * bs : (step + 1) * bs]
            imgs = _images([samples[i] for i in idx], dtype)
            opt.zero_grad()
            main, aux, _ = _self_losses(net, imgs, cfg, streams.augment)
            total = combine(main, aux)
            total.value.backward()
            opt.step()
            sums["main"] += float(main)
            sums["aux"] += float(aux)
        if sched is not None:
            sched.step()
        metrics = _validate_self(net, val, cfg, streams)
        row = {
            "epoch": epoch,
            "unsup_loss": (sums["main"] + sums["aux"]) / n_steps,
            "final_loss": (sums["main"] + sums["aux"]) / n_steps,
            "main_loss": sums["main"] / n_steps,
            "aux_loss": sums["aux"] / n_steps,
            **metrics,
        }
        state.record(row)
        state.step_counts.append({"unsupervised": n_steps, "batch_size": bs})
        if row["val_final"] < best:
            best = row["val_final"]
            _save("best_final", epoch, net, cfg, run_dir, stats_path, state)
        logger.info(
            "epoch %d: main %.4f aux %.4f val %.4f degenerate=%s",
            epoch, row["main_loss"], row["aux_loss"], row["val_final"], row["degenerate_flag"],
        )
    _finish(state, run_dir, cfg)
    return state


def build_network(cfg: PipelineConfig, seed: int | None = None) -> UNet:
    """Seeded network construction matching ``cfg``."""
    torch.manual_seed(cfg.seed if seed is None else seed)
    aux = cfg.n_aux_classes if cfg.mode == "self" else None
    return UNet(cfg.in_channels, cfg.n_classes, aux, cfg.base_width, batch_norm=cfg.batch_norm)


@torch.no_grad()
def predict_samples(net, samples: Sequence[ImageSample], batch_size: int = 8, head: str = "main") -> list[np.ndarray]:
    """Per-sample probability maps (K, H, W) for ``head`` in {main, aux}."""
    was_training = net.training
    net.eval()
    dtype = _param_dtype(net)
    out = []
    for start in range(0, len(samples), batch_size):
        main, aux = net(_images(samples[start : start + batch_size], dtype))
        probs = main if head == "main" else aux
        if probs is None:
            raise ValueError("network has no auxiliary head")
        out.extend(p.numpy() for p in probs)
    net.train(was_training)
    return out
