"""Dice, KL consistency and dense mutual-information (IIC) losses."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .model import SoftPrediction

DICE_SMOOTH = 1.0
LOG_EPS = 1e-8


@dataclass
class LossValue:
    value: torch.Tensor
    n_pixels: int

    def __float__(self) -> float:
        return float(self.value.detach())

    def item(self) -> float:
        return float(self)


def _as_pred(pred) -> SoftPrediction:
    if isinstance(pred, SoftPrediction):
        return pred
    probs = torch.as_tensor(pred)
    if probs.dim() == 3:
        probs = probs.unsqueeze(0)
    return SoftPrediction.full(probs)


def _as_target(target, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(target, device=like.device).long()
    if t.dim() == 2:
        t = t.unsqueeze(0)
    return t


def dice_loss(pred, target, smooth: float = DICE_SMOOTH) -> LossValue:
    """Soft Dice loss averaged over the foreground classes ``1..K-1``.

    Sums run over all valid pixels of the batch.
    """
    pred = _as_pred(pred)
    probs = pred.probs
    target = _as_target(target, probs)
    if target.shape != pred.validity.shape:
        raise ValueError(f"target shape {tuple(target.shape)} does not match prediction {tuple(pred.validity.shape)}")
    k = probs.shape[1]
    if target.numel() and (target.min() < 0 or target.max() >= k):
        raise ValueError(f"target class ids must be in [0, {k})")
    valid = pred.validity
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("no valid pixels")
    onehot = F.one_hot(target, k).permute(0, 3, 1, 2).to(probs.dtype)
    vmask = valid.unsqueeze(1).to(probs.dtype)
    p = (probs * vmask)[:, 1:]
    t = (onehot * vmask)[:, 1:]
    inter = (p * t).sum(dim=(0, 2, 3))
    denom = p.sum(dim=(0, 2, 3)) + t.sum(dim=(0, 2, 3))
    per_class = 1.0 - (2.0 * inter + smooth) / (denom + smooth)
    return LossValue(per_class.mean(), n_valid)


def kl_consistency(target_pred, student_pred) -> LossValue:
    """Mean over jointly valid pixels of KL(target || student).

    ``target_pred`` is detached; ``student_pred`` is clamped below at 1e-8.
    """
    tp, sp = _as_pred(target_pred), _as_pred(student_pred)
    if tp.probs.shape != sp.probs.shape:
        raise ValueError(f"shape mismatch {tuple(tp.probs.shape)} vs {tuple(sp.probs.shape)}")
    valid = tp.validity & sp.validity
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("no valid pixels")
    t = tp.probs.detach()
    s = sp.probs.clamp_min(LOG_EPS)
    per_pixel = (torch.xlogy(t, t) - t * torch.log(s)).sum(dim=1)
    value = (per_pixel * valid.to(per_pixel.dtype)).sum() / n_valid
    return LossValue(value, n_valid)


def joint_distribution(pred_a, pred_b, half_width: int = 0) -> tuple[torch.Tensor, int]:
    """Symmetrized joint class distribution of paired pixels.

    With ``half_width > 0`` pixel pairs at every displacement within the
    window are pooled. Returns ``(P, n_pairs)``.
    """
    a, b = _as_pred(pred_a), _as_pred(pred_b)
    if a.probs.shape[1] != b.probs.shape[1]:
        raise ValueError(f"class count mismatch: {a.probs.shape[1]} vs {b.probs.shape[1]}")
    if a.probs.shape != b.probs.shape:
        raise ValueError(f"shape mismatch {tuple(a.probs.shape)} vs {tuple(b.probs.shape)}")
    h, w = a.probs.shape[-2:]
    total = None
    count = 0
    r = half_width
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            ys_a, ys_b = slice(max(0, dy), h + min(0, dy)), slice(max(0, -dy), h + min(0, -dy))
            xs_a, xs_b = slice(max(0, dx), w + min(0, dx)), slice(max(0, -dx), w + min(0, -dx))
            pa = a.probs[:, :, ys_a, xs_a]
            pb = b.probs[:, :, ys_b, xs_b]
            valid = (a.validity[:, ys_a, xs_a] & b.validity[:, ys_b, xs_b]).to(pa.dtype)
            joint = torch.einsum("nihw,njhw,nhw->ij", pa, pb, valid)
            total = joint if total is None else total + joint
            count += int(valid.sum())
    if count == 0:
        raise ValueError("no valid pixels")
    p = total / count
    return (p + p.T) / 2.0, count


def mutual_information(joint: torch.Tensor) -> torch.Tensor:
    pi = joint.sum(dim=1, keepdim=True)
    pj = joint.sum(dim=0, keepdim=True)
    log_ratio = (
        torch.log(joint.clamp_min(LOG_EPS)) - torch.log(pi.clamp_min(LOG_EPS)) - torch.log(pj.clamp_min(LOG_EPS))
    )
    return (joint * log_ratio).sum()


def iic_loss(pred_a, pred_b, half_width: int = 0) -> LossValue:
    """Negative mutual information between the cluster assignments of paired pixels."""
    joint, n = joint_distribution(pred_a, pred_b, half_width)
    return LossValue(-mutual_information(joint), n)


def combine(supervised: LossValue, unsupervised: LossValue | None, weight: float = 1.0) -> LossValue:
    """``supervised + weight * unsupervised``."""
    if unsupervised is None:
        return supervised
    for part in (supervised, unsupervised):
        if not torch.isfinite(torch.as_tensor(part.value)).all():
            raise ValueError("loss terms must be finite")
    return LossValue(supervised.value + weight * unsupervised.value, supervised.n_pixels + unsupervised.n_pixels)


def marginal_entropy(pred) -> float:
    """Entropy of the mean class distribution over valid pixels."""
    pred = _as_pred(pred)
    valid = pred.validity.unsqueeze(1).to(pred.probs.dtype)
    marginal = (pred.probs.detach() * valid).sum(dim=(0, 2, 3)) / valid.sum().clamp_min(1)
    return float(-(torch.xlogy(marginal, marginal)).sum())
