"""IoU metrics, cluster-to-class matching, BCE reporting and difference images."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import SoftPrediction

BCE_EPS = 1e-8


@dataclass
class MetricsReport:
    """Evaluation summary.

    ``mean_iou`` uses dataset-wide aggregation (intersections and unions are
    summed over all samples before dividing), averaged over classes.
    ``mean_iou_per_image`` averages per-image class-mean IoUs instead.
    """

    mean_iou: float
    per_class_iou: dict[int, float]
    mean_iou_per_image: float
    n_samples: int
    aggregation: str = "dataset"
    assignment: dict[int, int] | None = None
    bce: float | None = None

    def as_row(self) -> dict:
        row = {
            "mean_iou": self.mean_iou,
            "mean_iou_per_image": self.mean_iou_per_image,
            "n_samples": self.n_samples,
            "aggregation": self.aggregation,
        }
        for c, v in sorted(self.per_class_iou.items()):
            row[f"iou_class{c}"] = v
        if self.bce is not None:
            row["bce"] = self.bce
        return row


def _check_pair(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def iou(pred_mask, gt_mask, class_id: int) -> float:
    """Jaccard index of the pixel sets of ``class_id``; 1.0 if both are empty."""
    pred, gt = _check_pair(pred_mask, gt_mask)
    a, b = pred == class_id, gt == class_id
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def mean_iou(preds: Sequence, gts: Sequence, classes: Iterable[int]) -> MetricsReport:
    """Class-mean IoU over a list of hard masks."""
    if len(preds) != len(gts):
        raise ValueError("preds and gts must have equal length")
    if len(preds) == 0:
        raise ValueError("cannot score an empty list")
    classes = sorted(set(int(c) for c in classes))
    inter = dict.fromkeys(classes, 0)
    union = dict.fromkeys(classes, 0)
    per_image = []
    for p, g in zip(preds, gts):
        p, g = _check_pair(p, g)
        scores = []
        for c in classes:
            a, b = p == c, g == c
            i, u = np.count_nonzero(a & b), np.count_nonzero(a | b)
            inter[c] += i
            union[c] += u
            scores.append(1.0 if u == 0 else i / u)
        per_image.append(float(np.mean(scores)))
    per_class = {c: (1.0 if union[c] == 0 else inter[c] / union[c]) for c in classes}
    return MetricsReport(
        mean_iou=float(np.mean(list(per_class.values()))),
        per_class_iou=per_class,
        mean_iou_per_image=float(np.mean(per_image)),
        n_samples=len(preds),
    )


def match_clusters(preds: Sequence, gts: Sequence, n_clusters: int, n_classes: int) -> dict[int, int]:
    """Map every predicted cluster to the class it overlaps most, over the whole set.

    Several clusters may map to one class; clusters with no pixels map to 0.
    Ties go to the lowest class id.
    """
    if n_clusters < n_classes:
        raise ValueError("need at least as many clusters as classes")
    if isinstance(preds, np.ndarray) and preds.ndim == 2:
        preds, gts = [preds], [gts]
    overlap = np.zeros((n_clusters, n_classes), dtype=np.int64)
    for p, g in zip(preds, gts):
        p, g = _check_pair(p, g)
        np.add.at(overlap, (p.ravel().astype(np.int64), g.ravel().astype(np.int64)), 1)
    return {k: int(np.argmax(overlap[k])) if overlap[k].any() else 0 for k in range(n_clusters)}


def remap_clusters(pred_mask, assignment: dict[int, int]) -> np.ndarray:
    lut = np.zeros(max(assignment) + 1, dtype=np.int64)
    for k, c in assignment.items():
        lut[k] = c
    return lut[np.asarray(pred_mask)]


def matched_mean_iou(preds: Sequence, gts: Sequence, n_clusters: int, n_classes: int) -> MetricsReport:
    assignment = match_clusters(preds, gts, n_clusters, n_classes)
    report = mean_iou([remap_clusters(p, assignment) for p in preds], gts, range(n_classes))
    report.assignment = assignment
    return report


def bce_report(pred, gt) -> float:
    """Mean per-pixel binary cross entropy of the foreground probability.

    ``pred`` is a :class:`SoftPrediction` with two classes or an array of
    foreground probabilities shaped like ``gt``.
    """
    if isinstance(pred, SoftPrediction):
        if pred.n_classes != 2:
            raise ValueError("bce_report needs a binary prediction")
        p = pred.probs[:, 1].detach().cpu().numpy()
        valid = pred.validity.cpu().numpy()
    else:
        p = np.asarray(pred, dtype=np.float64)
        valid = np.ones(p.shape, dtype=bool)
    g = np.asarray(gt)
    if g.shape != p.shape and g.shape == p.shape[1:] and p.shape[0] == 1:
        g = g[None]
    if g.shape != p.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    if not np.isin(g, (0, 1)).all():
        raise ValueError("ground truth must be binary")
    p = np.clip(p.astype(np.float64), BCE_EPS, 1.0 - BCE_EPS)
    losses = -(g * np.log(p) + (1 - g) * np.log(1 - p))
    return float(losses[valid].mean())


# -- rendering ---------------------------------------------------------------

_PALETTE = np.array(
    [[0, 0, 0], [255, 255, 255], [230, 25, 75], [60, 180, 75], [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240]],
    dtype=np.uint8,
)
DIFF_COLOR = np.array([255, 0, 0], dtype=np.uint8)
PANEL_GAP = 4


def _colorize(mask: np.ndarray) -> np.ndarray:
    return _PALETTE[np.asarray(mask, dtype=np.int64) % len(_PALETTE)]


def diff_panels(pred_mask, gt_mask, image) -> list[np.ndarray]:
    """RGB panels: original, ground truth, prediction, disagreement."""
    pred, gt = _check_pair(pred_mask, gt_mask)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0) if img.shape[0] in (1, 3) else img.mean(axis=-1)
    if img.shape != gt.shape:
        raise ValueError(f"image shape {img.shape} does not match masks {gt.shape}")
    lo, hi = img.min(), img.max()
    gray = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    gray = np.repeat((gray * 255).round().astype(np.uint8)[..., None], 3, axis=-1)
    diff = np.zeros(gt.shape + (3,), dtype=np.uint8)
    diff[pred != gt] = DIFF_COLOR
    return [gray, _colorize(gt), _colorize(pred), diff]


def render_diff(pred_mask, gt_mask, image, path) -> Path:
    """Write the four panels side by side as a PNG."""
    from PIL import Image

    panels = diff_panels(pred_mask, gt_mask, image)
    h, w = panels[0].shape[:2]
    canvas = np.full((h, 4 * w + 3 * PANEL_GAP, 3), 128, dtype=np.uint8)
    for i, panel in enumerate(panels):
        x0 = i * (w + PANEL_GAP)
        canvas[:, x0 : x0 + w] = panel
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(canvas).save(path)
    except OSError as exc:
        raise OSError(f"cannot write difference image {path}: {exc}") from exc
    return path
