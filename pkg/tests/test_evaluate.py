import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from PIL import Image

from semiseg.evaluate import (
    DIFF_COLOR,
    PANEL_GAP,
    bce_report,
    diff_panels,
    iou,
    match_clusters,
    matched_mean_iou,
    mean_iou,
    render_diff,
)
from semiseg.model import SoftPrediction

import oracles


def test_iou_half_overlap():
    pred = np.zeros((4, 4), int)
    gt = np.zeros((4, 4), int)
    pred[:, :2] = 1
    gt[:2, :] = 1
    # intersection 4, union 12
    assert iou(pred, gt, 1) == pytest.approx(1 / 3)
    pred2 = np.zeros((4, 4), int)
    pred2[:2, :2] = 1
    gt2 = np.zeros((4, 4), int)
    gt2[:2, :] = 1
    assert iou(pred2, gt2, 1) == pytest.approx(0.5)


def test_iou_complement_and_empty():
    gt = np.zeros((3, 3), int)
    gt[0] = 1
    assert iou(1 - gt, gt, 1) == 0.0
    assert iou(np.zeros((3, 3)), np.zeros((3, 3)), 1) == 1.0


def test_mean_iou_includes_background():
    gt = np.zeros((2, 2), int)
    gt[0, 0] = 1
    report = mean_iou([gt.copy()], [gt], [0, 1])
    assert report.mean_iou == 1.0 and report.per_class_iou == {0: 1.0, 1: 1.0}


def test_dataset_vs_per_image_aggregation():
    gt_a = np.ones((2, 2), int)
    gt_b = np.zeros((2, 2), int)
    gt_b[0, 0] = 1
    pred_a = gt_a.copy()
    pred_b = np.zeros((2, 2), int)
    report = mean_iou([pred_a, pred_b], [gt_a, gt_b], [1])
    assert report.mean_iou == pytest.approx(4 / 5)
    assert report.mean_iou_per_image == pytest.approx(0.5)


def test_mean_iou_errors():
    with pytest.raises(ValueError):
        mean_iou([], [], [0, 1])
    with pytest.raises(ValueError):
        mean_iou([np.zeros((2, 2))], [], [0, 1])


@given(st.integers(0, 10_000), st.integers(2, 4))
def test_mean_iou_matches_confusion_matrix(seed, k):
    rng = np.random.default_rng(seed)
    preds = [rng.integers(0, k, (4, 5)) for _ in range(3)]
    gts = [rng.integers(0, k, (4, 5)) for _ in range(3)]
    report = mean_iou(preds, gts, range(k))
    ref = oracles.confusion_iou([p.tolist() for p in preds], [g.tolist() for g in gts], range(k))
    for c in range(k):
        assert report.per_class_iou[c] == pytest.approx(ref[c])


@given(st.permutations([0, 1, 2]), st.integers(0, 1000))
def test_matching_undoes_cluster_permutation(perm, seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 3, (6, 6))
    gt[0, :3] = [0, 1, 2]
    pred = np.asarray(perm)[gt]
    report = matched_mean_iou([pred], [gt], 3, 3)
    assert report.mean_iou == 1.0
    assert report.assignment == {perm[c]: c for c in range(3)}


def test_matching_merges_overclusters():
    gt = np.array([[0, 0, 1, 1]])
    pred = np.array([[2, 3, 0, 1]])
    assignment = match_clusters(pred, gt, 4, 2)
    assert assignment == {0: 1, 1: 1, 2: 0, 3: 0}
    assert matched_mean_iou([pred], [gt], 4, 2).mean_iou == 1.0


def test_matching_empty_cluster_maps_to_background():
    assert match_clusters(np.zeros((2, 2), int), np.ones((2, 2), int), 3, 2)[2] == 0


def test_bce():
    gt = np.array([[0, 1]])
    assert bce_report(np.full((1, 2), 0.5), gt) == pytest.approx(math.log(2))
    # channel 0 is background, channel 1 foreground; pixels along the last axis
    right = torch.tensor([[[[1.0, 0.0]], [[0.0, 1.0]]]])
    assert bce_report(SoftPrediction.full(right), gt) == pytest.approx(0.0, abs=1e-7)
    wrong = bce_report(SoftPrediction.full(right.flip(1)), gt)
    assert wrong == pytest.approx(-math.log(1e-8), rel=1e-6)
    with pytest.raises(ValueError):
        bce_report(np.full((1, 2), 0.5), np.array([[0, 2]]))


def test_diff_panels_single_pixel():
    gt = np.zeros((5, 5), int)
    pred = gt.copy()
    pred[2, 3] = 1
    panels = diff_panels(pred, gt, np.arange(25.0).reshape(5, 5))
    assert len(panels) == 4
    diff = panels[3]
    red = np.all(diff == DIFF_COLOR, axis=-1)
    assert red.sum() == 1 and red[2, 3]
    # order: original, ground truth, prediction, difference
    assert panels[0][0, 0].tolist() == [0, 0, 0] and panels[0][4, 4].tolist() == [255, 255, 255]
    assert panels[2][2, 3].tolist() != panels[1][2, 3].tolist()


def test_render_diff_writes_png(tmp_path):
    gt = np.zeros((6, 7), int)
    pred = gt.copy()
    pred[1, 1] = 1
    path = render_diff(pred, gt, np.zeros((6, 7)), tmp_path / "sub" / "d.png")
    arr = np.asarray(Image.open(path))
    assert arr.shape == (6, 4 * 7 + 3 * PANEL_GAP, 3)
    x0 = 3 * (7 + PANEL_GAP)
    assert arr[1, x0 + 1].tolist() == DIFF_COLOR.tolist()
    assert np.all(arr[np.arange(6) != 1, x0:].sum(-1) == 0)
