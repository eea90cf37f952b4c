from __future__ import annotations

import json

import numpy as np
import pytest
import torch

from glandseg.evaluation import (evaluate_pairs, object_dice, object_f1, pixel_dice,
                                 pixel_iou, write_report)
from glandseg.training import soft_dice

from oracles import (object_dice_brute_force, object_f1_brute_force, object_f1_optimal,
                     pixel_dice_brute_force, random_label_map)


def test_pixel_dice_basic_cases():
    a = np.zeros((4, 4), bool)
    a[:2, :2] = True
    assert pixel_dice(a, a) == 1.0
    b = np.zeros((4, 4), bool)
    b[2:, 2:] = True
    assert pixel_dice(a, b) == 0.0
    c = np.zeros((4, 4), bool)
    c[:2, 1:3] = True  # |P| = |G| = 4, overlap 2
    assert pixel_dice(a, c) == pytest.approx(0.5)
    assert pixel_dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_pixel_metrics_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        pixel_dice(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError, match="shape"):
        pixel_iou(np.zeros((2, 2)), np.zeros((3, 2)))


def test_object_f1_cases():
    gt = np.zeros((8, 8), np.int32)
    gt[:3, :3] = 1
    gt[5:, 5:] = 2
    assert object_f1(gt, gt) == (1.0, 1.0, 1.0)
    pred = np.zeros_like(gt)
    pred[:3, :3] = 1  # one perfect match out of two gt objects
    p, r, f1 = object_f1(pred, gt)
    assert (p, r) == (1.0, 0.5)
    assert f1 == pytest.approx(2.0 / 3.0)
    assert object_f1(np.zeros_like(gt), gt) == (0.0, 0.0, 0.0)
    assert object_f1(np.zeros_like(gt), np.zeros_like(gt)) == (1.0, 1.0, 1.0)


def test_object_f1_requires_strictly_better_iou_than_threshold():
    gt = np.zeros((4, 4), np.int32)
    gt[:2, :] = 1
    pred = np.zeros_like(gt)
    pred[0, :] = 1  # IoU exactly 0.5
    assert object_f1(pred, gt, iou_match=0.5)[2] == 0.0
    assert object_f1(pred, gt, iou_match=0.49)[2] == 1.0


def test_object_dice_cases():
    gt = np.zeros((8, 8), np.int32)
    gt[2:6, 2:6] = 1
    assert object_dice(gt, gt) == 1.0
    assert object_dice(np.zeros_like(gt), gt) == 0.0
    assert object_dice(np.zeros_like(gt), np.zeros_like(gt)) == 1.0
    pred = np.zeros_like(gt)
    pred[2:6, 2:4] = 1  # left half of the square
    assert object_dice(pred, gt) == pytest.approx(2.0 / 3.0)


def test_metrics_invariant_under_relabeling():
    rng = np.random.default_rng(21)
    for _ in range(25):
        shape = (int(rng.integers(2, 13)), int(rng.integers(2, 13)))
        pred = random_label_map(rng, shape=shape)
        gt = random_label_map(rng, shape=shape)
        n_pred, n_gt = int(pred.max()), int(gt.max())
        perm_p = np.concatenate([[0], rng.permutation(n_pred) + 1]).astype(np.int32)
        perm_g = np.concatenate([[0], rng.permutation(n_gt) + 1]).astype(np.int32)
        assert object_f1(perm_p[pred], perm_g[gt]) == pytest.approx(object_f1(pred, gt))
        assert object_dice(perm_p[pred], perm_g[gt]) == pytest.approx(object_dice(pred, gt))


def test_object_metrics_match_brute_force():
    rng = np.random.default_rng(33)
    for _ in range(200):
        shape = (int(rng.integers(1, 13)), int(rng.integers(1, 13)))
        pred = random_label_map(rng, shape=shape)
        gt = random_label_map(rng, shape=shape)
        assert object_f1(pred, gt) == pytest.approx(object_f1_brute_force(pred, gt))
        assert object_dice(pred, gt) == pytest.approx(object_dice_brute_force(pred, gt))
        assert pixel_dice(pred > 0, gt > 0) == pytest.approx(
            pixel_dice_brute_force(pred > 0, gt > 0))


def test_greedy_matching_is_one_to_one_and_close_to_optimal():
    rng = np.random.default_rng(55)
    worse_than_optimal = 0
    for _ in range(120):
        shape = (int(rng.integers(2, 11)), int(rng.integers(2, 11)))
        pred = random_label_map(rng, max_labels=3, shape=shape)
        gt = random_label_map(rng, max_labels=3, shape=shape)
        greedy = object_f1(pred, gt)[2]
        optimal = object_f1_optimal(pred, gt)
        assert greedy <= optimal + 1e-12
        if greedy < optimal - 1e-12:
            worse_than_optimal += 1
            print(f"greedy {greedy:.3f} < optimal {optimal:.3f}")
    # overlapping-rectangle maps rarely admit a better non-greedy matching
    assert worse_than_optimal <= 5


def test_pixel_dice_agrees_with_soft_dice_at_vanishing_smooth():
    rng = np.random.default_rng(8)
    for _ in range(20):
        pred = rng.random((9, 9)) > 0.5
        gt = rng.random((9, 9)) > 0.5
        soft = soft_dice(torch.tensor(pred, dtype=torch.float64),
                         torch.tensor(gt, dtype=torch.float64), smooth=1e-12).item()
        assert abs(pixel_dice(pred, gt) - soft) < 1e-9


def test_report_aggregates_are_means(tmp_path):
    gt1 = np.zeros((6, 6), np.int32)
    gt1[:3, :3] = 1
    gt2 = np.zeros((6, 6), np.int32)
    gt2[2:, 2:] = 1
    pairs = [("img1", gt1, gt1), ("img2", np.zeros_like(gt2), gt2)]
    report = evaluate_pairs(pairs)
    assert report.pixel_dice == pytest.approx(
        np.mean([m.pixel_dice for m in report.per_image]))
    assert report.object_f1 == pytest.approx((1.0 + 0.0) / 2)
    path = write_report(report, tmp_path)
    data = json.loads(path.read_text())
    assert data["pixel_dice"] == pytest.approx(report.pixel_dice)
    assert len(data["per_image"]) == 2
    assert "mean" in (tmp_path / "report.txt").read_text()


def test_evaluate_pairs_rejects_empty():
    with pytest.raises(ValueError, match="nothing"):
        evaluate_pairs([])
