#!/usr/bin/env python3
"""
Tests for target assignment, the detection loss, decoding, NMS and mAP.
"""

import numpy as np
import pytest

from detection import (
    Detection,
    GroundTruthBox,
    LossWeights,
    assign_targets,
    decode,
    detection_loss,
    encode_predictions,
    iou,
    iou_matrix,
    mean_average_precision,
    nms,
)
from errors import ConfigurationError, ContractError
from nn_blocks import Conv2d
from tensor_core import ComputeGraph, Tensor, backward, gradcheck, precision

GRIDS = [8, 4, 2]


def cell_centered(class_id, col, row, grid, size):
    return GroundTruthBox(class_id, (col + 0.5) / grid, (row + 0.5) / grid, size, size)


def as_tensors(arrays):
    return [Tensor(a, dtype=np.float64) for a in arrays]


# ---------------------------------------------------------------- IoU
def test_iou_examples():
    unit = (0.5, 0.5, 1.0, 1.0)
    assert iou(unit, unit) == pytest.approx(1.0)
    assert iou((0.25, 0.5, 0.5, 1.0), (0.75, 0.5, 0.5, 1.0)) == 0.0
    assert iou((0.25, 0.5, 0.5, 1.0), (0.5, 0.5, 1.0, 1.0)) == pytest.approx(0.5)
    assert iou((0.5, 0.5, 0.5, 0.5), (0.75, 0.5, 0.5, 0.5)) == pytest.approx(1 / 3)


def test_iou_matrix_agrees_with_scalar_iou():
    rng = np.random.default_rng(0)
    a = np.column_stack([rng.uniform(0.2, 0.8, (5, 2)), rng.uniform(0.05, 0.4, (5, 2))])
    b = np.column_stack([rng.uniform(0.2, 0.8, (4, 2)), rng.uniform(0.05, 0.4, (4, 2))])
    expected = [[iou(x, y) for y in b] for x in a]
    np.testing.assert_allclose(iou_matrix(a, b), expected, atol=1e-12)


def test_box_validation():
    with pytest.raises(ConfigurationError):
        GroundTruthBox(0, 0.05, 0.5, 0.2, 0.2)
    with pytest.raises(ConfigurationError):
        GroundTruthBox(0, 0.5, 0.5, 0.0, 0.2)


# ---------------------------------------------------------------- assignment
def test_small_centered_box_lands_on_stride8_center_cell():
    targets = assign_targets([[GroundTruthBox(1, 0.5, 0.5, 0.05, 0.05)]], GRIDS)
    assert targets[0].obj[0, 4, 4] == 1.0
    assert targets[0].cls[0, 4, 4] == 1
    np.testing.assert_allclose(targets[0].box[0, :2, 4, 4], [0.0, 0.0])
    np.testing.assert_allclose(targets[0].box[0, 2:, 4, 4], np.log([0.4, 0.4]))
    assert targets[1].obj.sum() == 0 and targets[2].obj.sum() == 0


def test_scale_follows_box_size():
    boxes = [GroundTruthBox(0, 0.3, 0.3, 0.08, 0.05), GroundTruthBox(0, 0.5, 0.5, 0.2, 0.1),
             GroundTruthBox(0, 0.5, 0.5, 0.6, 0.2)]
    targets = assign_targets([boxes], GRIDS)
    assert [int(t.positives.sum()) for t in targets] == [1, 1, 1]


def test_no_ground_truth_means_no_positives():
    targets = assign_targets([[], []], GRIDS)
    for t in targets:
        assert not t.positives.any()
        assert (t.cls == -1).all()


def test_one_positive_per_box_and_larger_wins_collision():
    rng = np.random.default_rng(3)
    boxes = [cell_centered(int(c), int(col), int(row), 8, 0.05)
             for c, col, row in zip(rng.integers(0, 3, 6), rng.permutation(8)[:6], rng.permutation(8)[:6])]
    targets = assign_targets([boxes], GRIDS)
    assert sum(int(t.positives.sum()) for t in targets) == len(boxes)

    small = GroundTruthBox(0, 0.51, 0.51, 0.04, 0.04)
    large = GroundTruthBox(2, 0.52, 0.52, 0.08, 0.08)
    for order in ([small, large], [large, small]):
        t = assign_targets([order], GRIDS)[0]
        assert t.positives.sum() == 1
        assert t.cls[0, 4, 4] == 2


def test_soft_label_weight_becomes_objectness_target():
    targets = assign_targets([[GroundTruthBox(0, 0.5, 0.5, 0.05, 0.05, weight=0.3),
                               GroundTruthBox(1, 0.1, 0.1, 0.05, 0.05, weight=0.0)]], GRIDS)
    assert targets[0].obj[0, 4, 4] == pytest.approx(0.3)
    assert targets[0].positives.sum() == 1


# ---------------------------------------------------------------- loss
def perfect_case(num_classes=3):
    boxes = [cell_centered(0, 4, 4, 8, 0.05), cell_centered(2, 1, 2, 4, 0.2), cell_centered(1, 0, 1, 2, 0.5)]
    targets = assign_targets([boxes], GRIDS)
    return targets, encode_predictions(targets, num_classes)


def test_loss_is_zero_for_perfect_predictions():
    targets, preds = perfect_case()
    with precision(np.float64):
        total, parts = detection_loss(as_tensors(preds), targets)
    assert total.item() == pytest.approx(0.0, abs=1e-12)
    assert set(parts) == {"coord", "obj", "noobj", "cls", "total"}


def test_coord_term_scales_linearly_with_its_weight():
    targets, preds = perfect_case()
    rng = np.random.default_rng(1)
    noisy = [p + rng.normal(scale=0.3, size=p.shape) for p in preds]
    with precision(np.float64):
        _, one = detection_loss(as_tensors(noisy), targets, LossWeights(coord=1.0))
        _, three = detection_loss(as_tensors(noisy), targets, LossWeights(coord=3.0))
    assert three["coord"] == pytest.approx(3 * one["coord"], rel=1e-12)
    assert three["cls"] == pytest.approx(one["cls"], rel=1e-12)


def test_negative_cells_only_pay_noobj():
    targets = assign_targets([[]], GRIDS)
    preds = [np.zeros((1, 8, g, g)) for g in GRIDS]
    with precision(np.float64):
        _, parts = detection_loss(as_tensors(preds), targets)
    cells = sum(g * g for g in GRIDS)
    assert parts["noobj"] == pytest.approx(0.5 * 0.25 * cells)
    assert parts["coord"] == parts["obj"] == parts["cls"] == 0.0


def test_non_finite_prediction_is_a_contract_error():
    targets, preds = perfect_case()
    preds[1][0, 0, 0, 0] = np.nan
    with pytest.raises(ContractError, match=r"preds\[1\]"):
        detection_loss(as_tensors(preds), targets)


def test_loss_gradients_through_heads():
    rng = np.random.default_rng(4)
    boxes = [GroundTruthBox(1, 0.4, 0.6, 0.25, 0.2), GroundTruthBox(0, 0.2, 0.3, 0.08, 0.06)]
    grids = [4, 2, 1]
    targets = assign_targets([boxes], grids)
    with precision(np.float64):
        heads = [Conv2d(2, 7, 1, rng=rng) for _ in grids]
        feats = [Tensor(rng.normal(scale=0.5, size=(1, 2, g, g))) for g in grids]
        params = [p for head in heads for p in head.parameters()]

        def loss():
            return detection_loss([head(f) for head, f in zip(heads, feats)], targets)[0]

        assert gradcheck(loss, params, eps=1e-6) <= 1e-4
        with ComputeGraph() as graph:
            total = loss()
        grads = backward(total, graph, params)
    assert all(np.isfinite(g).all() for g in grads)


# ---------------------------------------------------------------- decode
def test_decode_of_strongly_negative_logits_is_empty():
    preds = [np.full((2, 8, g, g), -100.0) for g in GRIDS]
    assert decode(preds, 0.25) == [[], []]


def test_decode_inverts_encode():
    targets, preds = perfect_case()
    dets = decode(preds, 0.5)[0]
    boxes = [cell_centered(0, 4, 4, 8, 0.05), cell_centered(2, 1, 2, 4, 0.2), cell_centered(1, 0, 1, 2, 0.5)]
    assert len(dets) == len(boxes)
    for box in boxes:
        match = [d for d in dets if d.class_id == box.class_id]
        assert len(match) == 1
        d = match[0]
        np.testing.assert_allclose([d.cx, d.cy, d.w, d.h], [box.cx, box.cy, box.w, box.h], atol=1e-5)
        assert d.score == pytest.approx(1.0)


def test_lower_threshold_keeps_a_superset():
    rng = np.random.default_rng(5)
    preds = [rng.normal(size=(2, 8, g, g)) for g in GRIDS]
    low, high = decode(preds, 0.2), decode(preds, 0.4)
    for lo, hi in zip(low, high):
        assert set(hi) <= set(lo)
        assert all(d.score >= 0.4 for d in hi)
        assert all(0 <= d.cx - d.w / 2 + 1e-12 and d.cx + d.w / 2 <= 1 + 1e-12 for d in lo)


# ---------------------------------------------------------------- NMS
def test_nms_single_and_duplicates():
    det = Detection(0, 0.5, 0.5, 0.2, 0.2, 0.9)
    assert nms([det], 0.5) == [det]
    dup = Detection(0, 0.5, 0.5, 0.2, 0.2, 0.8)
    other_class = Detection(1, 0.5, 0.5, 0.2, 0.2, 0.7)
    assert nms([dup, det, other_class], 0.5) == [det, other_class]


def test_nms_threshold_range():
    with pytest.raises(ConfigurationError):
        nms([], 0.0)


def test_nms_is_idempotent_over_random_sets():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        dets = [Detection(int(rng.integers(0, 2)), *rng.uniform(0.3, 0.7, 2), *rng.uniform(0.1, 0.3, 2),
                          float(rng.random())) for _ in range(int(rng.integers(0, 20)))]
        once = nms(dets, 0.45)
        assert nms(once, 0.45) == once
        for i, a in enumerate(once):
            for b in once[i + 1:]:
                assert a.class_id != b.class_id or iou(a, b) <= 0.45


# ---------------------------------------------------------------- mAP
def test_map_perfect_and_empty():
    gts = [[GroundTruthBox(0, 0.3, 0.3, 0.2, 0.2), GroundTruthBox(1, 0.7, 0.7, 0.2, 0.2)]]
    perfect = [[Detection(g.class_id, g.cx, g.cy, g.w, g.h, 0.9) for g in gts[0]]]
    result = mean_average_precision(perfect, gts)
    assert result.map50 == pytest.approx(1.0)
    assert result.map50_95 == pytest.approx(1.0)
    duplicated = [perfect[0] + [perfect[0][0]]]
    assert mean_average_precision(duplicated, gts).map50 <= 1.0
    assert mean_average_precision([[]], gts).map50 == 0.0


def test_map_handcrafted_curve():
    a, b = GroundTruthBox(0, 0.25, 0.25, 0.2, 0.2), GroundTruthBox(0, 0.75, 0.75, 0.2, 0.2)
    dets = [[Detection(0, a.cx, a.cy, a.w, a.h, 0.9), Detection(0, 0.25, 0.75, 0.2, 0.2, 0.8),
             Detection(0, b.cx, b.cy, b.w, b.h, 0.7)]]
    result = mean_average_precision(dets, [[a, b]])
    assert result.map50 == pytest.approx((51 + 100 / 3) / 101, abs=1e-9)
    assert result.map50_95 == pytest.approx((51 + 100 / 3) / 101, abs=1e-9)

    without_fp = [[dets[0][0], dets[0][2]]]
    assert mean_average_precision(without_fp, [[a, b]]).map50 >= result.map50


def test_map_class_without_ground_truth_scores_zero():
    gts = [[GroundTruthBox(0, 0.3, 0.3, 0.2, 0.2)]]
    dets = [[Detection(0, 0.3, 0.3, 0.2, 0.2, 0.9), Detection(2, 0.7, 0.7, 0.2, 0.2, 0.5)]]
    result = mean_average_precision(dets, gts)
    assert result.per_class[2]["ap50"] == 0.0
    assert result.map50 == pytest.approx(0.5)
