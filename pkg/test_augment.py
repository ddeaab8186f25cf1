#!/usr/bin/env python3
"""
Tests for Mosaic and MixUp.
"""

import numpy as np
import pytest

from augment import FILL_VALUE, mixup, mosaic
from detection import GroundTruthBox, Sample
from errors import DimensionError


def random_sample(rng, size=32, n_boxes=3):
    boxes = []
    for _ in range(n_boxes):
        w, h = rng.uniform(0.1, 0.5, 2)
        cx, cy = rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2)
        boxes.append(GroundTruthBox(int(rng.integers(0, 3)), cx, cy, w, h))
    return Sample(rng.random((3, size, size)).astype(np.float32), boxes)


def test_centered_mosaic_of_identical_images_keeps_quadrants():
    rng = np.random.default_rng(0)
    sample = random_sample(rng)
    out = mosaic([sample] * 4, center=(16, 16), scale_range=(1.0, 1.0))
    np.testing.assert_array_equal(out.image, sample.image)


def test_mosaic_quadrants_come_from_their_own_inputs():
    samples = [Sample(np.full((3, 16, 16), v, dtype=np.float32), []) for v in (0.1, 0.2, 0.3, 0.4)]
    out = mosaic(samples, center=(6, 10), scale_range=(1.0, 1.0))
    assert np.all(out.image[:, :10, :6] == np.float32(0.1))
    assert np.all(out.image[:, :10, 6:] == np.float32(0.2))
    assert np.all(out.image[:, 10:, :6] == np.float32(0.3))
    assert np.all(out.image[:, 10:, 6:] == np.float32(0.4))


def test_shrunk_inputs_leave_gray_fill():
    samples = [Sample(np.zeros((3, 16, 16)), []) for _ in range(4)]
    out = mosaic(samples, center=(12, 12), scale_range=(0.5, 0.5))
    assert out.image[0, 0, 0] == 0.0
    assert out.image[0, 10, 10] == FILL_VALUE


def test_mosaic_drops_mostly_hidden_boxes():
    corner = GroundTruthBox(0, 0.9, 0.9, 0.1, 0.1)
    samples = [Sample(np.zeros((3, 20, 20)), [corner]) for _ in range(4)]
    out = mosaic(samples, center=(10, 10), scale_range=(1.0, 1.0))
    assert len(out.labels) == 1
    kept = out.labels[0]
    assert (kept.cx, kept.cy) == pytest.approx((0.9, 0.9))


def test_mosaic_labels_valid_over_many_seeds():
    rng = np.random.default_rng(1)
    pool = [random_sample(rng) for _ in range(8)]
    for seed in range(1000):
        picks = np.random.default_rng(seed).choice(len(pool), 4)
        out = mosaic([pool[i] for i in picks], seed=seed)
        for box in out.labels:
            x1, y1, x2, y2 = box.corners()
            assert box.w > 0 and box.h > 0
            assert -1e-9 <= x1 and -1e-9 <= y1 and x2 <= 1 + 1e-9 and y2 <= 1 + 1e-9


def test_mosaic_is_seeded():
    rng = np.random.default_rng(2)
    samples = [random_sample(rng) for _ in range(4)]
    a, b = mosaic(samples, seed=7), mosaic(samples, seed=7)
    np.testing.assert_array_equal(a.image, b.image)
    assert a.labels == b.labels


def test_size_mismatch_is_dimension_error():
    rng = np.random.default_rng(3)
    with pytest.raises(DimensionError):
        mosaic([random_sample(rng, 32)] * 3 + [random_sample(rng, 16)], seed=0)
    with pytest.raises(DimensionError):
        mixup(random_sample(rng, 32), random_sample(rng, 16), seed=0)


def test_mixup_lambda_one_returns_first_sample():
    rng = np.random.default_rng(4)
    a, b = random_sample(rng), random_sample(rng)
    out = mixup(a, b, lam=1.0)
    np.testing.assert_array_equal(out.image, a.image)
    assert out.labels == a.labels


def test_mixup_weights_labels_by_share():
    rng = np.random.default_rng(5)
    a, b = random_sample(rng, n_boxes=1), random_sample(rng, n_boxes=2)
    out = mixup(a, b, lam=0.25)
    np.testing.assert_allclose(out.image, 0.25 * a.image + 0.75 * b.image, rtol=1e-6)
    assert [box.weight for box in out.labels] == [0.25, 0.75, 0.75]


def test_mixup_draws_lambda_from_seed():
    rng = np.random.default_rng(6)
    a, b = random_sample(rng), random_sample(rng)
    first, second = mixup(a, b, seed=11), mixup(a, b, seed=11)
    np.testing.assert_array_equal(first.image, second.image)
    assert 0 < first.labels[0].weight < 1
