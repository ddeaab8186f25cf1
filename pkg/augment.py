#!/usr/bin/env python3
"""
Mosaic and MixUp augmentation over labelled samples.
"""

from __future__ import annotations

import logging
from dataclasses import replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from detection import GroundTruthBox, Sample
from errors import ConfigurationError, DimensionError

logger = logging.getLogger(__name__)

# ========= 🔧 CONSTANTS ========= #
FILL_VALUE = 0.5
MIN_VISIBLE_FRACTION = 0.1
DEFAULT_SCALE_RANGE = (0.75, 1.25)
DEFAULT_MIXUP_BETA = 32.0

# (right-anchored, bottom-anchored) for the top-left, top-right, bottom-left, bottom-right quadrants
_ANCHORS = ((False, False), (True, False), (False, True), (True, True))


def _check_same_size(samples: Sequence[Sample], op: str) -> Tuple[int, ...]:
    shape = samples[0].image.shape
    for i, sample in enumerate(samples[1:], start=1):
        if sample.image.shape != shape:
            raise DimensionError(f"{op}: image {i} has shape {sample.image.shape}, image 0 has {shape}")
    if len(shape) != 3 or shape[1] != shape[2]:
        raise DimensionError(f"{op}: expected square CHW images, got {shape}")
    return shape


def _remap_box(
    box: GroundTruthBox,
    scaled: Tuple[int, int],
    offset: Tuple[int, int],
    window: Tuple[int, int, int, int],
    size: int,
) -> Optional[GroundTruthBox]:
    sh, sw = scaled
    ox, oy = offset
    x0, y0, x1, y1 = window
    bx1, by1, bx2, by2 = box.corners()
    bx1, bx2 = bx1 * sw + ox, bx2 * sw + ox
    by1, by2 = by1 * sh + oy, by2 * sh + oy
    full = (bx2 - bx1) * (by2 - by1)
    cx1, cx2 = np.clip([bx1, bx2], x0, x1)
    cy1, cy2 = np.clip([by1, by2], y0, y1)
    w, h = cx2 - cx1, cy2 - cy1
    if w <= 0 or h <= 0 or w * h < MIN_VISIBLE_FRACTION * full:
        return None
    return GroundTruthBox(
        box.class_id, float((cx1 + cx2) / 2 / size), float((cy1 + cy2) / 2 / size),
        float(w / size), float(h / size), box.weight,
    )


def mosaic(
    samples: Sequence[Sample],
    seed: Optional[int] = None,
    center: Optional[Tuple[int, int]] = None,
    scale_range: Tuple[float, float] = DEFAULT_SCALE_RANGE,
    rng: Optional[np.random.Generator] = None,
) -> Sample:
    """Tile four samples into the quadrants around a random center.

    Each input is rescaled (nearest neighbour) and pinned to the outer corner of
    its quadrant, so with scale 1 a quadrant shows the same region of its
    input. Uncovered pixels are gray; labels keep at least a tenth of their
    area or are dropped.
    """
    if len(samples) != 4:
        raise ConfigurationError(f"mosaic needs 4 samples, got {len(samples)}")
    channels, size, _ = _check_same_size(samples, "mosaic")
    low, high = scale_range
    if not 0 < low <= high:
        raise ConfigurationError(f"scale_range must satisfy 0 < low <= high, got {scale_range}")
    rng = rng or np.random.default_rng(seed)
    if center is None:
        cx, cy = (int(v) for v in rng.integers(size // 4, 3 * size // 4 + 1, size=2))
    else:
        cx, cy = center
    if not (0 < cx < size and 0 < cy < size):
        raise ConfigurationError(f"mosaic center {(cx, cy)} must lie strictly inside the {size}px canvas")

    canvas = np.full((channels, size, size), FILL_VALUE, dtype=samples[0].image.dtype)
    windows = ((0, 0, cx, cy), (cx, 0, size, cy), (0, cy, cx, size), (cx, cy, size, size))
    labels: List[GroundTruthBox] = []
    for sample, window, (right, bottom) in zip(samples, windows, _ANCHORS):
        scale = float(rng.uniform(low, high))
        scaled = sample.image if scale == 1.0 else ndimage.zoom(sample.image, (1, scale, scale), order=0)
        sh, sw = scaled.shape[1:]
        ox = size - sw if right else 0
        oy = size - sh if bottom else 0
        x0, y0, x1, y1 = window
        xa, xb = max(x0, ox), min(x1, ox + sw)
        ya, yb = max(y0, oy), min(y1, oy + sh)
        if xa >= xb or ya >= yb:
            continue
        canvas[:, ya:yb, xa:xb] = scaled[:, ya - oy:yb - oy, xa - ox:xb - ox]
        for box in sample.labels:
            remapped = _remap_box(box, (sh, sw), (ox, oy), (xa, ya, xb, yb), size)
            if remapped is not None:
                labels.append(remapped)
    logger.debug("mosaic center=(%d, %d) kept %d labels", cx, cy, len(labels))
    return Sample(canvas, labels)


def mixup(
    a: Sample,
    b: Sample,
    beta: float = DEFAULT_MIXUP_BETA,
    seed: Optional[int] = None,
    lam: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
) -> Sample:
    """Convex blend lam * a + (1 - lam) * b, lam ~ Beta(beta, beta); labels are weighted by their share."""
    _check_same_size([a, b], "mixup")
    if beta <= 0:
        raise ConfigurationError(f"mixup beta must be > 0, got {beta}")
    if lam is None:
        rng = rng or np.random.default_rng(seed)
        lam = float(rng.beta(beta, beta))
    if not 0 <= lam <= 1:
        raise ConfigurationError(f"mixup lam must lie in [0, 1], got {lam}")
    image = (lam * a.image + (1.0 - lam) * b.image).astype(a.image.dtype)
    labels = [replace(box, weight=box.weight * lam) for box in a.labels]
    labels += [replace(box, weight=box.weight * (1.0 - lam)) for box in b.labels]
    return Sample(image, [box for box in labels if box.weight > 0])
