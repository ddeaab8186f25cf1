#!/usr/bin/env python3
"""
Synthetic shapes dataset and its on-disk layout.

    <root>/images/00000.ppm   binary PPM (P6, 8-bit RGB)
    <root>/labels/00000.txt   one "class cx cy w h" line per shape, normalized

Pixels are quantized to 8 bits at generation time, so writing and reading a
dataset back is lossless.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from detection import GroundTruthBox, Sample
from errors import ConfigurationError, FormatError
from settings import DEFAULT_THREADS

logger = logging.getLogger(__name__)

# ========= 🔧 CONSTANTS ========= #
CLASS_NAMES = ("circle", "square", "triangle")
MIN_SHAPES, MAX_SHAPES = 1, 4
MIN_BOX_PIXELS = 4
BACKGROUND_MAX = 0.35
PLACEMENT_ATTEMPTS = 50
PPM_HEADER = re.compile(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s")


def _class_sequence(rng: np.random.Generator, total: int) -> np.ndarray:
    """Shuffled blocks of every class, so frequencies stay within one block of uniform."""
    blocks = -(-total // len(CLASS_NAMES))
    return np.concatenate([rng.permutation(len(CLASS_NAMES)) for _ in range(blocks)])[:total]


def _shape_mask(kind: int, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if CLASS_NAMES[kind] == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if CLASS_NAMES[kind] == "square":
        return (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
    top = cy - r
    return (yy <= cy + r) & (yy >= top) & (np.abs(xx - cx) <= (yy - top) / 2)


def _tight_box(mask: np.ndarray) -> Tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def _overlaps(box: Tuple[float, float, float, float], placed: Sequence[Tuple[float, float, float, float]]) -> bool:
    x1, y1, x2, y2 = box
    return any(x1 < b2 and b1 < x2 and y1 < c2 and c1 < y2 for b1, c1, b2, c2 in placed)


def render_image(seed: int, index: int, size: int, classes: Sequence[int]) -> Sample:
    """One image with the given shape classes; seeded by (seed, index) alone."""
    rng = np.random.default_rng([seed, index])
    image = rng.uniform(0.0, BACKGROUND_MAX, size=(3, size, size))
    placed: List[Tuple[float, float, float, float]] = []
    labels: List[GroundTruthBox] = []
    for kind in classes:
        r_low, r_high = max(MIN_BOX_PIXELS, size / 16), max(MIN_BOX_PIXELS + 1, size / 6)
        for _ in range(PLACEMENT_ATTEMPTS):
            r = rng.uniform(r_low, r_high)
            cx, cy = rng.uniform(r, size - r, size=2)
            square = (cx - r, cy - r, cx + r, cy + r)
            if not _overlaps(square, placed):
                break
        placed.append(square)
        mask = _shape_mask(int(kind), size, cx, cy, r)
        color = rng.uniform(0.5, 1.0, size=3)
        image[:, mask] = color[:, None]
        x1, y1, x2, y2 = _tight_box(mask)
        labels.append(GroundTruthBox(int(kind), (x1 + x2) / 2 / size, (y1 + y2) / 2 / size,
                                     (x2 - x1) / size, (y2 - y1) / size))
    pixels = np.round(image * 255).astype(np.uint8)
    return Sample(pixels.astype(np.float32) / np.float32(255), labels)


def synth_dataset(n_images: int, image_size: int, seed: int, threads: int = DEFAULT_THREADS) -> List[Sample]:
    """Noise backgrounds with 1-4 non-overlapping circles, squares and triangles, fully determined by ``seed``."""
    if n_images < 1:
        raise ConfigurationError(f"n_images must be >= 1, got {n_images}")
    if image_size < 32 or image_size % 32:
        raise ConfigurationError(f"image_size must be a positive multiple of 32, got {image_size}")
    rng = np.random.default_rng(seed)
    counts = rng.integers(MIN_SHAPES, MAX_SHAPES + 1, size=n_images)
    sequence = _class_sequence(rng, int(counts.sum()))
    splits = np.split(sequence, np.cumsum(counts)[:-1])

    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        samples = list(executor.map(lambda i: render_image(seed, i, image_size, splits[i]), range(n_images)))
    logger.info("Generated %d synthetic images (%dpx, %d shapes, seed %d)",
                n_images, image_size, len(sequence), seed)
    return samples


# ========= 💾 DISK FORMAT ========= #
def write_dataset(samples: Sequence[Sample], root: Union[str, Path]) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for index, sample in enumerate(samples):
        pixels = np.round(np.clip(sample.image, 0, 1) * 255).astype(np.uint8)
        _, h, w = pixels.shape
        header = f"P6\n{w} {h}\n255\n".encode("ascii")
        (root / "images" / f"{index:05d}.ppm").write_bytes(header + pixels.transpose(1, 2, 0).tobytes())
        lines = [f"{b.class_id} {b.cx!r} {b.cy!r} {b.w!r} {b.h!r}" for b in sample.labels]
        (root / "labels" / f"{index:05d}.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
    logger.info("Wrote %d samples to %s", len(samples), root)
    return root


def _read_ppm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    match = PPM_HEADER.match(data)
    if not match:
        raise FormatError(f"{path}: not a binary P6 PPM")
    w, h, maxval = (int(v) for v in match.groups())
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM is supported, maxval is {maxval}")
    payload = data[match.end():]
    if len(payload) != w * h * 3:
        raise FormatError(f"{path}: expected {w * h * 3} pixel bytes, found {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return pixels.astype(np.float32) / np.float32(255)


def _read_labels(path: Path) -> List[GroundTruthBox]:
    try:
        text = path.read_bytes().decode("ascii")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: label file is not ASCII text ({exc.reason} at byte {exc.start})") from exc
    labels = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        try:
            if len(fields) != 5:
                raise ValueError(f"expected 5 fields, got {len(fields)}")
            labels.append(GroundTruthBox(int(fields[0]), *(float(v) for v in fields[1:])))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return labels


def read_dataset(root: Union[str, Path]) -> List[Sample]:
    root = Path(root)
    images = sorted((root / "images").glob("*.ppm"))
    if not images:
        raise FormatError(f"{root}: no images/*.ppm files")
    samples = []
    for image_path in images:
        label_path = root / "labels" / f"{image_path.stem}.txt"
        if not label_path.exists():
            raise FormatError(f"{label_path}: missing label file for {image_path.name}")
        samples.append(Sample(_read_ppm(image_path), _read_labels(label_path)))
    logger.info("Read %d samples from %s", len(samples), root)
    return samples
