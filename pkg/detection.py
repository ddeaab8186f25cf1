#!/usr/bin/env python3
"""
Detection supervision and evaluation: IoU, target assignment, the composite
detection loss, prediction decoding, greedy NMS and COCO-style mAP.

Boxes are (cx, cy, w, h) normalized to the image. Head channels per cell are
ordered tx, ty, tw, th, objectness, class logits.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, logit

from errors import ConfigurationError, ContractError, DimensionError
from tensor_core import Tensor, bce_with_logits, exp, reduce_sum, sigmoid, slice_

logger = logging.getLogger(__name__)

# ========= 🔧 CONSTANTS ========= #
SCALE_LIMITS = (0.1, 0.3)
BOX_TOLERANCE = 1e-6
PERFECT_LOGIT = 1000.0
TW_CLIP = 20.0
COCO_IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


# ========= 📦 RECORDS ========= #
@dataclass(frozen=True)
class GroundTruthBox:
    """A labelled box; ``weight`` is the objectness target (MixUp soft labels)."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float
    weight: float = 1.0

    def __post_init__(self) -> None:
        if self.class_id < 0:
            raise ConfigurationError(f"class_id must be >= 0, got {self.class_id}")
        if not (0 < self.w <= 1 and 0 < self.h <= 1):
            raise ConfigurationError(f"box size must lie in (0, 1], got w={self.w} h={self.h}")
        x1, y1, x2, y2 = self.corners()
        if min(x1, y1) < -BOX_TOLERANCE or max(x2, y2) > 1 + BOX_TOLERANCE:
            raise ConfigurationError(f"box {self} extends outside the unit square")
        if not 0 <= self.weight <= 1:
            raise ConfigurationError(f"weight must lie in [0, 1], got {self.weight}")

    def corners(self) -> Tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class Detection:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float
    score: float

    def __post_init__(self) -> None:
        if not 0 <= self.score <= 1:
            raise ConfigurationError(f"score must lie in [0, 1], got {self.score}")


@dataclass
class Sample:
    """A CHW float image in [0, 1] with its labels."""

    image: np.ndarray
    labels: List[GroundTruthBox]

    @property
    def size(self) -> int:
        return self.image.shape[-1]


@dataclass(frozen=True)
class LossWeights:
    coord: float = 5.0
    obj: float = 1.0
    noobj: float = 0.5
    cls: float = 1.0

    def __post_init__(self) -> None:
        for name in ("coord", "obj", "noobj", "cls"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ConfigurationError(f"{name}: must be finite and >= 0, got {value}")


BoxLike = Union[GroundTruthBox, Detection, Sequence[float]]


def _cxcywh(box: BoxLike) -> Tuple[float, float, float, float]:
    if isinstance(box, (GroundTruthBox, Detection)):
        return box.cx, box.cy, box.w, box.h
    cx, cy, w, h = box
    return float(cx), float(cy), float(w), float(h)


# ========= 📐 IOU ========= #
def iou(a: BoxLike, b: BoxLike) -> float:
    """Intersection over union; 0 for disjoint or zero-area boxes."""
    ax, ay, aw, ah = _cxcywh(a)
    bx, by, bw, bh = _cxcywh(b)
    iw = min(ax + aw / 2, bx + bw / 2) - max(ax - aw / 2, bx - bw / 2)
    ih = min(ay + ah / 2, by + bh / 2) - max(ay - ah / 2, by - bh / 2)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = aw * ah + bw * bh - inter
    if union <= 0 or inter <= 0:
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of [N, 4] and [M, 4] cx,cy,w,h arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    a1, a2 = a[:, None, :2] - a[:, None, 2:] / 2, a[:, None, :2] + a[:, None, 2:] / 2
    b1, b2 = b[None, :, :2] - b[None, :, 2:] / 2, b[None, :, :2] + b[None, :, 2:] / 2
    wh = np.clip(np.minimum(a2, b2) - np.maximum(a1, b1), 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where((union > 0) & (inter > 0), inter / union, 0.0)


# ========= 🎯 TARGET ASSIGNMENT ========= #
@dataclass
class ScaleTargets:
    """Per-cell targets for one scale of a batch; cls is -1 where unassigned."""

    grid: int
    obj: np.ndarray
    box: np.ndarray
    cls: np.ndarray
    area: np.ndarray = field(repr=False)

    @classmethod
    def empty(cls, batch: int, grid: int) -> "ScaleTargets":
        return cls(
            grid=grid,
            obj=np.zeros((batch, grid, grid)),
            box=np.zeros((batch, 4, grid, grid)),
            cls=np.full((batch, grid, grid), -1, dtype=np.int64),
            area=np.zeros((batch, grid, grid)),
        )

    @property
    def positives(self) -> np.ndarray:
        return self.obj > 0


def scale_index(box: GroundTruthBox) -> int:
    side = max(box.w, box.h)
    if side <= SCALE_LIMITS[0]:
        return 0
    if side <= SCALE_LIMITS[1]:
        return 1
    return 2


def assign_targets(batch_gt: Sequence[Sequence[GroundTruthBox]], grids: Sequence[int]) -> List[ScaleTargets]:
    """One positive cell per surviving box: scale by size, cell by center.

    ``grids`` are the grid sizes of the stride 8/16/32 heads. A second box on
    an occupied cell replaces the first only if its area is larger.
    """
    if len(grids) != 3:
        raise DimensionError(f"expected three grid sizes, got {list(grids)}")
    targets = [ScaleTargets.empty(len(batch_gt), g) for g in grids]
    for n, boxes in enumerate(batch_gt):
        for box in boxes:
            if box.weight <= 0:
                continue
            t = targets[scale_index(box)]
            g = t.grid
            col = min(int(box.cx * g), g - 1)
            row = min(int(box.cy * g), g - 1)
            if t.obj[n, row, col] > 0 and t.area[n, row, col] >= box.area:
                continue
            t.obj[n, row, col] = box.weight
            t.box[n, :, row, col] = (box.cx * g - col, box.cy * g - row, np.log(box.w * g), np.log(box.h * g))
            t.cls[n, row, col] = box.class_id
            t.area[n, row, col] = box.area
    return targets


def encode_predictions(targets: Sequence[ScaleTargets], num_classes: int) -> List[np.ndarray]:
    """Raw head outputs that decode exactly to the assigned boxes."""
    preds = []
    for t in targets:
        batch, g = t.obj.shape[0], t.grid
        out = np.zeros((batch, 5 + num_classes, g, g))
        pos = t.positives
        out[:, 0:2] = logit(np.clip(t.box[:, 0:2], 1e-9, 1 - 1e-9))
        out[:, 2:4] = t.box[:, 2:4]
        out[:, 4] = np.where(pos, PERFECT_LOGIT, -PERFECT_LOGIT)
        onehot = np.full((batch, num_classes, g, g), -PERFECT_LOGIT)
        b, r, c = np.nonzero(pos)
        onehot[b, t.cls[b, r, c], r, c] = PERFECT_LOGIT
        out[:, 5:] = onehot
        preds.append(out)
    return preds


# ========= 📉 LOSS ========= #
def _check_finite(name: str, array: np.ndarray) -> None:
    if not np.isfinite(array).all():
        raise ContractError(f"{name} contains NaN or Inf")


def detection_loss(
    preds: Sequence[Tensor],
    targets: Sequence[ScaleTargets],
    weights: LossWeights = LossWeights(),
) -> Tuple[Tensor, Dict[str, float]]:
    """Weighted sum of coordinate, objectness, no-object and class terms over the batch.

    Width/height regress sqrt(w) = exp(tw / 2) / sqrt(G); the raw tw logit is
    masked to zero on negative cells so their exp never overflows.
    """
    if len(preds) != len(targets):
        raise DimensionError(f"{len(preds)} prediction scales but {len(targets)} target scales")
    coord = obj = noobj = cls_term = None
    for s, (pred, t) in enumerate(zip(preds, targets)):
        _check_finite(f"preds[{s}]", pred.data)
        _check_finite(f"targets[{s}].box", t.box)
        n, channels, gh, gw = pred.shape
        if (n, gh, gw) != t.obj.shape:
            raise DimensionError(f"preds[{s}] shape {pred.shape} does not match targets grid {t.obj.shape}")
        num_classes = channels - 5
        like = pred.dtype
        pos = t.positives.astype(like)
        neg = 1.0 - pos
        onehot = np.zeros((n, num_classes, gh, gw), dtype=like)
        b, r, c = np.nonzero(t.positives)
        onehot[b, t.cls[b, r, c], r, c] = 1.0

        def channel(i: int) -> Tensor:
            return slice_(pred, (slice(None), i))

        dx = sigmoid(channel(0)) - t.box[:, 0].astype(like)
        dy = sigmoid(channel(1)) - t.box[:, 1].astype(like)
        root_w = exp(channel(2) * pos * 0.5) - np.exp(t.box[:, 2] * 0.5 * pos).astype(like)
        root_h = exp(channel(3) * pos * 0.5) - np.exp(t.box[:, 3] * 0.5 * pos).astype(like)
        xy = reduce_sum((dx * dx + dy * dy) * pos)
        wh = reduce_sum((root_w * root_w + root_h * root_h) * pos) * (1.0 / gh)

        conf = sigmoid(channel(4))
        miss = conf - t.obj.astype(like)
        obj_s = reduce_sum(miss * miss * pos)
        noobj_s = reduce_sum(conf * conf * neg)
        class_logits = slice_(pred, (slice(None), slice(5, None)))
        cls_s = reduce_sum(bce_with_logits(class_logits, onehot) * pos[:, None])

        coord = xy + wh if coord is None else coord + xy + wh
        obj = obj_s if obj is None else obj + obj_s
        noobj = noobj_s if noobj is None else noobj + noobj_s
        cls_term = cls_s if cls_term is None else cls_term + cls_s

    parts = {
        "coord": coord * weights.coord,
        "obj": obj * weights.obj,
        "noobj": noobj * weights.noobj,
        "cls": cls_term * weights.cls,
    }
    total = parts["coord"] + parts["obj"] + parts["noobj"] + parts["cls"]
    breakdown = {name: term.item() for name, term in parts.items()}
    breakdown["total"] = total.item()
    return total, breakdown


# ========= 🔍 DECODE / NMS ========= #
def decode(preds: Sequence[Any], conf_thresh: float) -> List[List[Detection]]:
    """Per-image detections with score = sigmoid(obj) * max class probability >= conf_thresh."""
    if not 0 <= conf_thresh <= 1:
        raise ConfigurationError(f"conf_thresh must lie in [0, 1], got {conf_thresh}")
    arrays = [np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64) for p in preds]
    batch = arrays[0].shape[0]
    results: List[List[Detection]] = [[] for _ in range(batch)]
    for out in arrays:
        g = out.shape[-1]
        rows, cols = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
        cx = (cols + expit(out[:, 0])) / g
        cy = (rows + expit(out[:, 1])) / g
        w = np.minimum(np.exp(np.clip(out[:, 2], -TW_CLIP, TW_CLIP)) / g, 1.0)
        h = np.minimum(np.exp(np.clip(out[:, 3], -TW_CLIP, TW_CLIP)) / g, 1.0)
        probs = expit(out[:, 5:])
        best = probs.argmax(axis=1)
        score = expit(out[:, 4]) * probs.max(axis=1)

        x1, x2 = np.clip(cx - w / 2, 0, 1), np.clip(cx + w / 2, 0, 1)
        y1, y2 = np.clip(cy - h / 2, 0, 1), np.clip(cy + h / 2, 0, 1)
        keep = (score >= conf_thresh) & (x2 > x1) & (y2 > y1)
        for n, r, c in zip(*np.nonzero(keep)):
            results[n].append(Detection(
                class_id=int(best[n, r, c]),
                cx=float((x1[n, r, c] + x2[n, r, c]) / 2),
                cy=float((y1[n, r, c] + y2[n, r, c]) / 2),
                w=float(x2[n, r, c] - x1[n, r, c]),
                h=float(y2[n, r, c] - y1[n, r, c]),
                score=float(np.clip(score[n, r, c], 0, 1)),
            ))
    return results


def _rank(dets: Sequence[Detection]) -> List[Detection]:
    return sorted(dets, key=lambda d: (-d.score, d.cx, d.cy))


def nms(dets: Sequence[Detection], iou_thresh: float) -> List[Detection]:
    """Greedy per-class suppression of boxes with IoU > iou_thresh against a kept box."""
    if not 0 < iou_thresh <= 1:
        raise ConfigurationError(f"iou_thresh must lie in (0, 1], got {iou_thresh}")
    kept: List[Detection] = []
    kept_by_class: Dict[int, List[Detection]] = {}
    for det in _rank(dets):
        same = kept_by_class.setdefault(det.class_id, [])
        if same and iou_matrix([_cxcywh(det)], [_cxcywh(other) for other in same]).max() > iou_thresh:
            continue
        same.append(det)
        kept.append(det)
    return kept


# ========= 🏅 MEAN AVERAGE PRECISION ========= #
@dataclass
class MAPResult:
    map50: float
    map50_95: float
    per_class: Dict[int, Dict[str, float]]


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """101-point interpolated AP over a recall-sorted PR curve."""
    if recall.size == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < recall.size, envelope[np.minimum(idx, recall.size - 1)], 0.0)
    return float(sampled.mean())


def _class_ap(
    dets: List[Tuple[int, Detection]],
    gts: Dict[int, List[GroundTruthBox]],
    npos: int,
    threshold: float,
) -> float:
    if npos == 0:
        return 0.0
    matched = {image: np.zeros(len(boxes), dtype=bool) for image, boxes in gts.items()}
    hits = np.zeros(len(dets))
    for k, (image, det) in enumerate(dets):
        boxes = gts.get(image, [])
        best, best_iou = -1, threshold
        for j, gt in enumerate(boxes):
            if matched[image][j]:
                continue
            overlap = iou(det, gt)
            if overlap >= best_iou and (best < 0 or overlap > best_iou):
                best, best_iou = j, overlap
        if best >= 0:
            matched[image][best] = True
            hits[k] = 1
    tp = np.cumsum(hits)
    fp = np.cumsum(1 - hits)
    recall = tp / npos
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return average_precision(recall, precision)


def mean_average_precision(
    dets_per_image: Sequence[Sequence[Detection]],
    gts_per_image: Sequence[Sequence[GroundTruthBox]],
    iou_thresholds: Optional[Sequence[float]] = None,
) -> MAPResult:
    """COCO-style mAP@0.5 and mAP@[.5:.95].

    Classes with neither ground truth nor detections are left out; a class
    with detections but no ground truth scores 0.
    """
    if len(dets_per_image) != len(gts_per_image):
        raise DimensionError(f"{len(dets_per_image)} detection lists for {len(gts_per_image)} images")
    thresholds = list(iou_thresholds) if iou_thresholds is not None else list(COCO_IOU_THRESHOLDS)
    classes = sorted({b.class_id for boxes in gts_per_image for b in boxes}
                     | {d.class_id for dets in dets_per_image for d in dets})
    if not classes:
        return MAPResult(0.0, 0.0, {})

    per_class: Dict[int, Dict[str, float]] = {}
    table = np.zeros((len(thresholds), len(classes)))
    for ci, class_id in enumerate(classes):
        gts = {i: [b for b in boxes if b.class_id == class_id] for i, boxes in enumerate(gts_per_image)}
        npos = sum(len(boxes) for boxes in gts.values())
        ranked = sorted(
            ((i, d) for i, dets in enumerate(dets_per_image) for d in dets if d.class_id == class_id),
            key=lambda item: (-item[1].score, item[1].cx, item[1].cy),
        )
        for ti, threshold in enumerate(thresholds):
            table[ti, ci] = _class_ap(ranked, gts, npos, threshold)
        per_class[class_id] = {"ap": float(table[:, ci].mean()), "ap50": _class_ap(ranked, gts, npos, 0.5)}

    map50 = float(np.mean([per_class[c]["ap50"] for c in classes]))
    return MAPResult(map50=map50, map50_95=float(table.mean(axis=1).mean()), per_class=per_class)
