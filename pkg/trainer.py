#!/usr/bin/env python3
"""
Training loop: SGD with momentum over the detection loss, global-norm gradient
clipping, linear warmup then cosine decay, Mosaic/MixUp on the fly, JSON-lines metrics per epoch.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from augment import mixup, mosaic
from checkpoint import save_checkpoint
from detection import (
    LossWeights,
    MAPResult,
    Sample,
    assign_targets,
    decode,
    detection_loss,
    mean_average_precision,
    nms,
)
from errors import ConfigurationError, DivergenceError
from model_assembly import Model, output_grid_sizes
from nn_blocks import Module
from tensor_core import ComputeGraph, Parameter, Tensor, backward

logger = logging.getLogger(__name__)

LOSS_TERMS = ("loss", "coord", "obj", "noobj", "cls")


@dataclass
class TrainSchedule:
    epochs: int = 10
    base_lr: float = 0.01
    lr_min: float = 1e-4
    warmup_steps: int = 10
    batch_size: int = 4
    seed: int = 0
    momentum: float = 0.9
    mosaic_prob: float = 0.5
    mixup_prob: float = 0.15
    grad_clip: float = 10.0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError(f"epochs and batch_size must be >= 1, got {self.epochs}, {self.batch_size}")
        if not 0 < self.lr_min <= self.base_lr:
            raise ConfigurationError(f"need 0 < lr_min <= base_lr, got lr_min={self.lr_min} base_lr={self.base_lr}")
        if self.warmup_steps < 0:
            raise ConfigurationError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        for name in ("mosaic_prob", "mixup_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        if not math.isfinite(self.grad_clip) or self.grad_clip < 0:
            raise ConfigurationError(f"grad_clip must be finite and >= 0 (0 disables), got {self.grad_clip}")

    def steps_per_epoch(self, dataset_size: int) -> int:
        return math.ceil(dataset_size / self.batch_size)

    def lr(self, step: int, total_steps: int) -> float:
        """Linear warmup from base_lr / warmup_steps, then cosine down to lr_min at the last step."""
        if step < self.warmup_steps:
            return self.base_lr * (step + 1) / self.warmup_steps
        span = max(1, total_steps - 1 - self.warmup_steps)
        progress = min(1.0, (step - self.warmup_steps) / span)
        return self.lr_min + 0.5 * (self.base_lr - self.lr_min) * (1 + math.cos(math.pi * progress))


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Rescale gradients so their joint L2 norm is at most ``max_norm`` (0 disables); returns the norm before clipping."""
    held = [p for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in held))
    if max_norm > 0 and norm > max_norm:
        for p in held:
            p.grad = p.grad * (max_norm / norm)
    return norm


class SGD:
    """Heavy-ball momentum: v = mu * v + g; p -= lr * v."""

    def __init__(self, params: Sequence[Parameter], momentum: float = 0.9) -> None:
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for param, velocity in zip(self.params, self.velocity):
            if param.grad is None:
                continue
            velocity *= self.momentum
            velocity += param.grad
            param.data -= (lr * velocity).astype(param.data.dtype)


@dataclass
class TrainResult:
    model: Model
    metrics: List[Dict[str, float]]


def _augmented_batch(
    dataset: Sequence[Sample],
    indices: np.ndarray,
    schedule: TrainSchedule,
    rng: np.random.Generator,
) -> List[Sample]:
    batch = []
    for index in indices:
        sample = dataset[int(index)]
        if rng.random() < schedule.mosaic_prob:
            partners = rng.choice(len(dataset), size=3)
            sample = mosaic([sample] + [dataset[int(i)] for i in partners], rng=rng)
        if rng.random() < schedule.mixup_prob:
            sample = mixup(sample, dataset[int(rng.integers(len(dataset)))], rng=rng)
        batch.append(sample)
    return batch


def train(
    model: Model,
    dataset: Sequence[Sample],
    schedule: TrainSchedule,
    log_path: Optional[Union[str, Path]] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """Train ``model`` in place; every random draw comes from ``schedule.seed``."""
    if not dataset:
        raise ConfigurationError("cannot train on an empty dataset")
    rng = np.random.default_rng(schedule.seed)
    grids = output_grid_sizes(model.cfg.input_size)
    params = model.parameters()
    optimizer = SGD(params, schedule.momentum)
    steps_per_epoch = schedule.steps_per_epoch(len(dataset))
    total_steps = schedule.epochs * steps_per_epoch
    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "w")

    metrics: List[Dict[str, float]] = []
    step = 0
    try:
        for epoch in range(schedule.epochs):
            started = time.perf_counter()
            sums = dict.fromkeys(LOSS_TERMS, 0.0)
            order = rng.permutation(len(dataset))
            for start in range(0, len(order), schedule.batch_size):
                batch = _augmented_batch(dataset, order[start:start + schedule.batch_size], schedule, rng)
                images = Tensor(np.stack([s.image for s in batch]))
                targets = assign_targets([s.labels for s in batch], grids)
                lr = schedule.lr(step, total_steps)

                with ComputeGraph() as graph:
                    preds = model(images)
                    if not all(np.isfinite(p.data).all() for p in preds):
                        raise DivergenceError(f"non-finite predictions at step {step} (epoch {epoch})")
                    total, parts = detection_loss(preds, targets, schedule.weights)
                    scaled = total * (1.0 / len(batch))
                if not math.isfinite(parts["total"]):
                    raise DivergenceError(f"loss is {parts['total']} at step {step} (epoch {epoch})")

                model.zero_grad()
                backward(scaled, graph, params)
                norm = clip_grad_norm(params, schedule.grad_clip)
                if not math.isfinite(norm):
                    raise DivergenceError(f"gradient norm is {norm} at step {step} (epoch {epoch})")
                optimizer.step(lr)

                sums["loss"] += parts["total"] / len(batch)
                for term in ("coord", "obj", "noobj", "cls"):
                    sums[term] += parts[term] / len(batch)
                step += 1

            record: Dict[str, float] = {"epoch": epoch, "steps": step, "lr": lr}
            record.update({term: value / steps_per_epoch for term, value in sums.items()})
            record["epoch_time_s"] = time.perf_counter() - started
            metrics.append(record)
            logger.info("epoch %d/%d loss=%.4f lr=%.2e (%.1fs)",
                        epoch + 1, schedule.epochs, record["loss"], lr, record["epoch_time_s"])
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if checkpoint_dir is not None:
                save_checkpoint(model, Path(checkpoint_dir) / f"epoch{epoch + 1:03d}.y12c")
                save_checkpoint(model, Path(checkpoint_dir) / "last.y12c")
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(model, metrics)


def evaluate(
    model: Module,
    dataset: Sequence[Sample],
    conf_thresh: float = 0.25,
    iou_thresh: float = 0.5,
    batch_size: int = 8,
) -> MAPResult:
    """Decode, NMS and score ``model`` over a labelled dataset."""
    detections = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        preds = model(Tensor(np.stack([s.image for s in chunk])))
        detections.extend(nms(dets, iou_thresh) for dets in decode(preds, conf_thresh))
    return mean_average_precision(detections, [s.labels for s in dataset])

