#!/usr/bin/env python3
"""
Tests for the learning-rate schedule, the optimizer and the training loop.
"""

import json

import numpy as np
import pytest

from detection import Sample
from errors import ConfigurationError, DivergenceError
from model_assembly import ModelConfig, build_model
from synth_data import synth_dataset
from tensor_core import Parameter
from trainer import SGD, TrainSchedule, clip_grad_norm, evaluate, train


def strip_time(metrics):
    return [{k: v for k, v in record.items() if k != "epoch_time_s"} for record in metrics]


# ---------------------------------------------------------------- schedule / optimizer
def test_schedule_endpoints_and_shape():
    schedule = TrainSchedule(base_lr=0.02, lr_min=0.001, warmup_steps=5)
    total = 60
    lrs = [schedule.lr(step, total) for step in range(total)]
    assert lrs[0] == pytest.approx(0.02 / 5)
    assert lrs[4] == pytest.approx(0.02)
    assert lrs[-1] == pytest.approx(0.001)
    assert all(lr > 0 for lr in lrs)
    after = lrs[5:]
    assert all(a >= b for a, b in zip(after, after[1:]))


def test_schedule_without_warmup_starts_at_base():
    assert TrainSchedule(warmup_steps=0).lr(0, 10) == pytest.approx(0.01)


@pytest.mark.parametrize("kwargs", [
    {"epochs": 0},
    {"batch_size": 0},
    {"lr_min": 0.0},
    {"lr_min": 0.1, "base_lr": 0.01},
    {"momentum": 1.0},
    {"mosaic_prob": 1.5},
    {"grad_clip": -1.0},
    {"grad_clip": float("nan")},
])
def test_schedule_validation(kwargs):
    with pytest.raises(ConfigurationError):
        TrainSchedule(**kwargs)


def test_sgd_momentum_updates():
    param = Parameter(np.array([1.0]), dtype=np.float64)
    optimizer = SGD([param], momentum=0.9)
    for _ in range(2):
        param.grad = np.array([1.0])
        optimizer.step(0.1)
    assert param.data[0] == pytest.approx(1.0 - 0.1 - 0.19)


def test_clip_grad_norm_scales_jointly():
    a = Parameter(np.array([3.0]), dtype=np.float64)
    b = Parameter(np.array([0.0, 4.0]), dtype=np.float64)
    idle = Parameter(np.array([1.0]), dtype=np.float64)
    a.grad, b.grad = np.array([3.0]), np.array([0.0, 4.0])
    assert clip_grad_norm([a, b, idle], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(a.grad, [0.6])
    np.testing.assert_allclose(b.grad, [0.0, 0.8])
    assert idle.grad is None


def test_clip_grad_norm_leaves_small_or_disabled_alone():
    param = Parameter(np.array([3.0, 4.0]), dtype=np.float64)
    param.grad = np.array([3.0, 4.0])
    assert clip_grad_norm([param], 10.0) == pytest.approx(5.0)
    assert clip_grad_norm([param], 0.0) == pytest.approx(5.0)
    np.testing.assert_allclose(param.grad, [3.0, 4.0])


# ---------------------------------------------------------------- loop
@pytest.fixture(scope="module")
def tiny_dataset():
    return synth_dataset(2, 64, seed=0)


def test_training_is_deterministic_and_logged(tiny_dataset, tmp_path):
    schedule = TrainSchedule(epochs=2, batch_size=2, warmup_steps=0, seed=3)
    first = train(build_model(ModelConfig(), seed=0), tiny_dataset, schedule,
                  log_path=tmp_path / "metrics.jsonl", checkpoint_dir=tmp_path / "ckpt")
    second = train(build_model(ModelConfig(), seed=0), tiny_dataset, schedule)
    assert strip_time(first.metrics) == strip_time(second.metrics)

    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2
    record = json.loads(lines[-1])
    assert set(record) == {"epoch", "steps", "lr", "loss", "coord", "obj", "noobj", "cls", "epoch_time_s"}
    assert record["steps"] == 2
    assert record["lr"] == pytest.approx(schedule.lr_min)
    assert (tmp_path / "ckpt" / "last.y12c").exists()
    assert (tmp_path / "ckpt" / "epoch002.y12c").exists()


def test_nan_input_reports_the_step(tiny_dataset):
    broken = [tiny_dataset[0]]
    broken[0] = Sample(np.full_like(broken[0].image, np.nan), broken[0].labels)
    with pytest.raises(DivergenceError, match="step 0"):
        train(build_model(ModelConfig()), broken, TrainSchedule(epochs=1, batch_size=1, mosaic_prob=0, mixup_prob=0))


def test_evaluate_scores_are_bounded(tiny_dataset):
    result = evaluate(build_model(ModelConfig()), tiny_dataset, conf_thresh=0.0001)
    assert 0.0 <= result.map50 <= 1.0
    assert 0.0 <= result.map50_95 <= 1.0


@pytest.mark.slow
def test_overfits_ten_images():
    dataset = synth_dataset(10, 64, seed=1)
    schedule = TrainSchedule(epochs=200, batch_size=10, base_lr=0.05, lr_min=0.005, warmup_steps=5,
                             mosaic_prob=0.0, mixup_prob=0.0, grad_clip=10.0)
    metrics = train(build_model(ModelConfig(), seed=0), dataset, schedule).metrics
    assert metrics[-1]["loss"] <= 0.1 * metrics[0]["loss"]
