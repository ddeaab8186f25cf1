#!/usr/bin/env python3
"""
Tests for the attention benchmark harness.
"""

import csv
import io
import json

import pytest

from attention_kernels import AttentionConfig, attention_cost, tiled_scratch_bound
from bench import FIELDNAMES, bench_attention, run_tiled, time_call, write_report
from errors import ConfigurationError, VerificationError

FAST = {"warmup": 0, "repeats": 30}


def rows_by_kernel(report, kernel):
    return [r for r in report.records if r.kernel == kernel]


def test_area_flops_are_a_quarter_of_naive():
    report = bench_attention([256], [32], [4], [64], **FAST)
    naive, = rows_by_kernel(report, "naive")
    area, = rows_by_kernel(report, "area")
    tiled, = rows_by_kernel(report, "tiled")
    assert naive.flops == 4 * 256 * 256 * 32
    assert area.flops * 4 == naive.flops
    assert tiled.flops == area.flops
    assert report.max_gate_error <= 1e-5


def test_tiled_scratch_is_constant_in_n():
    report = bench_attention([128, 256, 512], [16], [1], [32], **FAST)
    tiled = rows_by_kernel(report, "tiled")
    naive = rows_by_kernel(report, "naive")
    assert {r.peak_scratch_elements for r in tiled} == {
        tiled_scratch_bound(512, 16, AttentionConfig(head_dim=16, tile_rows=32, tile_cols=32))}
    assert [r.peak_scratch_elements for r in naive] == [128 ** 2, 256 ** 2, 512 ** 2]


def test_area_scratch_columns_match_the_static_figures():
    report = bench_attention([64], [8], [4], [16], threads=2, **FAST)
    area, = rows_by_kernel(report, "area")
    tiled, = rows_by_kernel(report, "tiled")
    assert area.peak_scratch_elements == attention_cost(64, 8, 4).peak_scratch_elements == 4 * 16 * 16
    cfg = AttentionConfig(head_dim=8, num_areas=4, tile_rows=16, tile_cols=16, threads=2)
    assert tiled.peak_scratch_elements == tiled_scratch_bound(16, 8, cfg, work_items=4)
    assert tiled.peak_scratch_elements == 2 * (16 * 16 + 3 * 16 + 16 * 8)


def test_timings_are_positive_and_rows_complete():
    report = bench_attention([64], [8], [1, 2], [16], threads=1, **FAST)
    assert [r.kernel for r in report.records] == ["naive", "area", "tiled", "area", "tiled"]
    for r in report.records:
        assert 0 < r.wall_ns_p10 <= r.wall_ns_median <= r.wall_ns_p90
        assert r.thread_count == 1


def test_static_columns_are_deterministic():
    def static(report):
        return [(r.kernel, r.flops, r.peak_scratch_elements) for r in report.records]

    assert static(bench_attention([64], [8], [2], [8], seed=4, **FAST)) == static(
        bench_attention([64], [8], [2], [8], seed=4, **FAST))


def test_corrupted_kernel_fails_gate_before_timing():
    timed = []

    def corrupted(tokens, cfg):
        timed.append(1)
        out = run_tiled(tokens, cfg)
        out.data[0, 0] += 1e-3
        return out

    with pytest.raises(VerificationError, match="exceed"):
        bench_attention([64], [8], [1], [16], runners={"tiled": corrupted}, **FAST)
    assert len(timed) == 1


def test_divisibility_violation():
    with pytest.raises(ConfigurationError, match="divisible"):
        bench_attention([100], [8], [3], [16], **FAST)


def test_time_call_enforces_repeat_floor():
    with pytest.raises(ConfigurationError):
        time_call(lambda: None, warmup=0, repeats=5)


def test_report_formats(tmp_path):
    report = bench_attention([32], [4], [2], [8], **FAST)
    text = write_report(report, tmp_path / "bench.csv", "csv")
    rows = list(csv.DictReader(io.StringIO(text)))
    assert list(rows[0]) == FIELDNAMES
    assert len(rows) == 3
    assert (tmp_path / "bench.csv").read_text() == text

    document = json.loads(write_report(report, None, "json"))
    assert set(document) == {"records", "max_gate_error"}
    assert set(document["records"][0]) == set(FIELDNAMES)
    with pytest.raises(ConfigurationError):
        write_report(report, None, "xml")


@pytest.mark.slow
def test_four_areas_at_least_halve_full_attention_time():
    report = bench_attention([1024], [32], [4], [64], warmup=5, repeats=30)
    naive, = rows_by_kernel(report, "naive")
    area, = rows_by_kernel(report, "area")
    assert naive.wall_ns_median >= 2 * area.wall_ns_median
