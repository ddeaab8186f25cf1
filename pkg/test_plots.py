#!/usr/bin/env python3
"""
Tests for SVG chart output.
"""

from bench import BenchRecord
from plots import frontier_svg, latency_vs_n_svg


def record(kernel, n, median):
    return BenchRecord(kernel=kernel, n=n, d=8, L=1, Br=0, Bc=0, flops=4 * n * n * 8,
                       peak_scratch_elements=n * n, wall_ns_median=median, wall_ns_p10=median * 0.9,
                       wall_ns_p90=median * 1.2, thread_count=1)


def test_latency_chart_is_svg(tmp_path):
    records = [record("naive", 64, 2e5), record("naive", 128, 8e5), record("tiled", 64, 3e5)]
    path = latency_vs_n_svg(records, tmp_path / "sub" / "bench.svg")
    text = path.read_text()
    assert text.lstrip().startswith("<?xml")
    assert "<svg" in text


def test_frontier_chart_is_svg(tmp_path):
    path = frontier_svg([("n", 3.2, 0.41), ("s", 7.9, 0.55)], tmp_path / "frontier.svg")
    assert "<svg" in path.read_text()
