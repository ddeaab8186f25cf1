#!/usr/bin/env python3
"""
SVG charts for benchmark and evaluation reports (headless Agg backend).
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from bench import BenchRecord  # noqa: E402

logger = logging.getLogger(__name__)

KERNEL_STYLE = {"naive": ("tab:red", "o"), "area": ("tab:blue", "s"), "tiled": ("tab:green", "^")}


def _save(fig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    logger.info("Wrote %s", path)
    return path


def latency_vs_n_svg(records: Sequence[BenchRecord], path: Union[str, Path]) -> Path:
    """Median wall time against token count, one series per kernel, p10-p90 as error bars."""
    fig, ax = plt.subplots(figsize=(6, 4))
    series: Dict[str, List[BenchRecord]] = {}
    for record in records:
        series.setdefault(record.kernel, []).append(record)
    for kernel, rows in series.items():
        rows = sorted(rows, key=lambda r: r.n)
        color, marker = KERNEL_STYLE.get(kernel, ("tab:gray", "x"))
        medians = [r.wall_ns_median / 1e3 for r in rows]
        low = [(r.wall_ns_median - r.wall_ns_p10) / 1e3 for r in rows]
        high = [(r.wall_ns_p90 - r.wall_ns_median) / 1e3 for r in rows]
        ax.errorbar([r.n for r in rows], medians, yerr=[low, high], fmt=marker, color=color,
                    label=kernel, capsize=3, linestyle="none")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("tokens n")
    ax.set_ylabel("median wall time (us)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    return _save(fig, path)


def frontier_svg(points: Sequence[Tuple[str, float, float]], path: Union[str, Path]) -> Path:
    """Latency-vs-mAP@50 scatter; ``points`` are (label, median latency ms, map50)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, latency_ms, map50 in points:
        ax.scatter([latency_ms], [map50], s=40)
        ax.annotate(label, (latency_ms, map50), textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.set_xlabel("median latency per image (ms)")
    ax.set_ylabel("mAP@50")
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    return _save(fig, path)
