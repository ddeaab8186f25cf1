#!/usr/bin/env python3
"""
Attention micro-benchmarks.

Three kernels run on identical seeded inputs: ``naive`` (full attention over
all n tokens), ``area`` (the same math restricted to L bands) and ``tiled``
(the online-softmax kernel over the same L bands). Every tiled configuration
is checked against the area result before anything is timed; a report never
carries timings for an unverified kernel.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, fields
from io import StringIO
from itertools import product
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from threadpoolctl import threadpool_limits

from attention_kernels import AttentionConfig, area_attention, sdpa
from errors import ConfigurationError, VerificationError
from settings import BENCH_REPEATS, BENCH_WARMUP, DEFAULT_THREADS
from tensor_core import OpCounter, Tensor

logger = logging.getLogger(__name__)

GATE_TOLERANCE = 1e-5
MIN_REPEATS = 30

Runner = Callable[[Tensor, AttentionConfig], Tensor]


def run_naive(tokens: Tensor, cfg: AttentionConfig) -> Tensor:
    return sdpa(tokens, tokens, tokens)


def run_area(tokens: Tensor, cfg: AttentionConfig) -> Tensor:
    return area_attention(tokens, cfg, kernel="naive")


def run_tiled(tokens: Tensor, cfg: AttentionConfig) -> Tensor:
    return area_attention(tokens, cfg, kernel="tiled")


RUNNERS: Dict[str, Runner] = {"naive": run_naive, "area": run_area, "tiled": run_tiled}


@dataclass
class BenchRecord:
    kernel: str
    n: int
    d: int
    L: int
    Br: int
    Bc: int
    flops: int
    peak_scratch_elements: int
    wall_ns_median: float
    wall_ns_p10: float
    wall_ns_p90: float
    thread_count: int


FIELDNAMES = [f.name for f in fields(BenchRecord)]


@dataclass
class BenchReport:
    records: List[BenchRecord]
    max_gate_error: float

    def as_dicts(self) -> List[Dict[str, object]]:
        return [asdict(record) for record in self.records]


@dataclass(frozen=True)
class _Case:
    kernel: str
    n: int
    d: int
    areas: int
    tiles: Tuple[int, int]


def time_call(fn: Callable[[], object], warmup: int = BENCH_WARMUP, repeats: int = BENCH_REPEATS) -> Tuple[float, float, float]:
    """Median, p10 and p90 wall time in nanoseconds after ``warmup`` untimed calls."""
    if repeats < MIN_REPEATS:
        raise ConfigurationError(f"timing needs at least {MIN_REPEATS} repetitions, got {repeats}")
    for _ in range(warmup):
        fn()
    samples = np.empty(repeats)
    for i in range(repeats):
        started = time.perf_counter_ns()
        fn()
        samples[i] = max(1, time.perf_counter_ns() - started)
    p10, median, p90 = np.percentile(samples, [10, 50, 90])
    return float(median), float(p10), float(p90)


def _inputs(seed: int, n: int, d: int) -> Tensor:
    rng = np.random.default_rng([seed, n, d])
    return Tensor(rng.normal(size=(n, d)))


def _cases(ns: Sequence[int], ds: Sequence[int], areas: Sequence[int], tiles: Sequence[int]) -> List[_Case]:
    cases = []
    for n, d in product(ns, ds):
        cases.append(_Case("naive", n, d, 1, (0, 0)))
        for L in areas:
            if n % L:
                raise ConfigurationError(f"n={n} is not divisible by L={L}")
            cases.append(_Case("area", n, d, L, (0, 0)))
            span = n // L
            cases.extend(_Case("tiled", n, d, L, (min(t, span), min(t, span))) for t in tiles)
    return cases


def _config(case: _Case, threads: int) -> AttentionConfig:
    rows, cols = case.tiles
    return AttentionConfig(head_dim=case.d, num_areas=case.areas, tile_rows=rows or 1, tile_cols=cols or 1,
                           threads=threads)


def verify_cases(cases: Sequence[_Case], runners: Dict[str, Runner], seed: int, threads: int) -> float:
    """Largest |tiled - area| over all tiled cases; raises VerificationError above the gate tolerance."""
    worst = 0.0
    failures = []
    for case in cases:
        if case.kernel != "tiled":
            continue
        tokens = _inputs(seed, case.n, case.d)
        cfg = _config(case, threads)
        reference = runners["area"](tokens, cfg).data.astype(np.float64)
        error = float(np.max(np.abs(runners["tiled"](tokens, cfg).data - reference)))
        worst = max(worst, error)
        if not error <= GATE_TOLERANCE:
            failures.append(f"n={case.n} d={case.d} L={case.areas} tiles={case.tiles}: error {error:.3e}")
    if failures:
        for failure in failures:
            logger.error("tiled kernel failed verification: %s", failure)
        raise VerificationError(f"{len(failures)} tiled configuration(s) exceed {GATE_TOLERANCE}: {failures[0]}")
    return worst


def bench_attention(
    ns: Sequence[int],
    ds: Sequence[int],
    areas: Sequence[int],
    tiles: Sequence[int],
    threads: int = DEFAULT_THREADS,
    seed: int = 0,
    warmup: int = BENCH_WARMUP,
    repeats: int = BENCH_REPEATS,
    runners: Optional[Dict[str, Runner]] = None,
) -> BenchReport:
    """Verify every tiled configuration, then time all kernels with BLAS pinned to ``threads``."""
    runners = {**RUNNERS, **(runners or {})}
    cases = _cases(ns, ds, areas, tiles)
    with threadpool_limits(limits=threads):
        worst = verify_cases(cases, runners, seed, threads)
        logger.info("verified %d tiled configurations (max error %.2e)",
                    sum(c.kernel == "tiled" for c in cases), worst)
        records = []
        for case in cases:
            tokens = _inputs(seed, case.n, case.d)
            cfg = _config(case, threads)
            run = runners[case.kernel]
            with OpCounter() as counter:
                run(tokens, cfg)
            median, p10, p90 = time_call(lambda: run(tokens, cfg), warmup, repeats)
            record = BenchRecord(
                kernel=case.kernel, n=case.n, d=case.d, L=case.areas, Br=case.tiles[0], Bc=case.tiles[1],
                flops=counter.flops, peak_scratch_elements=counter.peak_scratch,
                wall_ns_median=median, wall_ns_p10=p10, wall_ns_p90=p90, thread_count=threads,
            )
            logger.info("%s n=%d d=%d L=%d tiles=%dx%d: %.0f ns median",
                        record.kernel, record.n, record.d, record.L, record.Br, record.Bc, median)
            records.append(record)
    return BenchReport(records, worst)


def write_report(report: BenchReport, path: Union[str, Path, None], fmt: str = "csv") -> str:
    """Serialize as CSV or JSON; returns the text and writes it to ``path`` when given."""
    rows = report.as_dicts()
    if fmt == "json":
        text = json.dumps({"records": rows, "max_gate_error": report.max_gate_error}, indent=2) + "\n"
    elif fmt == "csv":
        buffer = StringIO()
        writer = csv.DictWriter(buffer, fieldnames=FIELDNAMES, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        text = buffer.getvalue()
    else:
        raise ConfigurationError(f"unknown report format {fmt!r}; choose csv or json")
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text
