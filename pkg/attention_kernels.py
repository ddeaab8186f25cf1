#!/usr/bin/env python3
"""
Scaled dot-product attention, its area-segmented form, and a tiled
online-softmax kernel that never materializes the n x n score matrix.

Token tensors are [..., n, d]; every leading axis (batch, head, area) is an
independent work item.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, List, Optional

import numpy as np
from scipy.linalg.blas import get_blas_funcs

from errors import ConfigurationError, DimensionError
from settings import DEFAULT_AREA_COUNT, DEFAULT_THREADS, DEFAULT_TILE_COLS, DEFAULT_TILE_ROWS
from tensor_core import OpCounter, Tensor, current_counter, matmul, mul, reshape, softmax, transpose

logger = logging.getLogger(__name__)

KERNELS = ("naive", "tiled")


@dataclass
class AttentionConfig:
    """Head geometry, area count L and tile sizes Br x Bc."""

    num_heads: int = 1
    head_dim: int = 1
    num_areas: int = DEFAULT_AREA_COUNT
    tile_rows: int = DEFAULT_TILE_ROWS
    tile_cols: int = DEFAULT_TILE_COLS
    threads: int = DEFAULT_THREADS

    def __post_init__(self) -> None:
        for field_name in ("num_heads", "head_dim", "num_areas", "tile_rows", "tile_cols", "threads"):
            value = getattr(self, field_name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(f"AttentionConfig.{field_name} must be a positive int, got {value!r}")


@dataclass
class CostReport:
    flops: int
    peak_scratch_elements: int
    wall_ns: Optional[int] = None


def _check_qkv(q: Any, k: Any, v: Any, cfg: Optional[AttentionConfig]) -> None:
    if len(q.shape) < 2:
        raise DimensionError(f"attention expects [..., n, d] tokens, got shape {q.shape}")
    if tuple(k.shape) != tuple(v.shape):
        raise DimensionError(f"key shape {k.shape} and value shape {v.shape} differ")
    if tuple(q.shape) != tuple(k.shape):
        raise DimensionError(f"query shape {q.shape} and key shape {k.shape} differ")
    if cfg is not None and q.shape[-1] != cfg.head_dim:
        raise DimensionError(f"head dimension axis (-1) is {q.shape[-1]}, config expects {cfg.head_dim}")


def sdpa(q: Tensor, k: Tensor, v: Tensor, cfg: Optional[AttentionConfig] = None) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V over the last two axes, built from taped primitives."""
    _check_qkv(q, k, v, cfg)
    ndim = q.ndim
    d = q.shape[-1]
    swap = tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)
    scores = mul(matmul(q, transpose(k, swap)), 1.0 / math.sqrt(d))
    counter = current_counter()
    if counter is not None:
        counter.alloc(scores.size)
    out = matmul(softmax(scores, axis=-1), v)
    if counter is not None:
        counter.free(scores.size)
    return out


def _split_areas(shape: tuple, num_areas: int) -> tuple:
    n, d = shape[-2], shape[-1]
    if n % num_areas:
        raise ConfigurationError(f"token count {n} is not divisible by num_areas={num_areas}")
    return tuple(shape[:-2]) + (num_areas, n // num_areas, d)


def area_attention(
    tokens: Tensor,
    cfg: AttentionConfig,
    key: Optional[Tensor] = None,
    value: Optional[Tensor] = None,
    kernel: str = "naive",
) -> Tensor:
    """Attention restricted to L contiguous token bands.

    Queries come from ``tokens``; keys and values default to ``tokens`` too.
    Band j holds tokens [j*n/L, (j+1)*n/L) and never sees the others.
    """
    if kernel not in KERNELS:
        raise ConfigurationError(f"unknown attention kernel {kernel!r}; choose from {KERNELS}")
    key = tokens if key is None else key
    value = tokens if value is None else value
    _check_qkv(tokens, key, value, cfg)
    banded = _split_areas(tokens.shape, cfg.num_areas)

    if kernel == "tiled":
        out = tiled_attention(
            np.reshape(_array(tokens), banded),
            np.reshape(_array(key), banded),
            np.reshape(_array(value), banded),
            cfg,
        )
        return Tensor.wrap(out.data.reshape(tokens.shape))

    out = sdpa(reshape(tokens, banded), reshape(key, banded), reshape(value, banded))
    return reshape(out, tokens.shape)


def _array(x: Any) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# ========= 🧱 TILED ONLINE-SOFTMAX KERNEL ========= #
def _tiled_one(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    out: np.ndarray,
    br: int,
    bc: int,
    counter: Optional[OpCounter],
) -> None:
    """One [n, d] problem, written into ``out``.

    Scratch is one Br*Bc score tile, the running max m, the normalizer l, a
    row temporary and a Br*d accumulator, all reused across tiles. Score and
    accumulator views are Fortran-ordered so BLAS gemm writes them in place.
    """
    n, d = q.shape
    scale = 1.0 / math.sqrt(d)
    gemm = get_blas_funcs("gemm", (q,))
    score_buf = np.empty(br * bc, dtype=q.dtype)
    acc_buf = np.empty(br * d, dtype=q.dtype)
    m_buf = np.empty(br, dtype=q.dtype)
    l_buf = np.empty(br, dtype=q.dtype)
    t_buf = np.empty(br, dtype=q.dtype)

    for r0 in range(0, n, br):
        rows = min(br, n - r0)
        qi = q[r0:r0 + rows]
        acc = acc_buf[: rows * d].reshape((rows, d), order="F")
        m, l, t = m_buf[:rows], l_buf[:rows], t_buf[:rows]
        acc.fill(0)
        m.fill(-np.inf)
        l.fill(0)

        for c0 in range(0, n, bc):
            cols = min(bc, n - c0)
            kj, vj = k[c0:c0 + cols], v[c0:c0 + cols]
            s = score_buf[: rows * cols].reshape((rows, cols), order="F")
            s = _gemm_into(gemm, scale, qi.T, kj.T, 0.0, s, trans_a=1, trans_b=0)

            np.max(s, axis=1, out=t)
            np.maximum(t, m, out=t)
            s -= t[:, None]
            np.exp(s, out=s)

            # m becomes the rescale factor exp(m_old - m_new); accumulator first, then l
            np.subtract(m, t, out=m)
            np.exp(m, out=m)
            acc *= m[:, None]
            l *= m
            np.sum(s, axis=1, out=m)
            l += m
            acc = _gemm_into(gemm, 1.0, s, vj.T, 1.0, acc, trans_a=0, trans_b=1)
            m[:] = t

            if counter is not None:
                counter.add_flops(4 * rows * cols * d)

        acc /= l[:, None]
        out[r0:r0 + rows] = acc


def _tile_scratch(br: int, bc: int, d: int) -> int:
    return br * bc + 3 * br + br * d


def _gemm_into(gemm: Any, alpha: float, a: np.ndarray, b: np.ndarray, beta: float, c: np.ndarray,
               trans_a: int, trans_b: int) -> np.ndarray:
    result = gemm(alpha, a, b, beta=beta, c=c, trans_a=trans_a, trans_b=trans_b, overwrite_c=1)
    if not np.shares_memory(result, c):
        c[...] = result
    return c


def tiled_attention(q: Any, k: Any, v: Any, cfg: AttentionConfig) -> Tensor:
    """Numerically equal to sdpa; forward only.

    Tile sizes larger than n are clamped. Leading axes are independent work
    items, run on ``cfg.threads`` workers and stored in submission order.
    Each concurrent worker holds one tile set of scratch; see
    tiled_scratch_bound.
    """
    q, k, v = (np.ascontiguousarray(_array(x)) for x in (q, k, v))
    _check_qkv(q, k, v, None)
    n, d = q.shape[-2], q.shape[-1]
    br, bc = min(cfg.tile_rows, n), min(cfg.tile_cols, n)

    flat_q, flat_k, flat_v = (x.reshape(-1, n, d) for x in (q, k, v))
    out = np.empty_like(flat_q)
    counter = current_counter()
    items: List[int] = list(range(flat_q.shape[0]))
    scratch = min(cfg.threads, len(items)) * _tile_scratch(br, bc, d)
    if counter is not None:
        counter.alloc(scratch)

    def run(i: int) -> None:
        _tiled_one(flat_q[i], flat_k[i], flat_v[i], out[i], br, bc, counter)

    if cfg.threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            for future in [pool.submit(run, i) for i in items]:
                future.result()
    else:
        for i in items:
            run(i)
    if counter is not None:
        counter.free(scratch)
    return Tensor.wrap(out.reshape(q.shape))


def attention_cost(n: int, d: int, num_areas: int) -> CostReport:
    """Static FLOPs (QK^T plus PV over all areas) and the naive kernel's score scratch.

    The naive path scores every band in one batched call, so its scratch is
    num_areas * (n / num_areas)^2.
    """
    if n % num_areas:
        raise ConfigurationError(f"token count {n} is not divisible by num_areas={num_areas}")
    span = n // num_areas
    return CostReport(flops=4 * span * span * d * num_areas, peak_scratch_elements=num_areas * span * span)


def tiled_scratch_bound(n: int, d: int, cfg: AttentionConfig, work_items: int = 1) -> int:
    """Scratch held by tiled_attention over ``work_items`` [n, d] problems: one tile set per worker."""
    br, bc = min(cfg.tile_rows, n), min(cfg.tile_cols, n)
    return min(cfg.threads, max(1, work_items)) * _tile_scratch(br, bc, d)
