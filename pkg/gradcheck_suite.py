#!/usr/bin/env python3
"""
Finite-difference audit of every differentiable primitive and composite block.

Each check builds a small float64 problem from its own seeded generator and
reports the worst relative error between tape gradients and central
differences.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from attention_kernels import AttentionConfig, area_attention, sdpa
from detection import GroundTruthBox, assign_targets, detection_loss
from errors import ConfigurationError
from nn_blocks import (
    AttnBlock,
    AttnBlockSpec,
    Conv2d,
    MultiKernelConv,
    MultiKernelConvSpec,
    RELANBlock,
    RELANSpec,
    SepConvPosition,
    attn_block,
    multi_kernel_conv,
    r_elan_block,
    sep_conv7x7_position,
)
from tensor_core import (
    Parameter,
    Tensor,
    bce_with_logits,
    concat,
    conv2d,
    exp,
    gradcheck,
    matmul,
    precision,
    reduce_sum,
    reshape,
    sigmoid,
    silu,
    slice_,
    softmax,
    transpose,
    upsample_nearest2x,
)

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-4
EPS = 1e-6

Problem = Tuple[Callable[[], Tensor], List[Tensor]]


@dataclass(frozen=True)
class GradcheckRow:
    name: str
    kind: str
    params: int
    max_rel_error: float
    passed: bool


def _p(rng: np.random.Generator, *shape: int) -> Parameter:
    return Parameter(rng.normal(size=shape))


# ========= 🧩 PRIMITIVE PROBLEMS ========= #
def _add(rng):
    x, y = _p(rng, 3, 4), _p(rng, 4)
    c = rng.normal(size=(3, 4))
    return (lambda: reduce_sum((x + y) * c)), [x, y]


def _sub(rng):
    x, y = _p(rng, 2, 3), _p(rng, 2, 1)
    c = rng.normal(size=(2, 3))
    return (lambda: reduce_sum((x - y) * c)), [x, y]


def _mul(rng):
    x, y = _p(rng, 3, 4), _p(rng, 1, 4)
    return (lambda: reduce_sum(x * y * x)), [x, y]


def _matmul(rng):
    a, b = _p(rng, 2, 3, 4), _p(rng, 4, 5)
    c = rng.normal(size=(2, 3, 5))
    return (lambda: reduce_sum(matmul(a, b) * c)), [a, b]


def _conv2d(rng):
    x, w, b = _p(rng, 1, 2, 5, 5), _p(rng, 4, 1, 3, 3), _p(rng, 4)
    c = rng.normal(size=(1, 4, 3, 3))
    return (lambda: reduce_sum(conv2d(x, w, b, stride=2, padding=1, groups=2) * c)), [x, w, b]


def _unary(op: Callable[[Tensor], Tensor]) -> Callable[[np.random.Generator], Problem]:
    def build(rng):
        x = _p(rng, 3, 5)
        c = rng.normal(size=(3, 5))
        return (lambda: reduce_sum(op(x) * c)), [x]
    return build


def _bce(rng):
    x = _p(rng, 4, 3)
    target = (rng.random(size=(4, 3)) > 0.5).astype(np.float64)
    return (lambda: reduce_sum(bce_with_logits(x, target))), [x]


def _reshape_transpose(rng):
    x = _p(rng, 2, 3, 4)
    c = rng.normal(size=(4, 2, 3))
    return (lambda: reduce_sum(transpose(reshape(x, (6, 4)), (1, 0)).reshape(4, 2, 3) * c)), [x]


def _concat(rng):
    a, b = _p(rng, 2, 3), _p(rng, 2, 2)
    c = rng.normal(size=(2, 5))
    return (lambda: reduce_sum(concat([a, b], axis=1) * c)), [a, b]


def _slice(rng):
    x = _p(rng, 3, 6)
    c = rng.normal(size=(2, 3))
    return (lambda: reduce_sum(slice_(x, (slice(1, None), slice(None, None, 2))) * c)), [x]


def _upsample(rng):
    x = _p(rng, 1, 2, 3, 3)
    c = rng.normal(size=(1, 2, 6, 6))
    return (lambda: reduce_sum(upsample_nearest2x(x) * c)), [x]


# ========= 🧱 BLOCK PROBLEMS ========= #
def _sdpa(rng):
    q, k, v = _p(rng, 2, 6, 4), _p(rng, 2, 6, 4), _p(rng, 2, 6, 4)
    c = rng.normal(size=(2, 6, 4))
    return (lambda: reduce_sum(sdpa(q, k, v) * c)), [q, k, v]


def _area_attention(rng):
    tokens = _p(rng, 8, 4)
    cfg = AttentionConfig(head_dim=4, num_areas=2)
    c = rng.normal(size=(8, 4))
    return (lambda: reduce_sum(area_attention(tokens, cfg, kernel="naive") * c)), [tokens]


def _block_problem(op: Callable[..., Tensor], block, x: Tensor, rng, **call_kwargs) -> Problem:
    out_shape = op(x, block, **call_kwargs).shape
    c = rng.normal(size=out_shape)
    return (lambda: reduce_sum(op(x, block, **call_kwargs) * c)), block.parameters()


def _multi_kernel(rng):
    block = MultiKernelConv(MultiKernelConvSpec(2, 3, [(3, 3), (1, 1)]), rng=rng)
    return _block_problem(multi_kernel_conv, block, Tensor(rng.normal(size=(1, 2, 4, 4))), rng)


def _sep_conv(rng):
    block = SepConvPosition(2, rng=rng)
    return _block_problem(sep_conv7x7_position, block, Tensor(rng.normal(size=(1, 2, 4, 4))), rng)


def _relan(rng):
    block = RELANBlock(RELANSpec(2, 3, n_branches=2, expansion=0.67), rng=rng)
    return _block_problem(r_elan_block, block, Tensor(rng.normal(size=(1, 2, 4, 4))), rng)


def _attn(rng):
    block = AttnBlock(AttnBlockSpec.for_channels(4, 2, 2, mlp_ratio=1.0), rng=rng)
    return _block_problem(attn_block, block, Tensor(rng.normal(size=(1, 4, 2, 2))), rng, kernel="naive")


def _loss(rng):
    grids = [4, 2, 1]
    targets = assign_targets([[GroundTruthBox(1, 0.4, 0.6, 0.25, 0.2), GroundTruthBox(0, 0.2, 0.3, 0.08, 0.06)]],
                             grids)
    heads = [Conv2d(2, 7, 1, rng=rng) for _ in grids]
    feats = [Tensor(rng.normal(scale=0.5, size=(1, 2, g, g))) for g in grids]
    params = [p for head in heads for p in head.parameters()]
    return (lambda: detection_loss([h(f) for h, f in zip(heads, feats)], targets)[0]), params


CHECKS: Dict[str, Tuple[str, Callable[[np.random.Generator], Problem]]] = {
    "add": ("primitive", _add),
    "sub": ("primitive", _sub),
    "mul": ("primitive", _mul),
    "matmul": ("primitive", _matmul),
    "conv2d": ("primitive", _conv2d),
    "softmax": ("primitive", _unary(lambda x: softmax(x, axis=-1))),
    "silu": ("primitive", _unary(silu)),
    "sigmoid": ("primitive", _unary(sigmoid)),
    "exp": ("primitive", _unary(lambda x: exp(x * 0.5))),
    "bce_with_logits": ("primitive", _bce),
    "reshape_transpose": ("primitive", _reshape_transpose),
    "concat": ("primitive", _concat),
    "slice": ("primitive", _slice),
    "upsample_nearest2x": ("primitive", _upsample),
    "sdpa": ("block", _sdpa),
    "area_attention": ("block", _area_attention),
    "multi_kernel_conv": ("block", _multi_kernel),
    "sep_conv7x7_position": ("block", _sep_conv),
    "r_elan_block": ("block", _relan),
    "attn_block": ("block", _attn),
    "detection_loss": ("block", _loss),
}


def _break(f: Callable[[], Tensor], params: Sequence[Tensor]) -> Callable[[], Tensor]:
    """Add a term the tape cannot see, so numeric and analytic gradients disagree."""
    first = params[0]

    def broken() -> Tensor:
        return f() + float(np.sum(first.data ** 2))
    return broken


def run_gradcheck_suite(
    seed: int = 0,
    tolerance: float = DEFAULT_TOLERANCE,
    names: Optional[Sequence[str]] = None,
    broken: Optional[str] = None,
) -> List[GradcheckRow]:
    """One row per check in registry order; ``broken`` names a check to sabotage."""
    selected = list(CHECKS) if names is None else list(names)
    for name in selected + ([broken] if broken else []):
        if name not in CHECKS:
            raise ConfigurationError(f"unknown gradcheck entry {name!r}; choose from {list(CHECKS)}")

    rows = []
    with precision(np.float64):
        for index, name in enumerate(CHECKS):
            if name not in selected:
                continue
            kind, build = CHECKS[name]
            f, params = build(np.random.default_rng([seed, index]))
            if name == broken:
                f = _break(f, params)
            error = gradcheck(f, params, eps=EPS)
            row = GradcheckRow(name, kind, sum(p.size for p in params), error, error <= tolerance)
            if row.passed:
                logger.info("gradcheck %-22s %.2e", name, error)
            else:
                logger.error("gradcheck %-22s %.2e exceeds %.0e", name, error, tolerance)
            rows.append(row)
    return rows


def failures(rows: Sequence[GradcheckRow]) -> List[str]:
    return [row.name for row in rows if not row.passed]
