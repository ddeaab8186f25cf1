#!/usr/bin/env python3
"""
Backbone / neck / head assembly, the n/s/m/x variant family, model config
text format, and parameter/FLOP accountants.

Config text grammar: one ``key = value`` per line; ``#`` starts a comment;
blank lines are ignored. Keys: variant, num_classes, input_size, area_count,
mlp_ratio, seed, loss_coord, loss_obj, loss_noobj, loss_cls. Missing keys take
their defaults.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from detection import LossWeights
from errors import ConfigurationError, DimensionError
from nn_blocks import (
    AttnBlock,
    AttnBlockSpec,
    Conv2d,
    ConvNormAct,
    Module,
    ModuleList,
    MultiKernelConv,
    MultiKernelConvSpec,
    RELANBlock,
    RELANSpec,
    Sequential,
    Shape,
)
from tensor_core import Tensor, concat, upsample_nearest2x

logger = logging.getLogger(__name__)

# ========= 🔧 ARCHITECTURE CONSTANTS ========= #
STEM_WIDTHS = (32, 64)
STAGE_WIDTHS = (64, 128, 256, 512)
STAGE_DEPTHS = (2, 4, 4, 2)
NECK_DEPTH = 2
RELAN_EXPANSION = 0.5
HEAD_KERNELS = [(3, 3), (1, 1)]
STRIDES = (8, 16, 32)
OBJECTNESS_PRIOR = math.log(0.01 / 0.99)
CHANNELS_PER_HEAD = 32


@dataclass(frozen=True)
class Variant:
    name: str
    depth_mult: float
    width_mult: float
    max_channels: int = 512

    def __post_init__(self) -> None:
        if self.depth_mult <= 0 or self.width_mult <= 0 or self.max_channels < 8:
            raise ConfigurationError(f"variant {self.name!r} needs positive multipliers and max_channels >= 8")

    def width(self, base: int) -> int:
        """Scale, cap at max_channels, round to a multiple of 8 (min 8)."""
        scaled = min(base * self.width_mult, self.max_channels)
        return max(8, int(round(scaled / 8)) * 8)

    def depth(self, base: int) -> int:
        return max(1, int(round(base * self.depth_mult)))


VARIANTS: Dict[str, Variant] = {
    "n": Variant("n", 0.25, 0.25),
    "s": Variant("s", 0.25, 0.50),
    "m": Variant("m", 0.50, 0.75),
    "x": Variant("x", 1.00, 1.25),
}
VARIANT_ORDER = ("n", "s", "m", "x")


# ========= 📝 MODEL CONFIG ========= #
@dataclass
class ModelConfig:
    variant: str = "n"
    num_classes: int = 3
    input_size: int = 64
    area_count: int = 4
    mlp_ratio: float = 2.0
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self) -> None:
        self.validate()

    @property
    def spec(self) -> Variant:
        return VARIANTS[self.variant]

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant: unknown variant {self.variant!r}; choose from {list(VARIANTS)}")
        if self.num_classes < 1:
            raise ConfigurationError(f"num_classes: must be >= 1, got {self.num_classes}")
        if self.input_size < 32 or self.input_size % 32:
            raise ConfigurationError(f"input_size: must be a positive multiple of 32, got {self.input_size}")
        if self.area_count < 1:
            raise ConfigurationError(f"area_count: must be >= 1, got {self.area_count}")
        if (self.input_size // 8) ** 2 % self.area_count:
            raise ConfigurationError(
                f"area_count: {self.area_count} does not divide the {(self.input_size // 8) ** 2} stride-8 tokens"
            )
        if not math.isfinite(self.mlp_ratio) or self.mlp_ratio <= 0:
            raise ConfigurationError(f"mlp_ratio: must be > 0, got {self.mlp_ratio}")

    @classmethod
    def parse(cls, text: str) -> "ModelConfig":
        converters = {"variant": str, "num_classes": int, "input_size": int, "area_count": int,
                      "mlp_ratio": float, "seed": int}
        converters.update({f"loss_{f.name}": float for f in fields(LossWeights)})
        values: Dict[str, Union[str, int, float]] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in converters:
                raise ConfigurationError(f"{key}: unknown config key (line {lineno})")
            try:
                values[key] = converters[key](value)
            except ValueError as exc:
                raise ConfigurationError(f"{key}: cannot parse {value!r} (line {lineno})") from exc
        weights = {key[len("loss_"):]: values.pop(key) for key in list(values) if key.startswith("loss_")}
        try:
            loss_weights = LossWeights(**weights)
        except ConfigurationError as exc:
            raise ConfigurationError(f"loss_{exc}") from exc
        return cls(**values, loss_weights=loss_weights)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ModelConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def dump(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self) if f.name != "loss_weights"]
        lines += [f"loss_{f.name} = {getattr(self.loss_weights, f.name)!r}\n" for f in fields(LossWeights)]
        return "".join(lines)

    def with_variant(self, name: str) -> "ModelConfig":
        return replace(self, variant=name)


def attention_heads(channels: int) -> int:
    """Largest divisor of channels not above channels // 32 (at least 1)."""
    limit = max(1, channels // CHANNELS_PER_HEAD)
    return max(h for h in range(1, limit + 1) if channels % h == 0)


# ========= 🏗️ MODEL ========= #
class Model(Module):
    """Backbone (strides 4..32), attention-augmented neck, three detection heads."""

    def __init__(self, cfg: ModelConfig, seed: int) -> None:
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        v = cfg.spec
        s1, s2 = (v.width(c) for c in STEM_WIDTHS)
        c2, c3, c4, c5 = (v.width(c) for c in STAGE_WIDTHS)
        d1, d2, d3, d4 = (v.depth(b) for b in STAGE_DEPTHS)
        dn = v.depth(NECK_DEPTH)
        self.widths = (c3, c4, c5)

        def relan(c_in: int, c_out: int, depth: int) -> RELANBlock:
            return RELANBlock(RELANSpec(c_in, c_out, depth, RELAN_EXPANSION), rng=rng)

        self.stem = Sequential([ConvNormAct(3, s1, 3, stride=2, rng=rng), ConvNormAct(s1, s2, 3, stride=2, rng=rng)])
        self.stage1 = relan(s2, c2, d1)
        self.stage2 = Sequential([ConvNormAct(c2, c3, 3, stride=2, rng=rng), relan(c3, c3, d2)])
        self.stage3 = Sequential([ConvNormAct(c3, c4, 3, stride=2, rng=rng), relan(c4, c4, d3)])
        self.stage4 = Sequential([ConvNormAct(c4, c5, 3, stride=2, rng=rng), relan(c5, c5, d4)])

        self.attn32 = AttnBlock(self._attn_spec(c5, 32), rng=rng)
        self.top4 = relan(c5 + c4, c4, dn)
        self.attn16 = AttnBlock(self._attn_spec(c4, 16), rng=rng)
        self.top3 = relan(c4 + c3, c3, dn)
        self.down3 = ConvNormAct(c3, c3, 3, stride=2, rng=rng)
        self.bottom4 = relan(c3 + c4, c4, dn)
        self.down4 = ConvNormAct(c4, c4, 3, stride=2, rng=rng)
        self.bottom5 = relan(c4 + c5, c5, dn)

        outputs = 5 + cfg.num_classes
        self.heads = ModuleList()
        for c in (c3, c4, c5):
            tower = MultiKernelConv(MultiKernelConvSpec(c, c, list(HEAD_KERNELS)), rng=rng)
            predict = Conv2d(c, outputs, 1, rng=rng)
            predict.bias.data[4] = OBJECTNESS_PRIOR
            self.heads.append(Sequential([tower, predict]))

    def areas_for(self, tokens: int) -> int:
        """Configured area count, reduced to gcd(area_count, tokens) where it does not divide."""
        return math.gcd(self.cfg.area_count, tokens)

    def _attn_spec(self, channels: int, stride: int) -> AttnBlockSpec:
        areas = self.areas_for((self.cfg.input_size // stride) ** 2)
        return AttnBlockSpec.for_channels(channels, attention_heads(channels), areas, self.cfg.mlp_ratio)

    @property
    def num_classes(self) -> int:
        return self.cfg.num_classes

    def backbone(self, images: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        x = self.stage1(self.stem(images))
        p3 = self.stage2(x)
        p4 = self.stage3(p3)
        p5 = self.stage4(p4)
        return p3, p4, p5

    def forward(self, images: Tensor, kernel: str = "auto") -> List[Tensor]:
        size = self.cfg.input_size
        if images.ndim != 4:
            raise DimensionError(f"images must be N,3,S,S; got shape {images.shape}")
        if images.shape[1] != 3:
            raise DimensionError(f"images channel axis (1) must be 3, got {images.shape[1]}")
        if images.shape[2] != size or images.shape[3] != size:
            raise DimensionError(
                f"images spatial axes (2, 3) must be {size}x{size}, got {images.shape[2]}x{images.shape[3]}"
            )
        p3, p4, p5 = self.backbone(images)
        p5 = self.attn32(p5, kernel=kernel)
        t4 = self.attn16(self.top4(concat([upsample_nearest2x(p5), p4], axis=1)), kernel=kernel)
        t3 = self.top3(concat([upsample_nearest2x(t4), p3], axis=1))
        d4 = self.bottom4(concat([self.down3(t3), t4], axis=1))
        d5 = self.bottom5(concat([self.down4(d4), p5], axis=1))
        return [head(feature) for head, feature in zip(self.heads, (t3, d4, d5))]

    def flop_table(self, input_size: Optional[int] = None, batch: int = 1) -> List[Tuple[str, int]]:
        """Static per-module FLOPs in forward order, attention split into its own rows."""
        size = input_size or self.cfg.input_size
        if size % 32:
            raise ConfigurationError(f"input_size: must be a multiple of 32, got {size}")
        rows: List[Tuple[str, int]] = []

        def run(name: str, module: Module, shape: Shape) -> Shape:
            if isinstance(module, AttnBlock):
                areas = self.areas_for(shape[2] * shape[3])
                out, flops = module.flop_count(shape, num_areas=areas)
                attention = module.attention_flops(shape, num_areas=areas)
                rows.append((name, flops - attention))
                rows.append((name + ".attention", attention))
            else:
                out, flops = module.flop_count(shape)
                rows.append((name, flops))
            return out

        def cat(a: Shape, b: Shape) -> Shape:
            return (a[0], a[1] + b[1], a[2], a[3])

        def up(s: Shape) -> Shape:
            return (s[0], s[1], 2 * s[2], 2 * s[3])

        x = run("stem", self.stem, (batch, 3, size, size))
        x = run("stage1", self.stage1, x)
        p3 = run("stage2", self.stage2, x)
        p4 = run("stage3", self.stage3, p3)
        p5 = run("stage4", self.stage4, p4)
        p5 = run("attn32", self.attn32, p5)
        t4 = run("attn16", self.attn16, run("top4", self.top4, cat(up(p5), p4)))
        t3 = run("top3", self.top3, cat(up(t4), p3))
        d4 = run("bottom4", self.bottom4, cat(run("down3", self.down3, t3), t4))
        d5 = run("bottom5", self.bottom5, cat(run("down4", self.down4, d4), p5))
        for stride, head, feature in zip(STRIDES, self.heads, (t3, d4, d5)):
            run(f"head{stride}", head, feature)
        return rows


def build_model(cfg: ModelConfig, seed: Optional[int] = None) -> Model:
    """Validate, then allocate; same cfg and seed give bit-identical parameters."""
    cfg.validate()
    model = Model(cfg, cfg.seed if seed is None else seed)
    logger.debug("Built variant %s with %d parameters", cfg.variant, model.num_params())
    return model


def forward(model: Model, images: Tensor, kernel: str = "auto") -> List[Tensor]:
    return model(images, kernel=kernel)


def count_params(model: Module, depth: int = 1) -> Tuple[List[Tuple[str, int]], int]:
    """Per-module parameter rows down to ``depth`` levels, plus the total."""
    rows: List[Tuple[str, int]] = []

    def walk(module: Module, prefix: str, level: int) -> None:
        own = sum(p.size for p in module._parameters.values())
        if own:
            rows.append((prefix.rstrip(".") or "<root>", own))
        for name, child in module.named_children():
            if level >= depth:
                rows.append((prefix + name, child.num_params()))
            else:
                walk(child, prefix + name + ".", level + 1)

    walk(model, "", 1)
    return rows, sum(count for _, count in rows)


def count_flops(model: Model, input_size: Optional[int] = None) -> Tuple[List[Tuple[str, int]], int]:
    rows = model.flop_table(input_size)
    return rows, sum(flops for _, flops in rows)


def output_grid_sizes(input_size: int) -> List[int]:
    return [input_size // stride for stride in STRIDES]


def describe_variants(cfg: ModelConfig, names: Sequence[str] = VARIANT_ORDER) -> List[Dict[str, object]]:
    """Parameter/FLOP totals and per-module tables for each variant, with ratios to the previous one."""
    report: List[Dict[str, object]] = []
    previous: Optional[Dict[str, object]] = None
    for name in names:
        model = build_model(cfg.with_variant(name))
        param_rows, params = count_params(model)
        flop_rows, flops = count_flops(model)
        entry: Dict[str, object] = {
            "variant": name,
            "params": params,
            "flops": flops,
            "params_ratio": None if previous is None else params / previous["params"],
            "flops_ratio": None if previous is None else flops / previous["flops"],
            "param_rows": [{"module": m, "params": c} for m, c in param_rows],
            "flop_rows": [{"module": m, "flops": f} for m, f in flop_rows],
        }
        logger.info("Variant %s: %d params, %d FLOPs at %dpx", name, params, flops, cfg.input_size)
        report.append(entry)
        previous = entry
    return report
