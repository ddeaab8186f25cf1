#!/usr/bin/env python3
"""
Composite building blocks: conv units, the multi-kernel convolution block,
the 7x7 separable positional convolution, R-ELAN and the area-attention block.

Every block is a Module: attributes holding Parameters or Modules register
themselves, so parameter enumeration, dtype casts and static FLOP counts walk
the same tree the forward pass uses.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from attention_kernels import AttentionConfig, area_attention, attention_cost
from errors import ConfigurationError, DimensionError
from tensor_core import (
    Parameter,
    Tensor,
    concat,
    conv2d,
    conv_output_size,
    current_graph,
    reshape,
    silu,
    slice_,
    transpose,
)

logger = logging.getLogger(__name__)

Shape = Tuple[int, int, int, int]


# ========= 🧩 MODULE TREE ========= #
class Module:
    """Base class with automatic registration of parameters and children."""

    def __init__(self) -> None:
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name: str, value: Any) -> None:
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, param in self._parameters.items():
            yield prefix + name, param
        for name, module in self._modules.items():
            yield from module.named_parameters(prefix + name + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        return iter(self._modules.items())

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def to_dtype(self, dtype: Any) -> "Module":
        for param in self.parameters():
            param.data = param.data.astype(dtype)
            param.grad = None
        return self

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.grad = None

    def forward(self, *args: Any, **kwargs: Any) -> Tensor:
        raise NotImplementedError

    def flop_count(self, shape: Shape) -> Tuple[Shape, int]:
        """Output shape and FLOPs for an input of ``shape``, without running."""
        raise NotImplementedError

    def __call__(self, *args: Any, **kwargs: Any) -> Tensor:
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    """Ordered children registered under their index."""

    def __init__(self, modules: Sequence[Module] = ()) -> None:
        super().__init__()
        self._items: List[Module] = []
        for module in modules:
            self.append(module)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self) -> Iterator[Module]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, index: int) -> Module:
        return self._items[index]


class Sequential(ModuleList):
    def forward(self, x: Tensor) -> Tensor:
        for module in self:
            x = module(x)
        return x

    def flop_count(self, shape: Shape) -> Tuple[Shape, int]:
        total = 0
        for module in self:
            shape, flops = module.flop_count(shape)
            total += flops
        return shape, total


def uniform_init(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    """Centered uniform in +-1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ========= 🔲 CONVOLUTION UNITS ========= #
class Conv2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int = 1,
        stride: int = 1,
        padding: Optional[int] = None,
        groups: int = 1,
        bias: bool = True,
        rng: Optional[np.random.Generator] = None,
    ) -> None:
        super().__init__()
        if c_in < 1 or c_out < 1 or kernel < 1:
            raise ConfigurationError(f"Conv2d needs positive channels and kernel, got {c_in}->{c_out} k={kernel}")
        if c_in % groups or c_out % groups:
            raise ConfigurationError(f"groups={groups} must divide channels {c_in} and {c_out}")
        rng = rng or np.random.default_rng(0)
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.stride, self.groups = stride, groups
        self.padding = kernel // 2 if padding is None else padding
        fan_in = (c_in // groups) * kernel * kernel
        self.weight = Parameter(uniform_init(rng, (c_out, c_in // groups, kernel, kernel), fan_in))
        self.bias = Parameter(uniform_init(rng, (c_out,), fan_in)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding, groups=self.groups)

    def flop_count(self, shape: Shape) -> Tuple[Shape, int]:
        n, c, h, w = shape
        if c != self.c_in:
            raise DimensionError(f"Conv2d channel axis (1): expected {self.c_in}, got {c}")
        ho = conv_output_size(h, self.kernel, self.stride, self.padding)
        wo = conv_output_size(w, self.kernel, self.stride, self.padding)
        flops = 2 * self.kernel * self.kernel * (self.c_in // self.groups) * self.c_out * ho * wo * n
        return (n, self.c_out, ho, wo), flops


class ChannelAffine(Module):
    """Per-channel learned scale and shift; no running statistics."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.channels = channels
        self.scale = Parameter(np.ones(channels))
        self.shift = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        c = self.channels
        return x * reshape(self.scale, (1, c, 1, 1)) + reshape(self.shift, (1, c, 1, 1))

    def flop_count(self, shape: Shape) -> Tuple[Shape, int]:
        return shape, 0


class ConvNormAct(Module):
    """Bias-free conv, channel affine, optional SiLU."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int = 1,
        stride: int = 1,
        act: bool = True,
        rng: Optional[np.random.Generator] = None,
    ) -> None:
        super().__init__()
        self.conv = Conv2d(c_in, c_out, kernel, stride=stride, bias=False, rng=rng)
        self.norm = ChannelAffine(c_out)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm(self.conv(x))
        return silu(y) if self.act else y

    def flop_count(self, shape: Shape) -> Tuple[Shape, int]:
        return self.conv.flop_count(shape)


# ========= ➕ MULTI-KERNEL CONVOLUTION ========= #
@dataclass
class MultiKernelConvSpec:
    c_in: int
    c_out: int
    kernels: List[Tuple[int, int]] = field(default_factory=lambda: [(3, 3), (1, 1)])
    stride: int = 1

    def __post_init__(self) -> None:
        if not self.kernels:
            raise ConfigurationError("MultiKernelConvSpec needs at least one branch")
        for kh, kw in self.kernels:
            if kh != kw:
                raise ConfigurationError(f"branch kernel {kh}x{kw} is not square; branch outputs would not align")
            if kh % 2 == 0:
                raise ConfigurationError(f"branch kernel {kh}x{kw} is even; 'same' padding cannot align it")

    @property
    def n_branches(self) -> int:
        return len(self.kernels)


class MultiKernelConv(Module):
    """SiLU of the sum of parallel convolutions, each with its own bias."""

    def __init__(self, spec: MultiKernelConvSpec, rng: Optional[np.random.Generator] = None) -> None:
        super().__init__()
        self.spec = spec
        self.branches = ModuleList(
            Conv2d(spec.c_in, spec.c_out, k, stride=spec.stride, padding=k // 2, rng=rng) for k, _ in spec.kernels
        )

    def pre_activation(self, x: Tensor) -> Tensor:
        total = None
        for branch in self.branches:
            y = branch(x)
            total = y if total is None else total + y
        return total

    def forward(self, x: Tensor) -> Tensor:
        return silu(self.pre_activation(x))

    def flop_count(self, shape: Shape) -> Tuple[Shape, int]:
        total = 0
        for branch in self.branches:
            out, flops = branch.flop_count(shape)
            total += flops
        return out, total


def multi_kernel_conv(x: Tensor, block: MultiKernelConv) -> Tensor:
    return block(x)


# ========= 📍 SEPARABLE POSITIONAL CONVOLUTION ========= #
class SepConvPosition(Module):
    """Depthwise 7x7 then pointwise 1x1, both with bias: 49C + C^2 + 2C parameters."""

    def __init__(self, channels: int, rng: Optional[np.random.Generator] = None) -> None:
        super().__init__()
        self.depthwise = Conv2d(channels, channels, 7, padding=3, groups=channels, rng=rng)
        self.pointwise = Conv2d(channels, channels, 1, rng=rng)

    def forward(self, v: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(v))

    def flop_count(self, shape: Shape) -> Tuple[Shape, int]:
        shape, dw = self.depthwise.flop_count(shape)
        shape, pw = self.pointwise.flop_count(shape)
        return shape, dw + pw


def sep_conv7x7_position(v: Tensor, block: SepConvPosition) -> Tensor:
    return block(v)


# ========= 🔁 R-ELAN ========= #
@dataclass
class RELANSpec:
    c_in: int
    c_out: int
    n_branches: int = 1
    expansion: float = 0.5
    residual_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.c_in < 1 or self.c_out < 1:
            raise ConfigurationError(f"RELANSpec channels must be positive, got {self.c_in}->{self.c_out}")
        if self.n_branches < 1:
            raise ConfigurationError(f"RELANSpec.n_branches must be >= 1, got {self.n_branches}")
        if not 0.0 < self.expansion <= 1.0:
            raise ConfigurationError(f"RELANSpec.expansion must lie in (0, 1], got {self.expansion}")
        if self.hidden < 1:
            raise ConfigurationError(f"RELANSpec hidden width round({self.c_out}*{self.expansion}) is 0")

    @property
    def hidden(self) -> int:
        return int(round(self.c_out * self.expansion))


class Bottleneck(Module):
    def __init__(self, channels: int, rng: Optional[np.random.Generator] = None) -> None:
        super().__init__()
        self.cv1 = ConvNormAct(channels, channels, 3, rng=rng)
        self.cv2 = ConvNormAct(channels, channels, 3, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.cv2(self.cv1(x))

    def flop_count(self, shape: Shape) -> Tuple[Shape, int]:
        shape, a = self.cv1.flop_count(shape)
        shape, b = self.cv2.flop_count(shape)
        return shape, a + b


class RELANBlock(Module):
    """Entry transition, retained bottleneck chain, exit transition, scaled residual.

    The concatenation holds the entry output followed by every bottleneck
    output, so the exit conv sees hidden * (n_branches + 1) channels.
    """

    def __init__(self, spec: RELANSpec, rng: Optional[np.random.Generator] = None) -> None:
        super().__init__()
        self.spec = spec
        hidden = spec.hidden
        self.entry = ConvNormAct(spec.c_in, hidden, 1, rng=rng)
        self.chain = ModuleList(Bottleneck(hidden, rng=rng) for _ in range(spec.n_branches))
        self.exit = ConvNormAct(hidden * (spec.n_branches + 1), spec.c_out, 1, act=False, rng=rng)
        self.proj = None if spec.c_in == spec.c_out else ConvNormAct(spec.c_in, spec.c_out, 1, act=False, rng=rng)
        self.gamma = float(spec.residual_scale)

    def forward(self, x: Tensor) -> Tensor:
        y = self.entry(x)
        retained = [y]
        for unit in self.chain:
            y = unit(y)
            retained.append(y)
        fused = self.exit(concat(retained, axis=1))
        shortcut = x if self.proj is None else self.proj(x)
        return fused + shortcut * self.gamma

    def flop_count(self, shape: Shape) -> Tuple[Shape, int]:
        n, _, h, w = shape
        entry_shape, total = self.entry.flop_count(shape)
        for unit in self.chain:
            _, flops = unit.flop_count(entry_shape)
            total += flops
        cat_shape = (n, self.spec.hidden * (self.spec.n_branches + 1), h, w)
        out_shape, flops = self.exit.flop_count(cat_shape)
        total += flops
        if self.proj is not None:
            total += self.proj.flop_count(shape)[1]
        return out_shape, total


def r_elan_block(x: Tensor, block: RELANBlock) -> Tensor:
    return block(x)


# ========= 👁️ AREA-ATTENTION BLOCK ========= #
@dataclass
class AttnBlockSpec:
    channels: int
    attention: AttentionConfig
    mlp_ratio: float = 2.0

    def __post_init__(self) -> None:
        heads = self.attention.num_heads
        if self.channels % heads:
            raise ConfigurationError(f"channels {self.channels} not divisible by num_heads={heads}")
        if self.attention.head_dim != self.channels // heads:
            raise ConfigurationError(
                f"head_dim {self.attention.head_dim} != channels/num_heads = {self.channels // heads}"
            )
        if self.mlp_ratio <= 0 or self.mlp_hidden < 1:
            raise ConfigurationError(f"mlp_ratio {self.mlp_ratio} gives no hidden units for {self.channels} channels")

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.channels * self.mlp_ratio))

    @classmethod
    def for_channels(cls, channels: int, num_heads: int, num_areas: int, mlp_ratio: float = 2.0,
                     **attention_kwargs: Any) -> "AttnBlockSpec":
        attention = AttentionConfig(
            num_heads=num_heads, head_dim=channels // num_heads, num_areas=num_areas, **attention_kwargs
        )
        return cls(channels, attention, mlp_ratio)


class AttnBlock(Module):
    """x + proj(area_attention(x) + pe(v)), then x + mlp(x).

    ``kernel="auto"`` uses the differentiable naive path while a graph is
    recording and the tiled kernel otherwise.
    """

    def __init__(self, spec: AttnBlockSpec, rng: Optional[np.random.Generator] = None) -> None:
        super().__init__()
        self.spec = spec
        c = spec.channels
        self.qkv = Conv2d(c, 3 * c, 1, rng=rng)
        self.pe = SepConvPosition(c, rng=rng)
        self.proj = Conv2d(c, c, 1, rng=rng)
        self.mlp_in = Conv2d(c, spec.mlp_hidden, 1, rng=rng)
        self.mlp_out = Conv2d(spec.mlp_hidden, c, 1, rng=rng)

    def _check(self, shape: Shape, num_areas: Optional[int] = None) -> int:
        """Validate ``shape`` and return the area count to use for it."""
        n, c, h, w = shape
        areas = self.spec.attention.num_areas if num_areas is None else num_areas
        if c != self.spec.channels:
            raise DimensionError(f"AttnBlock channel axis (1): expected {self.spec.channels}, got {c}")
        if areas < 1 or (h * w) % areas:
            raise ConfigurationError(f"{h}x{w}={h * w} tokens not divisible by num_areas={areas}")
        return areas

    def forward(self, x: Tensor, kernel: str = "auto") -> Tensor:
        self._check(x.shape)
        n, c, h, w = x.shape
        cfg = self.spec.attention
        heads, hd = cfg.num_heads, cfg.head_dim
        if kernel == "auto":
            kernel = "naive" if current_graph() is not None else "tiled"

        qkv = reshape(self.qkv(x), (n, 3, heads, hd, h * w))
        q, k, v = (slice_(qkv, (slice(None), i)) for i in range(3))
        tokens = [transpose(t, (0, 1, 3, 2)) for t in (q, k, v)]
        attended = area_attention(tokens[0], cfg, tokens[1], tokens[2], kernel=kernel)
        attended = reshape(transpose(attended, (0, 1, 3, 2)), (n, c, h, w))
        position = self.pe(reshape(v, (n, c, h, w)))

        x = x + self.proj(attended + position)
        return x + self.mlp_out(silu(self.mlp_in(x)))

    def flop_count(self, shape: Shape, num_areas: Optional[int] = None) -> Tuple[Shape, int]:
        """``num_areas`` overrides the built area count, for sizes other than the one built for."""
        total = self.attention_flops(shape, num_areas)
        total += self.qkv.flop_count(shape)[1]
        total += self.pe.flop_count(shape)[1]
        total += self.proj.flop_count(shape)[1]
        hidden_shape, flops = self.mlp_in.flop_count(shape)
        total += flops + self.mlp_out.flop_count(hidden_shape)[1]
        return shape, total

    def attention_flops(self, shape: Shape, num_areas: Optional[int] = None) -> int:
        areas = self._check(shape, num_areas)
        n, _, h, w = shape
        cfg = self.spec.attention
        return attention_cost(h * w, cfg.head_dim, areas).flops * n * cfg.num_heads


def attn_block(x: Tensor, block: AttnBlock, kernel: str = "auto") -> Tensor:
    return block(x, kernel=kernel)
