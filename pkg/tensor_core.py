#!/usr/bin/env python3
"""
Minimal dense tensor engine with taped reverse-mode differentiation.

Tensors wrap numpy arrays in N,C,H,W row-major layout. Operations run eagerly;
while a ComputeGraph is active, every primitive application whose inputs need
a gradient is appended to the graph's tape, and backward() walks that tape in
reverse.
"""

from __future__ import annotations

import contextlib
import logging
import threading
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from errors import ConfigurationError, ContractError, DimensionError

logger = logging.getLogger(__name__)

Scalar = Union[int, float]

# ========= 🔧 PER-THREAD STATE ========= #
class _ThreadState(threading.local):
    """Precision, counter and tape stacks; each thread starts with its own empty set."""

    def __init__(self) -> None:
        self.dtypes: List[np.dtype] = [np.dtype(np.float32)]
        self.counters: List["OpCounter"] = []
        self.graphs: List["ComputeGraph"] = []


_STATE = _ThreadState()


# ========= 🔧 PRECISION ========= #


@contextlib.contextmanager
def precision(dtype: Any) -> Iterator[np.dtype]:
    """Select the default float dtype for new tensors (float32 or float64)."""
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigurationError(f"unsupported precision {resolved}; use float32 or float64")
    _STATE.dtypes.append(resolved)
    try:
        yield resolved
    finally:
        _STATE.dtypes.pop()


def default_dtype() -> np.dtype:
    return _STATE.dtypes[-1]


# ========= 📏 INSTRUMENTATION ========= #
class OpCounter:
    """Counts multiply-add FLOPs and live scratch elements during execution.

    Entering a counter affects only the current thread. Kernels that fan out
    hand it to their workers explicitly, so the updates take a lock.
    """

    def __init__(self) -> None:
        self.flops = 0
        self.live_scratch = 0
        self.peak_scratch = 0
        self._lock = threading.Lock()

    def add_flops(self, count: int) -> None:
        with self._lock:
            self.flops += int(count)

    def alloc(self, elements: int) -> None:
        with self._lock:
            self.live_scratch += int(elements)
            self.peak_scratch = max(self.peak_scratch, self.live_scratch)

    def free(self, elements: int) -> None:
        with self._lock:
            self.live_scratch -= int(elements)

    def __enter__(self) -> "OpCounter":
        _STATE.counters.append(self)
        return self

    def __exit__(self, *exc_info: Any) -> None:
        _STATE.counters.remove(self)


def current_counter() -> Optional[OpCounter]:
    return _STATE.counters[-1] if _STATE.counters else None


# ========= 🧮 TENSOR ========= #
class Tensor:
    """Dense n-dimensional array with an optional gradient slot."""

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype: Any = None,
    ) -> None:
        self.data = np.array(data, dtype=dtype or default_dtype())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Adopt an existing array without copying or casting."""
        tensor = cls.__new__(cls)
        tensor.data = array
        tensor.grad = None
        tensor.requires_grad = requires_grad
        tensor.name = None
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor.wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # Arithmetic sugar over the primitives
    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return slice_(self, index)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A leaf tensor that is trained."""

    def __init__(self, data: Any, name: Optional[str] = None, dtype: Any = None) -> None:
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)


def as_tensor(value: Any, like: Optional[Tensor] = None) -> Tensor:
    """Return value as a Tensor; constants adopt the dtype of ``like``."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor.wrap(np.asarray(value, dtype=dtype))


# ========= 🕸️ COMPUTE GRAPH ========= #
def current_graph() -> Optional["ComputeGraph"]:
    return _STATE.graphs[-1] if _STATE.graphs else None


@dataclass
class Node:
    index: int
    fn: "Function"
    inputs: Tuple[Tensor, ...]
    output: Tensor


class ComputeGraph:
    """Tape of recorded primitive applications.

    Nodes are appended in execution order, which is a topological order: a
    node's inputs are leaves or outputs of earlier nodes.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self._producers: Dict[int, Node] = {}

    def __enter__(self) -> "ComputeGraph":
        _STATE.graphs.append(self)
        return self

    def __exit__(self, *exc_info: Any) -> None:
        _STATE.graphs.remove(self)

    def record(self, fn: "Function", inputs: Sequence[Tensor], output: Tensor) -> Node:
        node = Node(len(self.nodes), fn, tuple(inputs), output)
        self.nodes.append(node)
        self._producers[id(output)] = node
        return node

    def producer(self, tensor: Tensor) -> Optional[Node]:
        node = self._producers.get(id(tensor))
        if node is not None and node.output is tensor:
            return node
        return None

    def leaves(self) -> List[Tensor]:
        """Gradient-requiring inputs not produced on this tape, first-use order."""
        seen: Dict[int, Tensor] = {}
        for node in self.nodes:
            for tensor in node.inputs:
                if tensor.requires_grad and self.producer(tensor) is None and id(tensor) not in seen:
                    seen[id(tensor)] = tensor
        return list(seen.values())

    def replay(self) -> List[np.ndarray]:
        """Recompute every node from current leaf values with fresh op instances."""
        values: Dict[int, np.ndarray] = {}
        outputs: List[np.ndarray] = []
        for node in self.nodes:
            arrays = [values.get(id(t), t.data) for t in node.inputs]
            result = type(node.fn)(**node.fn.attrs).forward(*arrays)
            values[id(node.output)] = result
            outputs.append(result)
        return outputs

    def __len__(self) -> int:
        return len(self.nodes)


def backward(
    loss: Tensor,
    graph: ComputeGraph,
    params: Optional[Sequence[Tensor]] = None,
) -> List[np.ndarray]:
    """Reverse-mode pass from a scalar loss.

    Populates ``grad`` on every requested leaf (default: all leaves on the
    tape) and returns the gradients in the same order. Leaves the loss does
    not depend on receive zeros.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    root = graph.producer(loss)
    if root is None:
        raise ContractError("loss was not recorded on the given graph")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes[: root.index + 1]):
        upstream = grads.pop(id(node.output), None)
        if upstream is None:
            continue
        for tensor, grad in zip(node.inputs, node.fn.backward(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            grads[key] = grads[key] + grad if key in grads else grad

    targets = list(params) if params is not None else graph.leaves()
    result: List[np.ndarray] = []
    for tensor in targets:
        grad = grads.get(id(tensor))
        if grad is None:
            grad = np.zeros_like(tensor.data)
        else:
            grad = np.asarray(grad, dtype=tensor.dtype).reshape(tensor.shape)
        tensor.grad = grad
        result.append(grad)
    return result


# ========= ⚙️ PRIMITIVES ========= #
class Function:
    """One differentiable primitive. ``attrs`` are static, ``saved`` holds activations."""

    name = "function"

    def __init__(self, **attrs: Any) -> None:
        self.attrs = attrs
        self.saved: Dict[str, Any] = {}

    def forward(self, *inputs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: Tensor, **attrs: Any) -> Tensor:
        fn = cls(**attrs)
        requires_grad = any(t.requires_grad for t in tensors)
        output = Tensor.wrap(fn.forward(*(t.data for t in tensors)), requires_grad=requires_grad)
        graph = current_graph()
        if graph is not None and requires_grad:
            graph.record(fn, tensors, output)
        return output


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Add(Function):
    name = "add"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.saved["shapes"] = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        sa, sb = self.saved["shapes"]
        return unbroadcast(grad, sa), unbroadcast(grad, sb)


class Sub(Function):
    name = "sub"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.saved["shapes"] = (a.shape, b.shape)
        return a - b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        sa, sb = self.saved["shapes"]
        return unbroadcast(grad, sa), unbroadcast(-grad, sb)


class Mul(Function):
    name = "mul"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.saved["a"], self.saved["b"] = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        a, b = self.saved["a"], self.saved["b"]
        return unbroadcast(grad * b, a.shape), unbroadcast(grad * a, b.shape)


class MatMul(Function):
    name = "matmul"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.saved["a"], self.saved["b"] = a, b
        out = np.matmul(a, b)
        counter = current_counter()
        if counter is not None:
            counter.add_flops(2 * out.size * a.shape[-1])
        return out

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        a, b = self.saved["a"], self.saved["b"]
        grad_a = np.matmul(grad, np.swapaxes(b, -1, -2))
        grad_b = np.matmul(np.swapaxes(a, -1, -2), grad)
        return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)


class Conv2d(Function):
    """Grouped 2-D convolution over sliding windows, zero padding."""

    name = "conv2d"

    def forward(self, x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
        stride, padding, groups = self.attrs["stride"], self.attrs["padding"], self.attrs["groups"]
        n, c, h, wd = x.shape
        c_out, c_group, kh, kw = w.shape
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        h_out, w_out = windows.shape[2], windows.shape[3]
        windows = windows.reshape(n, groups, c_group, h_out, w_out, kh, kw)
        weight = w.reshape(groups, c_out // groups, c_group, kh, kw)
        out = np.einsum("ngchwij,gocij->ngohw", windows, weight, optimize=True).reshape(n, c_out, h_out, w_out)
        if b is not None:
            out = out + b.reshape(1, c_out, 1, 1)

        self.saved.update(windows=windows, weight=weight, x_shape=x.shape, xp_shape=xp.shape, has_bias=b is not None)
        counter = current_counter()
        if counter is not None:
            counter.add_flops(2 * kh * kw * c_group * c_out * h_out * w_out * n)
        return out

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        stride, padding, groups = self.attrs["stride"], self.attrs["padding"], self.attrs["groups"]
        windows, weight = self.saved["windows"], self.saved["weight"]
        n, _, h, wd = self.saved["x_shape"]
        _, _, c_group, h_out, w_out, kh, kw = windows.shape
        grad_g = grad.reshape(n, groups, -1, h_out, w_out)

        grad_w = np.einsum("ngohw,ngchwij->gocij", grad_g, windows, optimize=True)
        grad_w = grad_w.reshape(-1, c_group, kh, kw)

        cols = np.einsum("ngohw,gocij->ngchwij", grad_g, weight, optimize=True)
        cols = cols.reshape(n, groups * c_group, h_out, w_out, kh, kw)
        grad_xp = np.zeros(self.saved["xp_shape"], dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                grad_xp[:, :, i:i + stride * (h_out - 1) + 1:stride, j:j + stride * (w_out - 1) + 1:stride] += cols[..., i, j]
        grad_x = grad_xp[:, :, padding:padding + h, padding:padding + wd]

        if self.saved["has_bias"]:
            return grad_x, grad_w, grad.sum(axis=(0, 2, 3))
        return grad_x, grad_w


class Softmax(Function):
    name = "softmax"

    def forward(self, x: np.ndarray) -> np.ndarray:
        axis = self.attrs["axis"]
        shifted = np.exp(x - x.max(axis=axis, keepdims=True))
        y = shifted / shifted.sum(axis=axis, keepdims=True)
        self.saved["y"] = y
        return y

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        y = self.saved["y"]
        return (y * (grad - (grad * y).sum(axis=self.attrs["axis"], keepdims=True)),)


class SiLU(Function):
    name = "silu"

    def forward(self, x: np.ndarray) -> np.ndarray:
        s = expit(x)
        self.saved["x"], self.saved["s"] = x, s
        return x * s

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        x, s = self.saved["x"], self.saved["s"]
        return (grad * s * (1 + x * (1 - s)),)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, x: np.ndarray) -> np.ndarray:
        y = expit(x)
        self.saved["y"] = y
        return y

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        y = self.saved["y"]
        return (grad * y * (1 - y),)


class Exp(Function):
    name = "exp"

    def forward(self, x: np.ndarray) -> np.ndarray:
        y = np.exp(x)
        self.saved["y"] = y
        return y

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad * self.saved["y"],)


class BCEWithLogits(Function):
    """Elementwise binary cross-entropy of logits against fixed targets."""

    name = "bce_with_logits"

    def forward(self, z: np.ndarray, target: np.ndarray) -> np.ndarray:
        self.saved["z"], self.saved["target"] = z, target
        return np.maximum(z, 0) - z * target + np.log1p(np.exp(-np.abs(z)))

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, None]:
        z, target = self.saved["z"], self.saved["target"]
        return grad * (expit(z) - target), None


class Sum(Function):
    name = "sum"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.saved["shape"] = x.shape
        return np.asarray(x.sum(axis=self.attrs["axis"], keepdims=self.attrs["keepdims"]))

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        shape, axis = self.saved["shape"], self.attrs["axis"]
        if axis is not None and not self.attrs["keepdims"]:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            grad = np.expand_dims(grad, tuple(a % len(shape) for a in axes))
        return (np.broadcast_to(grad, shape).copy(),)


class Reshape(Function):
    name = "reshape"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.saved["shape"] = x.shape
        return x.reshape(self.attrs["shape"])

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad.reshape(self.saved["shape"]),)


class Transpose(Function):
    name = "transpose"

    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(x.transpose(self.attrs["axes"]))

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        axes = self.attrs["axes"]
        inverse = tuple(np.argsort(axes)) if axes is not None else None
        return (grad.transpose(inverse),)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        axis = self.attrs["axis"]
        self.saved["splits"] = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, ...]:
        return tuple(np.split(grad, self.saved["splits"], axis=self.attrs["axis"]))


class Slice(Function):
    name = "slice"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.saved["shape"], self.saved["dtype"] = x.shape, x.dtype
        return x[self.attrs["index"]].copy()

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros(self.saved["shape"], dtype=self.saved["dtype"])
        full[self.attrs["index"]] = grad
        return (full,)


class UpsampleNearest2x(Function):
    name = "upsample_nearest2x"

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        n, c, h2, w2 = grad.shape
        return (grad.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)


# ========= 🧰 PUBLIC OPERATIONS ========= #
def _check_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"{op}: axis {axis} is invalid for a {ndim}-d tensor")
    return axis % ndim


def add(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    return Add.apply(a, b)


def sub(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    return Sub.apply(a, b)


def mul(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    return Mul.apply(a, b)


def _pair(a: Any, b: Any) -> Tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    a, b = as_tensor(a, like), as_tensor(b, like)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast") from exc
    return a, b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes broadcast as a batch."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions differ: {a.shape} has {a.shape[-1]} columns, {b.shape} has {b.shape[-2]} rows"
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(f"matmul batch axes {a.shape[:-2]} and {b.shape[:-2]} do not broadcast") from exc
    return MatMul.apply(a, b)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Zero-padded grouped convolution, N,C,H,W in and out.

    Output size per spatial axis is floor((size + 2*padding - k) / stride) + 1.
    """
    if stride < 1 or padding < 0 or groups < 1:
        raise ConfigurationError(f"conv2d needs stride >= 1, padding >= 0, groups >= 1 (got {stride}, {padding}, {groups})")
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be N,C,H,W; got shape {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be C_out,C_in/groups,kH,kW; got shape {weight.shape}")
    _, c_in, h, w = x.shape
    c_out, c_group, kh, kw = weight.shape
    if c_in % groups or c_out % groups:
        raise ConfigurationError(f"groups={groups} must divide input channels {c_in} and output channels {c_out}")
    if c_group * groups != c_in:
        raise DimensionError(
            f"conv2d channel axis (1): input has {c_in} channels, weight expects {c_group * groups} ({c_group} x {groups} groups)"
        )
    if h + 2 * padding < kh:
        raise DimensionError(f"conv2d height axis (2): kernel {kh} exceeds padded input {h + 2 * padding}")
    if w + 2 * padding < kw:
        raise DimensionError(f"conv2d width axis (3): kernel {kw} exceeds padded input {w + 2 * padding}")
    attrs = dict(stride=stride, padding=padding, groups=groups)
    if bias is None:
        return Conv2d.apply(x, weight, **attrs)
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d bias must have shape ({c_out},); got {bias.shape}")
    return Conv2d.apply(x, weight, bias, **attrs)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=_check_axis(axis, x.ndim, "softmax"))


def silu(x: Tensor) -> Tensor:
    return SiLU.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def bce_with_logits(logits: Tensor, target: Any) -> Tensor:
    target = as_tensor(target, logits)
    if target.shape != logits.shape:
        raise DimensionError(f"bce_with_logits target shape {target.shape} differs from logits {logits.shape}")
    return BCEWithLogits.apply(logits, target)


def reduce_sum(x: Tensor, axis: Any = None, keepdims: bool = False) -> Tensor:
    if axis is not None:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axis = tuple(_check_axis(a, x.ndim, "sum") for a in axes)
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        target = np.broadcast_to(np.empty((), dtype=np.int8), x.shape).reshape(shape).shape
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from exc
    return Reshape.apply(x, shape=target)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is not None:
        axes = tuple(_check_axis(a, x.ndim, "transpose") for a in axes)
        if sorted(axes) != list(range(x.ndim)):
            raise DimensionError(f"transpose axes {axes} are not a permutation of {x.ndim} axes")
    return Transpose.apply(x, axes=axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along ``axis``; all other axes must agree."""
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    if len(tensors) == 1:
        return tensors[0]
    first = tensors[0]
    axis = _check_axis(axis, first.ndim, "concat")
    for other in tensors[1:]:
        if other.ndim != first.ndim or any(
            a != b for i, (a, b) in enumerate(zip(first.shape, other.shape)) if i != axis
        ):
            raise DimensionError(f"concat on axis {axis}: incompatible shapes {first.shape} and {other.shape}")
    return Concat.apply(*tensors, axis=axis)


def slice_(x: Tensor, index: Any) -> Tensor:
    """Basic slicing (ints, slices, Ellipsis, None) with a scatter backward."""
    parts = index if isinstance(index, tuple) else (index,)
    for part in parts:
        if not (part is None or part is Ellipsis or isinstance(part, (int, np.integer, slice))):
            raise DimensionError(f"only basic indexing is differentiable, got {type(part).__name__}")
    return Slice.apply(x, index=index)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"upsample_nearest2x input must be N,C,H,W; got shape {x.shape}")
    return UpsampleNearest2x.apply(x)


# ========= ✅ GRADIENT CHECK ========= #
def gradcheck(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` is a zero-argument closure over ``params`` returning a scalar; the
    parameters are perturbed in place. Relative error per coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"gradcheck eps must lie in [1e-7, 1e-3], got {eps}")
    for tensor in params:
        if tensor.dtype != np.float64:
            raise ContractError(f"gradcheck runs in 64-bit mode; {tensor!r} is {tensor.dtype}")
        if not tensor.data.flags.c_contiguous:
            tensor.data = np.ascontiguousarray(tensor.data)

    with precision(np.float64):
        with ComputeGraph() as graph:
            loss = f()
        if loss.size != 1:
            raise ContractError(f"gradcheck needs a scalar-valued f, got shape {loss.shape}")
        if graph.producer(loss) is None:
            analytic = [np.zeros_like(t.data) for t in params]
        else:
            analytic = backward(loss, graph, params)

        repeat = f()
        if not np.array_equal(loss.data, repeat.data):
            raise ContractError("f is not deterministic: two evaluations at the same point differ")

        worst = 0.0
        for tensor, grad in zip(params, analytic):
            flat = tensor.data.reshape(-1)
            grad_flat = grad.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + eps
                plus = f().item()
                flat[i] = original - eps
                minus = f().item()
                flat[i] = original
                numeric = (plus - minus) / (2 * eps)
                analytic_i = float(grad_flat[i])
                error = abs(analytic_i - numeric) / max(1.0, abs(analytic_i), abs(numeric))
                worst = max(worst, error)
    logger.debug("gradcheck over %d tensors: max relative error %.3e", len(params), worst)
    return worst
