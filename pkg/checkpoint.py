#!/usr/bin/env python3
"""
Binary checkpoint format (all integers little-endian):

    magic      4 bytes  b"Y12C"
    version    u32      1
    cfg_len    u32      length of the embedded ModelConfig text
    cfg        bytes    UTF-8 config text
    count      u32      number of tensors
    per tensor:
        name_len u16, name (UTF-8)
        dtype    u8     0 = float32, 1 = float64
        rank     u8
        dims     rank x u32
        payload  little-endian values, row-major

The whole file is parsed before any model is built, so a bad file never
yields a partial model.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from errors import CompatibilityError, ConfigurationError, FormatError
from model_assembly import Model, ModelConfig, build_model

logger = logging.getLogger(__name__)

# ========= 🔧 FORMAT ========= #
MAGIC = b"Y12C"
VERSION = 1
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
CODE_DTYPES = {code: dtype.newbyteorder("<") for dtype, code in DTYPE_CODES.items()}


@dataclass
class CheckpointContents:
    config_text: str
    tensors: List[Tuple[str, np.ndarray]]


def encode_checkpoint(model: Model) -> bytes:
    config = model.cfg.dump().encode("utf-8")
    params = list(model.named_parameters())
    chunks = [MAGIC, struct.pack("<II", VERSION, len(config)), config, struct.pack("<I", len(params))]
    for name, param in params:
        encoded = name.encode("utf-8")
        dtype = param.data.dtype
        if dtype not in DTYPE_CODES:
            raise FormatError(f"{name}: cannot store dtype {dtype}")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<BB", DTYPE_CODES[dtype], param.data.ndim))
        chunks.append(struct.pack(f"<{param.data.ndim}I", *param.data.shape))
        chunks.append(np.ascontiguousarray(param.data, dtype=dtype.newbyteorder("<")).tobytes())
    return b"".join(chunks)


def save_checkpoint(model: Model, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_checkpoint(model)
    path.write_bytes(payload)
    logger.info("Saved checkpoint %s (%d bytes, %d tensors)", path, len(payload), len(model.parameters()))
    return path


class _Reader:
    def __init__(self, data: bytes, source: str) -> None:
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, size: int, what: str) -> bytes:
        if self.pos + size > len(self.data):
            raise FormatError(f"{self.source}: truncated while reading {what} at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> CheckpointContents:
    reader = _Reader(data, source)
    if reader.take(4, "magic") != MAGIC:
        raise FormatError(f"{source}: bad magic, not a Y12C checkpoint")
    (version,) = reader.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    (config_len,) = reader.unpack("<I", "config length")
    try:
        config_text = reader.take(config_len, "config").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{source}: embedded config is not UTF-8") from exc

    (count,) = reader.unpack("<I", "tensor count")
    tensors: List[Tuple[str, np.ndarray]] = []
    for index in range(count):
        (name_len,) = reader.unpack("<H", f"tensor {index} name length")
        name = reader.take(name_len, f"tensor {index} name").decode("utf-8", errors="replace")
        code, rank = reader.unpack("<BB", f"{name} header")
        if code not in CODE_DTYPES:
            raise FormatError(f"{source}: {name} has unknown dtype code {code}")
        dims = reader.unpack(f"<{rank}I", f"{name} dims")
        dtype = CODE_DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        array = np.frombuffer(reader.take(size, f"{name} payload"), dtype=dtype).reshape(dims)
        tensors.append((name, array.astype(dtype.newbyteorder("="))))
    if reader.pos != len(data):
        raise FormatError(f"{source}: {len(data) - reader.pos} trailing bytes after the tensor table")
    return CheckpointContents(config_text, tensors)


def check_compatible(model: Model, tensors: List[Tuple[str, np.ndarray]]) -> None:
    """Raise CompatibilityError naming the first name or shape that differs."""
    expected = list(model.named_parameters())
    for (want, param), (got, array) in zip(expected, tensors):
        if want != got:
            raise CompatibilityError(f"tensor name mismatch: architecture expects {want!r}, checkpoint has {got!r}")
        if tuple(param.shape) != tuple(array.shape):
            raise CompatibilityError(
                f"{want}: shape {tuple(array.shape)} in checkpoint, architecture expects {tuple(param.shape)}"
            )
    if len(expected) > len(tensors):
        raise CompatibilityError(f"checkpoint lacks tensor {expected[len(tensors)][0]!r}")
    if len(tensors) > len(expected):
        raise CompatibilityError(f"checkpoint has unexpected tensor {tensors[len(expected)][0]!r}")


def load_checkpoint(path: Union[str, Path], config: Optional[ModelConfig] = None) -> Model:
    """Rebuild the model from its embedded config, or from ``config`` when given."""
    path = Path(path)
    contents = decode_checkpoint(path.read_bytes(), str(path))
    if config is None:
        try:
            config = ModelConfig.parse(contents.config_text)
        except ConfigurationError as exc:
            raise FormatError(f"{path}: embedded config is invalid: {exc}") from exc
    model = build_model(config)
    check_compatible(model, contents.tensors)
    for (_, param), (_, array) in zip(model.named_parameters(), contents.tensors):
        param.data = array.copy()
    logger.info("Loaded checkpoint %s (variant %s)", path, config.variant)
    return model
