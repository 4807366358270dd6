"""Binary checkpoint container.

Layout (all integers little-endian u32, payload little-endian float64)::

    b"AFRG" | version | config length | config UTF-8 ("key=value" lines)
    then per tensor: name length | name | rank | dims... | payload

The config carries ``checkpoint.n_tensors`` so truncation at a tensor
boundary is detected.  Keys and tensors are written in sorted order, which
makes save -> load -> save byte-identical.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"AFRG"
VERSION = 1
N_TENSORS_KEY = "checkpoint.n_tensors"


class CheckpointError(ValueError):
    """Checkpoint file is truncated, of another version, or inconsistent."""


def encode(config: Mapping[str, str], tensors: Mapping[str, np.ndarray]) -> bytes:
    items = dict(config)
    items[N_TENSORS_KEY] = str(len(tensors))
    for k, v in items.items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise ValueError(f"config entry {k!r} cannot be serialized")
    text = "".join(f"{k}={items[k]}\n" for k in sorted(items)).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(text)), text]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes) -> None:
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode(raw: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    try:
        text = r.take(r.u32()).decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("config block is not UTF-8") from None
    config: dict[str, str] = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed config line {line!r}")
        config[key] = value
    try:
        n_tensors = int(config.pop(N_TENSORS_KEY))
    except (KeyError, ValueError):
        raise CheckpointError(f"config lacks a valid {N_TENSORS_KEY}") from None
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        try:
            name = r.take(r.u32()).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("tensor name is not UTF-8") from None
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        tensors[name] = data
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} trailing bytes after last tensor")
    return config, tensors


def write(path: str | os.PathLike, config: Mapping[str, str], tensors: Mapping[str, np.ndarray]) -> None:
    payload = encode(config, tensors)
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def read(path: str | os.PathLike) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
