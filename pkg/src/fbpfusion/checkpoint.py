"""Binary parameter checkpoints ("FBPM" container).

Layout, all integers little-endian::

    b"FBPM"  u32 version  u32 count
    repeated count times:
        u16 name_len  name (utf-8)  u8 rank  u32 dims[rank]  f32 payload (row-major)
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

from fbpfusion.errors import FormatError

MAGIC = b"FBPM"
VERSION = 1


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        if not 1 <= arr.ndim <= 255:
            raise FormatError(f"tensor {name!r} has unsupported rank {arr.ndim}")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> Dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"checkpoint truncated while reading {what} at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    magic = take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    out: Dict[str, np.ndarray] = {}
    for idx in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"name length of tensor {idx}"))
        try:
            name = take(nlen, f"name of tensor {idx}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"tensor {idx} name is not utf-8") from exc
        (rank,) = struct.unpack("<B", take(1, f"rank of {name!r}"))
        if rank == 0:
            raise FormatError(f"tensor {name!r} has rank 0")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name!r}"))
        n = int(np.prod(dims))
        out[name] = np.frombuffer(take(4 * n, f"payload of {name!r}"), dtype="<f4").reshape(dims).copy()
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after {count} tensors")
    return out


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(tensors))


def load(path) -> Dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
