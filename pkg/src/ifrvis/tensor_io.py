"""Named-tensor binary files (magic ``IFRT``).

Layout, all little-endian::

    b"IFRT" | version u32 | count u32
    count x ( name_len u32 | utf-8 name | rank u32 | dims u64 * rank | f64 payload )
    trailer_len u64 | utf-8 JSON trailer
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

MAGIC = b"IFRT"
VERSION = 1


class TensorFormatError(ValueError):
    """Malformed, truncated or unsupported tensor file."""


def dumps_tensors(tensors: Mapping[str, np.ndarray], trailer: Optional[dict] = None) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.array(arr, dtype="<f8", order="C")  # keeps 0-d arrays 0-d
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    meta = json.dumps(trailer if trailer is not None else {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<Q", len(meta)))
    parts.append(meta)
    return b"".join(parts)


def loads_tensors(buf: bytes) -> tuple[dict, dict]:
    view = memoryview(buf)
    pos = 0

    def read(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise TensorFormatError("truncated tensor file")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(read(4)) != MAGIC:
        raise TensorFormatError("bad magic, not an IFRT tensor file")
    version, count = struct.unpack("<II", read(8))
    if version != VERSION:
        raise TensorFormatError(f"unsupported tensor file version {version} (expected {VERSION})")
    tensors: dict = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", read(4))
        name = bytes(read(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", read(4))
        dims = struct.unpack(f"<{rank}Q", read(8 * rank))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(read(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
        if name in tensors:
            raise TensorFormatError(f"duplicate tensor name {name!r}")
        tensors[name] = arr
    (mlen,) = struct.unpack("<Q", read(8))
    trailer = json.loads(bytes(read(mlen)).decode("utf-8")) if mlen else {}
    return tensors, trailer


def save_tensors(path, tensors: Mapping[str, np.ndarray], trailer: Optional[dict] = None) -> None:
    Path(path).write_bytes(dumps_tensors(tensors, trailer))


def load_tensors(path) -> tuple[dict, dict]:
    return loads_tensors(Path(path).read_bytes())
