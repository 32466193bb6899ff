"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"RSCL" 0x01 | count | count x (name_len, utf8 name, rank, dims..., float32 payload)

Entries are written in the order given, so equal inputs give equal bytes.
"""

from __future__ import annotations

import io
import os
import struct
from typing import Mapping

import numpy as np

from ..errors import ParseError

MAGIC = b"RSCL"
VERSION = 1


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(bytes([VERSION]))
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(blob: bytes, source=None) -> dict:
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ParseError("truncated checkpoint", path=source)
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise ParseError("not a checkpoint (bad magic)", path=source)
    version = take(1)[0]
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", path=source)
    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(bytes(take(4 * n)), dtype="<f4").reshape(dims)
        out[name] = arr.astype(np.float32)
    if pos != len(view):
        raise ParseError("trailing bytes after checkpoint entries", path=source)
    return out


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path) -> dict:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        return loads(fh.read(), source=path)
