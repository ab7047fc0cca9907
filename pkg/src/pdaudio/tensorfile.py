"""Flat named-tensor container.

Layout (all integers little-endian)::

    magic      8 bytes  b"PDTENSOR"
    version    u32
    meta_len   u32, followed by meta_len bytes of UTF-8 JSON
    count      u32
    per tensor:
        name_len u16, name (UTF-8)
        dtype    u8    0 = float32, 1 = float64
        ndim     u8
        shape    ndim x u64
        nbytes   u64, followed by nbytes of raw little-endian data
    sha256     32 bytes over everything above
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptFile, IncompatibleCheckpoint, InvalidArgument

MAGIC = b"PDTENSOR"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def write_tensors(path, tensors: dict, meta: dict | None = None) -> None:
    """Write ``tensors`` (name -> float32/float64 array) atomically to ``path``."""
    parts = [MAGIC, struct.pack("<I", VERSION)]
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise InvalidArgument(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        data = np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes()
        name_b = name.encode("utf-8")
        parts += [
            struct.pack("<H", len(name_b)),
            name_b,
            struct.pack("<BB", _CODES[arr.dtype], arr.ndim),
            struct.pack(f"<{arr.ndim}Q", *arr.shape),
            struct.pack("<Q", len(data)),
            data,
        ]
    body = b"".join(parts)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body + hashlib.sha256(body).digest())
    os.replace(tmp, path)


def read_tensors(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``; raises :class:`CorruptFile` on any damage."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 32 or raw[: len(MAGIC)] != MAGIC:
        raise CorruptFile(f"{path}: not a tensor container")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptFile(f"{path}: checksum mismatch (truncated or modified)")
    try:
        off = len(MAGIC)
        (version,) = struct.unpack_from("<I", body, off)
        off += 4
        if version != VERSION:
            raise IncompatibleCheckpoint(f"{path}: container version {version}, expected {VERSION}")
        (meta_len,) = struct.unpack_from("<I", body, off)
        off += 4
        meta = json.loads(body[off : off + meta_len].decode("utf-8"))
        off += meta_len
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off : off + name_len].decode("utf-8")
            off += name_len
            code, ndim = struct.unpack_from("<BB", body, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}Q", body, off)
            off += 8 * ndim
            (nbytes,) = struct.unpack_from("<Q", body, off)
            off += 8
            dtype = _DTYPES[code]
            arr = np.frombuffer(body, dtype=dtype, count=nbytes // dtype.itemsize, offset=off)
            tensors[name] = arr.reshape(shape).copy()
            off += nbytes
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"{path}: malformed container ({exc})") from exc
    return tensors, meta
