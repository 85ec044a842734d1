"""Little-endian keyed-vector container shared by the embedding cache and index files.

Layout: 6-byte magic, u32 dimension, u64 record count, then per record
``u32 key_len, key bytes (UTF-8), dimension x f32``.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

_HEADER = struct.Struct("<6sIQ")
_KEYLEN = struct.Struct("<I")


class FormatError(ValueError):
    pass


def encode(magic: bytes, dimension: int, records: list[tuple[str, np.ndarray]]) -> bytes:
    parts = [_HEADER.pack(magic, dimension, len(records))]
    for key, vec in records:
        kb = key.encode("utf-8")
        arr = np.asarray(vec, dtype="<f4")
        if arr.shape != (dimension,):
            raise FormatError(f"record {key!r} has shape {arr.shape}, expected ({dimension},)")
        parts.append(_KEYLEN.pack(len(kb)))
        parts.append(kb)
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(magic: bytes, data: bytes) -> tuple[int, list[tuple[str, np.ndarray]]]:
    """Parse a container; vectors come back as float64 arrays of the stored f32 values."""
    if len(data) < len(magic) or data[:len(magic)] != magic:
        raise FormatError("bad magic")
    if len(data) < _HEADER.size:
        raise FormatError(f"truncated header at byte offset {len(data)}")
    _, dimension, count = _HEADER.unpack_from(data, 0)
    off = _HEADER.size
    vec_bytes = 4 * dimension
    records = []
    for _ in range(count):
        if off + _KEYLEN.size > len(data):
            raise FormatError(f"truncated record at byte offset {off}")
        (klen,) = _KEYLEN.unpack_from(data, off)
        off += _KEYLEN.size
        if off + klen + vec_bytes > len(data):
            raise FormatError(f"truncated record at byte offset {off}")
        key = data[off:off + klen].decode("utf-8")
        off += klen
        vec = np.frombuffer(data, dtype="<f4", count=dimension, offset=off).astype(np.float64)
        off += vec_bytes
        records.append((key, vec))
    if off != len(data):
        raise FormatError(f"trailing bytes at byte offset {off}")
    return dimension, records


def write_atomic(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
