"""Flat container of named float64 arrays.

Layout (all integers little-endian)::

    magic   4 bytes  b"DVTC"
    version u32      1
    count   u64
    count x entry:
        name_len u32, name (utf-8), rank u32, extents rank x i64, data (float64, C order)

An optional trailer holds JSON metadata: b"META", u64 length, utf-8 JSON.
"""

import io
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"DVTC"
VERSION = 1
META_MAGIC = b"META"


class FormatError(ValueError):
    pass


def write_arrays(stream, arrays: dict, meta: Optional[dict] = None) -> None:
    stream.write(MAGIC)
    stream.write(struct.pack("<IQ", VERSION, len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        stream.write(struct.pack("<I", len(raw)))
        stream.write(raw)
        stream.write(struct.pack("<I", arr.ndim))
        stream.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
        stream.write(arr.tobytes())
    if meta is not None:
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        stream.write(META_MAGIC)
        stream.write(struct.pack("<Q", len(blob)))
        stream.write(blob)


def _read(stream, n: int) -> bytes:
    b = stream.read(n)
    if len(b) != n:
        raise FormatError("truncated tensor container")
    return b


def read_arrays(stream) -> tuple:
    """Returns (arrays, meta); meta is None when the trailer is absent."""
    if stream.read(4) != MAGIC:
        raise FormatError("not a tensor container (bad magic)")
    version, count = struct.unpack("<IQ", _read(stream, 12))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _read(stream, 4))
        name = _read(stream, name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", _read(stream, 4))
        shape = struct.unpack(f"<{rank}q", _read(stream, 8 * rank))
        n = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(_read(stream, 8 * n), dtype="<f8").reshape(shape).copy()
    meta = None
    tag = stream.read(4)
    if tag == META_MAGIC:
        (length,) = struct.unpack("<Q", _read(stream, 8))
        meta = json.loads(_read(stream, length).decode("utf-8"))
    elif tag:
        raise FormatError("unexpected trailing bytes")
    return arrays, meta


def save(path, arrays: dict, meta: Optional[dict] = None) -> None:
    buf = io.BytesIO()
    write_arrays(buf, arrays, meta)
    Path(path).write_bytes(buf.getvalue())


def load(path) -> tuple:
    with open(path, "rb") as fh:
        return read_arrays(fh)
