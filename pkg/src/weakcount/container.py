"""Versioned binary container of named arrays plus JSON metadata.

Layout (little-endian): magic(4) | version u16 | meta length u32 | meta JSON |
array count u32 | per array: name, dtype string, ndim u8, shape u64[ndim],
raw bytes | CRC32 of everything before it.
"""

from __future__ import annotations

import io
import json
import struct
import zlib

import numpy as np


class ContainerError(ValueError):
    pass


def _str(buf: io.BytesIO, s: str):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def dumps(magic: bytes, version: int, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(magic)
    raw_meta = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<HI", version, len(raw_meta)))
    buf.write(raw_meta)
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        _str(buf, name)
        _str(buf, le.dtype.str)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(le).tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def loads(magic: bytes, version: int, data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < len(magic) + 10 or data[:len(magic)] != magic:
        raise ContainerError("bad magic: not a file of the expected kind")
    pos = len(magic)

    def take(n):
        nonlocal pos
        if pos + n > len(data) - 4:
            raise ContainerError("unexpected end of file")
        out = data[pos:pos + n]
        pos += n
        return out

    def unpack(fmt):
        return struct.unpack(fmt, take(struct.calcsize(fmt)))

    def string():
        (n,) = unpack("<H")
        return take(n).decode("utf-8")

    (ver, meta_len) = unpack("<HI")
    if ver != version:
        raise ContainerError(f"unsupported format version {ver} (expected {version})")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise ContainerError("checksum mismatch: file is truncated or corrupted")
    meta = json.loads(take(meta_len).decode("utf-8"))
    (count,) = unpack("<I")
    arrays = {}
    for _ in range(count):
        name = string()
        dtype = np.dtype(string())
        (ndim,) = unpack("<B")
        shape = unpack(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(n * dtype.itemsize), dtype=dtype).reshape(shape)
        arrays[name] = arr.astype(dtype.newbyteorder("="))
    if pos != len(data) - 4:
        raise ContainerError("trailing bytes after last array")
    return meta, arrays
