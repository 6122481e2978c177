"""Versioned binary container for trained models.

Layout (all integers little-endian)::

    b"WSDC"  u32 version  u32 meta_len  meta (UTF-8 JSON)
    u32 n_blocks
    n_blocks x [u32 name_len, name, u32 ndim, ndim x u64 dims, f64 data]
    u32 crc32 of everything before it
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import FormatError

MAGIC = b"WSDC"
VERSION = 1


def dumps(params: dict, meta: dict) -> bytes:
    """Serialize named float arrays plus a JSON-able ``meta`` dict. Block order is sorted by name."""
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    m = json.dumps(meta, sort_keys=True).encode()
    out += struct.pack("<I", len(m)) + m
    out += struct.pack("<I", len(params))
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8")
        key = name.encode()
        out += struct.pack("<I", len(key)) + key
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError("model container is truncated")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def loads(buf: bytes):
    """Inverse of :func:`dumps`; returns ``(params, meta)``.

    Raises:
        FormatError: bad magic, unknown version, checksum mismatch or truncation.
    """
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise FormatError("not a model container (bad magic)")
    r = _Reader(buf)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported container version {version} (expected {VERSION})")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise FormatError("model container checksum mismatch")
    r.buf = buf[:-4]
    try:
        meta = json.loads(r.take(r.u32()).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable container metadata: {exc}") from None
    params = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}Q", r.take(8 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after the last parameter block")
    return params, meta


def save(path, params, meta):
    with open(path, "wb") as fh:
        fh.write(dumps(params, meta))


def load(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read model container {path}: {exc}") from None
    return loads(buf)
