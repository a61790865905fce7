"""Versioned binary checkpoint format.

Layout (all integers little-endian)::

    magic    4s   b"LMCK"
    version  u16
    flags    u16  bit 0: payload stored as float32
    nseg     u32
    total    u64
    nseg x { u16 name length, name utf-8, u64 start, u64 length }
    payload  total x f64 (or f32)
    sha256   32 bytes over everything before it
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

from .errors import ChecksumError, CheckpointError, LayoutError, TruncationError, VersionError
from .params import LayerLayout, ParamVector, Segment

MAGIC = b"LMCK"
VERSION = 1
FLAG_F32 = 1
_DIGEST = 32


def encode(theta: ParamVector, float32: bool = False) -> bytes:
    layout = theta.layout
    parts = [MAGIC, struct.pack("<HHIQ", VERSION, FLAG_F32 if float32 else 0,
                                len(layout.segments), layout.total_params)]
    for seg in layout.segments:
        name = seg.name.encode()
        parts.append(struct.pack("<H", len(name)) + name + struct.pack("<QQ", seg.start, seg.length))
    parts.append(theta.values.astype("<f4" if float32 else "<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode(buf: bytes, layout: LayerLayout | None = None) -> ParamVector:
    def need(end):
        if len(buf) < end:
            raise TruncationError(f"checkpoint truncated: needed {end} bytes, have {len(buf)}")

    need(4)
    if buf[:4] != MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {buf[:4]!r})")
    need(20)
    version, flags, nseg, total = struct.unpack_from("<HHIQ", buf, 4)
    if version != VERSION:
        raise VersionError(f"checkpoint version {version}, reader supports {VERSION}")
    pos, segs = 20, []
    for _ in range(nseg):
        need(pos + 2)
        (n,) = struct.unpack_from("<H", buf, pos)
        need(pos + 2 + n + 16)
        name = buf[pos + 2 : pos + 2 + n].decode()
        start, length = struct.unpack_from("<QQ", buf, pos + 2 + n)
        segs.append(Segment(name, start, length))
        pos += 2 + n + 16
    width = 4 if flags & FLAG_F32 else 8
    end = pos + total * width
    need(end + _DIGEST)
    if len(buf) > end + _DIGEST:
        raise CheckpointError(f"{len(buf) - end - _DIGEST} trailing bytes after checkpoint")
    if hashlib.sha256(buf[:end]).digest() != buf[end:]:
        raise ChecksumError("checkpoint checksum mismatch")
    stored = LayerLayout(tuple(segs))
    if stored.total_params != total:
        raise LayoutError("layout table does not cover the payload")
    if layout is not None and stored != layout:
        raise LayoutError("checkpoint layout differs from the expected layout")
    values = np.frombuffer(buf, dtype="<f4" if width == 4 else "<f8", count=total, offset=pos)
    return ParamVector(values.astype(np.float64), stored)


def save_checkpoint(path, theta: ParamVector, float32: bool = False) -> str:
    """Write atomically; returns the sha256 hex digest of the file."""
    data = encode(theta, float32)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path, layout: LayerLayout | None = None) -> ParamVector:
    return decode(Path(path).read_bytes(), layout)
