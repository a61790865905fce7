"""Dataset descriptors: seeded synthetic generators and IDX binary files."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import BoundsError, ConfigError, ParseError
from .net import DatasetSlice

_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def parse_idx(buf: bytes) -> np.ndarray:
    """Decode one IDX blob (big-endian header, then row-major payload)."""
    if len(buf) < 4:
        raise ParseError("truncated IDX magic", len(buf))
    zero, code, ndim = struct.unpack(">HBB", buf[:4])
    if zero != 0:
        raise ParseError(f"bad IDX magic 0x{int.from_bytes(buf[:4], 'big'):08x}", 0)
    if code not in _IDX_TYPES:
        raise ParseError(f"unknown IDX element type 0x{code:02x}", 2)
    if ndim == 0:
        raise ParseError("IDX declares zero dimensions", 3)
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise ParseError("truncated IDX dimension table", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    dtype = _IDX_TYPES[code]
    need = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    have = len(buf) - head
    if have < need:
        raise ParseError(f"IDX payload has {have} bytes, header declares {need}", len(buf))
    if have > need:
        raise ParseError(f"{have - need} trailing bytes after IDX payload", head + need)
    return np.frombuffer(buf, dtype=dtype, count=need // dtype.itemsize, offset=head).reshape(dims)


def read_idx(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return parse_idx(raw)


def write_idx(path, array: np.ndarray):
    codes = {v.newbyteorder("="): k for k, v in _IDX_TYPES.items()}
    a = np.asarray(array)
    code = codes.get(a.dtype.newbyteorder("="))
    if code is None:
        raise ConfigError(f"dtype {a.dtype} has no IDX encoding")
    header = struct.pack(">HBB", 0, code, a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + a.astype(_IDX_TYPES[code]).tobytes())


def _rng(seed):
    return np.random.Generator(np.random.PCG64(int(seed)))


def two_gaussians(n, seed, dim=2, separation=2.0, scale=1.0):
    """Balanced two-class Gaussian blobs centred at +-separation/2 on axis 0."""
    rng = _rng(seed)
    y = np.arange(n) % 2
    centres = np.zeros((2, dim))
    centres[0, 0], centres[1, 0] = -separation / 2, separation / 2
    x = centres[y] + scale * rng.standard_normal((n, dim))
    return x, y.astype(np.int64)


def spiral(n, seed, classes=3, noise=0.2, turns=1.0, dim=2):
    """Interleaved spiral arms, one per class; extra dims are pure noise."""
    rng = _rng(seed)
    y = np.arange(n) % classes
    t = rng.uniform(0.0, 1.0, n)
    r = 0.1 + 0.9 * t
    ang = 2 * np.pi * (turns * t + y / classes)
    x = np.zeros((n, dim))
    x[:, 0] = r * np.cos(ang)
    x[:, 1] = r * np.sin(ang)
    x += noise * rng.standard_normal((n, dim))
    return x, y.astype(np.int64)


def stratified_subset(labels: np.ndarray, size: int, seed: int) -> np.ndarray:
    """Seeded class-balanced index selection, returned in ascending order."""
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ConfigError("stratified subsets need integer class labels")
    if size > labels.shape[0]:
        raise BoundsError(f"subset of {size} requested from {labels.shape[0]} examples")
    classes = np.unique(labels)
    base, extra = divmod(size, classes.shape[0])
    rng = _rng(seed)
    picked = []
    for i, c in enumerate(classes):
        k = base + (1 if i < extra else 0)
        pool = np.flatnonzero(labels == c)
        if k > pool.shape[0]:
            raise BoundsError(f"class {c} has {pool.shape[0]} examples, {k} requested")
        picked.append(rng.choice(pool, size=k, replace=False))
    return np.sort(np.concatenate(picked))


def load_dataset(source: dict) -> DatasetSlice:
    """Build a DatasetSlice from a descriptor dict.

    ``kind`` is ``two_gaussians``, ``spiral`` or ``idx``; any kind accepts
    ``subset`` (+ ``subset_seed``) for a stratified subset.
    """
    source = dict(source)
    kind = source.pop("kind", None)
    subset = source.pop("subset", None)
    subset_seed = source.pop("subset_seed", 0)
    if kind == "two_gaussians":
        x, y = two_gaussians(int(source.pop("n")), source.pop("seed", 0), **source)
    elif kind == "spiral":
        x, y = spiral(int(source.pop("n")), source.pop("seed", 0), **source)
    elif kind == "idx":
        x = read_idx(source["images"]).astype(np.float64)
        y = read_idx(source["labels"]).astype(np.int64)
        if x.shape[0] != y.shape[0]:
            raise ConfigError(f"{x.shape[0]} images but {y.shape[0]} labels")
        if source.get("normalize", True):
            x = x / 255.0
        layout = source.get("shape", "flat")
        if layout == "flat":
            x = x.reshape(x.shape[0], -1)
        elif layout == "image" and x.ndim == 3:
            x = x[:, None]
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    if subset is not None:
        idx = stratified_subset(y, int(subset), subset_seed)
        x, y = x[idx], y[idx]
    return DatasetSlice(x, y)
