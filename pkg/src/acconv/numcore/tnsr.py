"""TNSR binary tensor files and named-tensor checkpoint bundles.

Layout (all little-endian):
  tensor: magic b"TNSR" | version u16 = 1 | rank u16 | extents u64 * rank
          | payload f64, row-major
  bundle: a sequence of records, each: name-length u16 | UTF-8 name
          | one tensor blob
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError

MAGIC = b"TNSR"
VERSION = 1


def _pack_tensor(arr: np.ndarray) -> bytes:
    # tobytes() always emits row-major, so no contiguity fixup (which would
    # also promote 0-d arrays to 1-d)
    arr = np.asarray(arr, dtype=np.float64)
    head = MAGIC + struct.pack("<HH", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def _unpack_tensor(buf: bytes, off: int):
    if buf[off : off + 4] != MAGIC:
        raise FormatError(f"bad TNSR magic at offset {off}")
    off += 4
    version, rank = struct.unpack_from("<HH", buf, off)
    off += 4
    if version != VERSION:
        raise FormatError(f"unsupported TNSR version {version}")
    extents = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    n = int(np.prod(extents)) if rank else 1
    end = off + 8 * n
    if end > len(buf):
        raise FormatError("truncated TNSR payload")
    arr = np.frombuffer(buf[off:end], dtype="<f8").reshape(extents).copy()
    return arr, end


def write_tensor(path, arr: np.ndarray):
    Path(path).write_bytes(_pack_tensor(np.asarray(arr)))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = _unpack_tensor(buf, 0)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes")
    return arr


def write_bundle(path, named: dict):
    """Write a checkpoint bundle; iteration order of `named` is preserved."""
    parts = []
    for name, arr in named.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"bundle name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)) + raw + _pack_tensor(np.asarray(arr)))
    Path(path).write_bytes(b"".join(parts))


def read_bundle(path) -> dict:
    buf = Path(path).read_bytes()
    out, off = {}, 0
    while off < len(buf):
        if off + 2 > len(buf):
            raise FormatError(f"{path}: truncated record header")
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        arr, off = _unpack_tensor(buf, off)
        if name in out:
            raise FormatError(f"{path}: duplicate bundle entry {name!r}")
        out[name] = arr
    return out
