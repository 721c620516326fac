"""Low-level readers/writers for the on-disk container formats.

All multi-byte integers are little-endian u32; floats are little-endian
f64; JSON blobs are length-prefixed UTF-8.  See FORMAT.md for the full
layout of each container.
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import BinaryIO

import numpy as np


class FormatError(ValueError):
    """Raised on magic/shape/truncation problems in container files."""


def write_magic(fh: BinaryIO, magic: str):
    fh.write(magic.encode("ascii"))


def read_magic(fh: BinaryIO, magic: str, path=""):
    got = fh.read(len(magic))
    if got != magic.encode("ascii"):
        raise FormatError(f"bad magic in {path or 'stream'}: expected {magic!r}, got {got!r}")


def write_u32(fh: BinaryIO, *values: int):
    for v in values:
        fh.write(struct.pack("<I", v))


def read_u32(fh: BinaryIO, count: int = 1, path=""):
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise FormatError(f"truncated u32 block in {path or 'stream'}")
    vals = struct.unpack(f"<{count}I", raw)
    return vals[0] if count == 1 else vals


def write_json_block(fh: BinaryIO, obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    write_u32(fh, len(blob))
    fh.write(blob)


def read_json_block(fh: BinaryIO, path=""):
    n = read_u32(fh, path=path)
    raw = fh.read(n)
    if len(raw) != n:
        raise FormatError(f"truncated JSON block in {path or 'stream'}")
    return json.loads(raw.decode("utf-8"))


def write_f64_array(fh: BinaryIO, arr: np.ndarray):
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_f64_array(fh: BinaryIO, shape, path=""):
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise FormatError(f"truncated f64 data in {path or 'stream'}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def write_u16_array(fh: BinaryIO, arr: np.ndarray):
    if arr.size and (arr.min() < 0 or arr.max() > 0xFFFF):
        raise FormatError("values outside u16 range")
    fh.write(np.ascontiguousarray(arr, dtype="<u2").tobytes())


def read_u16_array(fh: BinaryIO, shape, path=""):
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(2 * count)
    if len(raw) != 2 * count:
        raise FormatError(f"truncated u16 data in {path or 'stream'}")
    return np.frombuffer(raw, dtype="<u2").reshape(shape).astype(np.int64)


def write_tensor_block(fh: BinaryIO, arr: np.ndarray):
    """(u32 rank, u32 dims..., f64 data) — the checkpoint tensor layout."""
    write_u32(fh, arr.ndim, *arr.shape)
    write_f64_array(fh, arr)


def read_tensor_block(fh: BinaryIO, path=""):
    rank = read_u32(fh, path=path)
    if rank == 0 or rank > 8:
        raise FormatError(f"implausible tensor rank {rank} in {path or 'stream'}")
    dims = read_u32(fh, rank, path=path)
    shape = (dims,) if isinstance(dims, int) else tuple(dims)
    return read_f64_array(fh, shape, path=path)


def expect_eof(fh: BinaryIO, path=""):
    if fh.read(1):
        raise FormatError(f"trailing bytes in {path or 'stream'}")


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
