"""BKWT binary weight/checkpoint files.

Layout (little-endian throughout)::

    b"BKWT" | u16 version (=1) | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 dtype | u8 rank | u32 dims... | payload
    u32 CRC32 of every preceding byte

dtype codes: 0 float32, 1 float64, 2 int64, 3 uint8.

Network parameters are stored under their plain names, optimizer buffers
under ``opt/``, and metadata under ``meta/``: ints as int64[1], floats as
float64[1], strings as UTF-8 uint8 vectors, arrays as themselves.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    CheckpointError,
    ChecksumError,
    TruncatedError,
    UnsupportedVersionError,
)

MAGIC = b"BKWT"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2, np.dtype(np.uint8): 3}

OPT_PREFIX = "opt/"
META_PREFIX = "meta/"


@dataclass
class WeightStore:
    tensors: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def _encode_meta(value):
    if isinstance(value, bool):
        return np.array([int(value)], dtype=np.int64)
    if isinstance(value, (int, np.integer)):
        return np.array([value], dtype=np.int64)
    if isinstance(value, (float, np.floating)):
        return np.array([value], dtype=np.float64)
    if isinstance(value, str):
        return np.frombuffer(value.encode("utf-8"), dtype=np.uint8)
    return np.asarray(value)


def _decode_meta(arr):
    if arr.dtype == np.uint8:
        return arr.tobytes().decode("utf-8")
    if arr.dtype == np.int64 and arr.shape == (1,):
        return int(arr[0])
    if arr.dtype == np.float64 and arr.shape == (1,):
        return float(arr[0])
    return arr


def _entries(store):
    for name, t in store.tensors.items():
        yield name, np.asarray(t)
    for name, t in store.optimizer.items():
        yield OPT_PREFIX + name, np.asarray(t)
    for key, value in store.meta.items():
        yield META_PREFIX + key, _encode_meta(value)


def save_weights(store: WeightStore) -> bytes:
    entries = list(_entries(store))
    parts = [MAGIC, struct.pack("<HI", VERSION, len(entries))]
    for name, arr in entries:
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedError(f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_weights(data: bytes) -> WeightStore:
    r = _Reader(data)
    if len(data) < 4 or bytes(data[:4]) != MAGIC:
        raise BadMagicError("not a BKWT checkpoint (bad magic)")
    r.take(4)
    version, count = r.unpack("<HI")
    if version != VERSION:
        raise UnsupportedVersionError(f"BKWT version {version} not supported (expected {VERSION})")
    store = WeightStore(version=version)
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = bytes(r.take(name_len)).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}I")
        dtype = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(dims)
        arr = arr.astype(dtype.newbyteorder("="), copy=True)
        if name.startswith(META_PREFIX):
            store.meta[name[len(META_PREFIX):]] = _decode_meta(arr)
        elif name.startswith(OPT_PREFIX):
            store.optimizer[name[len(OPT_PREFIX):]] = arr
        else:
            if name in store.tensors:
                raise CheckpointError(f"duplicate tensor {name!r}")
            store.tensors[name] = arr
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after checksum")
    if zlib.crc32(bytes(data[:body_end])) != crc:
        raise ChecksumError("checkpoint CRC32 mismatch")
    return store


def write_checkpoint(path, store):
    data = save_weights(store)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_checkpoint(path) -> WeightStore:
    with open(path, "rb") as fh:
        return load_weights(fh.read())
