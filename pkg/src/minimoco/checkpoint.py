"""Binary checkpoint container.

Layout (all little-endian):
    magic "MMC1" | u32 version | u32 array count
    per array: u16 name length | name UTF-8 | u8 dtype code | u8 rank
               | rank * u64 dims | raw payload
Dtype codes: 0 = float32, 1 = float64, 2 = uint64.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = [
    "MAGIC",
    "VERSION",
    "CheckpointError",
    "CheckpointMagicError",
    "CheckpointVersionError",
    "CheckpointTruncatedError",
    "CheckpointShapeError",
    "write_arrays",
    "read_arrays",
]

MAGIC = b"MMC1"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint64): 2}


class CheckpointError(Exception):
    """Base class for checkpoint container errors."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def write_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays; insertion order is preserved on disk."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODE_FOR:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"array name too long: {name[:40]}...")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", _CODE_FOR[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointTruncatedError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.off}, "
                f"file has {len(self.buf)}"
            )
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out


def read_arrays(path) -> dict[str, np.ndarray]:
    """Read all named arrays; raises distinct errors for bad magic/version and
    truncation."""
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<II", r.take(8))
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported version {version}, expected {VERSION}")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", r.take(2))
        name = r.take(name_len).decode("utf-8")
        code, rank = struct.unpack("<BB", r.take(2))
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank)) if rank else ()
        dtype = _DTYPE_CODES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        payload = r.take(nbytes)
        arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if r.off != len(buf):
        raise CheckpointTruncatedError(
            f"{len(buf) - r.off} trailing bytes after {count} arrays"
        )
    return arrays
