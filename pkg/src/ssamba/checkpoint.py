"""Binary tensor checkpoints.

Layout, little-endian::

    b"SMBA"  u32 version=1  u32 n_tensors
    n x ( u16 name_len, utf-8 name, u8 rank, u32 dims[rank], f32 data )
    u64 checksum of every preceding byte

The checksum is CRC-32 (zlib polynomial) stored zero-extended in the
64-bit trailer field.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"SMBA"
VERSION = 1


class CorruptionError(ValueError):
    """Checkpoint bytes are malformed, truncated or fail the checksum."""


class ShapeMismatchError(ValueError):
    def __init__(self, name: str, expected, found):
        super().__init__(f"tensor {name!r}: expected shape {tuple(expected)}, found {tuple(found)}")
        self.name = name


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", zlib.crc32(body))


def decode_tensors(raw: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if len(raw) < 20:
        raise CorruptionError(f"{source}: truncated, {len(raw)} bytes is shorter than the 20-byte minimum")
    if raw[:4] != MAGIC:
        raise CorruptionError(f"{source}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CorruptionError(f"{source}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    pos = 12

    def need(n: int):
        if pos + n > len(raw) - 8:
            raise CorruptionError(
                f"{source}: truncated, expected at least {pos + n + 8} bytes, found {len(raw)}")

    for _ in range(count):
        need(2)
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        need(nlen + 1)
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        rank = raw[pos]
        pos += 1
        need(4 * rank)
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        need(nbytes)
        out[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=pos) \
            .reshape(dims).astype(np.float32)
        pos += nbytes
    if pos + 8 != len(raw):
        raise CorruptionError(f"{source}: expected {pos + 8} bytes, found {len(raw)}")
    (stored,) = struct.unpack_from("<Q", raw, pos)
    actual = zlib.crc32(raw[:pos])
    if stored != actual:
        raise CorruptionError(f"{source}: checksum mismatch (stored {stored:#x}, computed {actual:#x})")
    return out


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_tensors(tensors)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_tensors(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes(), str(path))
