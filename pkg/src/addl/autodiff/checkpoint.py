"""ADWT weight checkpoints.

Layout (little-endian)::

    b"ADWT" | version u8 | record* | crc32 u32

    record = name_len u16 | name utf-8 | rank u8 | extent u32 * rank | f64 * prod(extents)

The CRC covers every byte before it. Records are written in sorted-name order
so equal weight sets serialize to equal bytes.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"ADWT"
VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


def dumps(weights: dict[str, np.ndarray]) -> bytes:
    out = bytearray(MAGIC)
    out.append(VERSION)
    for name in sorted(weights):
        arr = np.asarray(weights[name], dtype="<f8")
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr).tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 9 or blob[:4] != MAGIC:
        raise CheckpointError("not an ADWT checkpoint", 0)
    if blob[4] != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob[4]}", 4)
    body_end = len(blob) - 4
    (crc,) = struct.unpack_from("<I", blob, body_end)
    if zlib.crc32(blob[:body_end]) != crc:
        raise CheckpointError("checkpoint CRC mismatch", body_end)
    pos = 5
    weights: dict[str, np.ndarray] = {}
    while pos < body_end:
        start = pos
        try:
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            rank = blob[pos]
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
        except (struct.error, IndexError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"malformed record header: {exc}", start) from exc
        count = int(np.prod(shape, dtype=np.int64))
        end = pos + 8 * count
        if end > body_end:
            raise CheckpointError(f"record {name!r} overruns the file", start)
        weights[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos = end
    return weights


def save(path: str | Path, weights: dict[str, np.ndarray]) -> bytes:
    blob = dumps(weights)
    Path(path).write_bytes(blob)
    return blob


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def model_id(blob: bytes) -> bytes:
    """8-byte identity of a serialized checkpoint."""
    return hashlib.sha256(blob).digest()[:8]
