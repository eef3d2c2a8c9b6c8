"""Binary PGM (P5, maxval 255) reading and writing."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import FormatError

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def parse_pgm(data: bytes) -> np.ndarray:
    """Decode P5 bytes into a [0, 1] float plane."""
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if not m:
            raise FormatError("truncated PGM header", pos)
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P5":
        raise FormatError("only binary PGM (P5) is supported", 0)
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise FormatError("non-numeric PGM header field", 0) from None
    if w <= 0 or h <= 0 or maxval != 255:
        raise FormatError(f"unsupported PGM geometry {w}x{h} maxval {maxval}", 0)
    pos += 1  # single whitespace byte before the raster
    raster = data[pos : pos + w * h]
    if len(raster) != w * h:
        raise FormatError("PGM raster truncated", pos + len(raster))
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w) / 255.0


def read_pgm(path: str | Path) -> np.ndarray:
    return parse_pgm(Path(path).read_bytes())


def to_pgm_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("expected a 2-D plane")
    raster = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    h, w = raster.shape
    return f"P5\n{w} {h}\n255\n".encode() + raster.tobytes()


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    Path(path).write_bytes(to_pgm_bytes(img))
