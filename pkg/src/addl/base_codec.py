"""JPEG-like base-layer codec: 8x8 DCT, scaled quantisation, binary range coding.

Not JPEG-compatible. The bitstream is described in FORMAT.md. The training
proxy :func:`simulate_base` runs the same transform and quantiser path with
the cubic rounding surrogate so gradients can cross the codec.
"""

from __future__ import annotations

import math
import struct

import numpy as np

from .autodiff import Tensor, ops
from .entropy import Context, RangeDecoder, RangeEncoder, SignedModel, UIntModel
from .errors import FormatError

BASE_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.int64,
)


def _zigzag() -> np.ndarray:
    order = sorted(
        ((u, v) for u in range(8) for v in range(8)),
        key=lambda p: (p[0] + p[1], p[1] if (p[0] + p[1]) % 2 == 0 else p[0]),
    )
    return np.array([u * 8 + v for u, v in order])


ZIGZAG = _zigzag()


def dct_matrix(n: int = 8) -> np.ndarray:
    """Orthonormal DCT-II matrix: rows are basis functions."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    m[0] /= math.sqrt(2.0)
    return m


DCT8 = dct_matrix(8)


def dct8(block: np.ndarray) -> np.ndarray:
    return DCT8 @ block @ DCT8.T


def idct8(coef: np.ndarray) -> np.ndarray:
    return DCT8.T @ coef @ DCT8


def quant_table(q: int) -> np.ndarray:
    """Luminance steps for quality ``q`` (1..100), clamped to [1, 255]."""
    if not isinstance(q, (int, np.integer)) or not 1 <= q <= 100:
        raise ValueError(f"quality must be an integer in 1..100, got {q!r}")
    scale = 5000 // q if q < 50 else 200 - 2 * q
    return np.clip((BASE_LUMA_TABLE * scale + 50) // 100, 1, 255)


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _check_plane(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D plane, got shape {img.shape}")
    h, w = img.shape
    if h < 8 or w < 8:
        raise ValueError(f"base codec input must be at least 8x8, got {h}x{w}")
    if h > 0xFFFF or w > 0xFFFF:
        raise ValueError("plane too large for the base payload header")
    if not np.isfinite(img).all() or img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("samples must lie in [0, 1]")
    return img


def _padded(n: int) -> int:
    return (n + 7) // 8 * 8


def _to_blocks(a: np.ndarray) -> np.ndarray:
    """(..., H, W) -> (..., H/8, W/8, 8, 8)."""
    *lead, H, W = a.shape
    b = a.reshape(*lead, H // 8, 8, W // 8, 8)
    return np.swapaxes(b, -3, -2)


def _from_blocks(b: np.ndarray) -> np.ndarray:
    *lead, nh, nw, _, _ = b.shape
    return np.swapaxes(b, -3, -2).reshape(*lead, nh * 8, nw * 8)


def quantized_coefficients(img: np.ndarray, q: int) -> np.ndarray:
    """Integer coefficient indices, shape (H/8, W/8, 8, 8) on the padded plane."""
    img = _check_plane(img)
    h, w = img.shape
    padded = np.pad(img, ((0, _padded(h) - h), (0, _padded(w) - w)), mode="symmetric")
    coef = DCT8 @ _to_blocks(padded * 255.0 - 128.0) @ DCT8.T
    return round_half_away(coef / quant_table(q)).astype(np.int64)


def reconstruct(indices: np.ndarray, q: int, h: int, w: int) -> np.ndarray:
    coef = indices * quant_table(q)
    pix = DCT8.T @ coef @ DCT8
    out = (_from_blocks(pix) + 128.0) / 255.0
    return np.clip(out[:h, :w], 0.0, 1.0)


# ------------------------------------------------------------ entropy layer

_EOB_CLASSES = 8
_LEVEL_CLASSES = 3


def _level_class(z: int) -> int:
    return 0 if z <= 5 else (1 if z <= 20 else 2)


class _ACModels:
    def __init__(self):
        self.eob = [Context() for _ in range(_EOB_CLASSES)]
        self.run = [UIntModel(8) for _ in range(_LEVEL_CLASSES)]
        self.level = [UIntModel(12) for _ in range(_LEVEL_CLASSES)]
        self.sign = Context()


def _eob_ctx(pos: int) -> int:
    return min((pos - 1) // 8, _EOB_CLASSES - 1)


def encode_base(img: np.ndarray, q: int) -> bytes:
    """Compress a [0, 1] plane at quality ``q`` into a base payload."""
    img = _check_plane(img)
    h, w = img.shape
    idx = quantized_coefficients(img, q)
    zz = idx.reshape(idx.shape[0], idx.shape[1], 64)[:, :, ZIGZAG].reshape(-1, 64).tolist()

    dc_enc = RangeEncoder()
    dc_model = SignedModel(14)
    ac_enc = RangeEncoder()
    ac = _ACModels()
    prev = 0
    for block in zz:
        dc = block[0]
        dc_model.encode(dc_enc, dc - prev)
        prev = dc
        pos = 1
        for z in range(1, 64):
            v = block[z]
            if v == 0:
                continue
            ac_enc.encode(0, ac.eob[_eob_ctx(pos)])
            cls = _level_class(pos)
            ac.run[cls].encode(ac_enc, z - pos)
            ac.level[_level_class(z)].encode(ac_enc, abs(v) - 1)
            ac_enc.encode(1 if v < 0 else 0, ac.sign)
            pos = z + 1
        if pos <= 63:
            ac_enc.encode(1, ac.eob[_eob_ctx(pos)])
    dc_bytes = dc_enc.finish()
    ac_bytes = ac_enc.finish()
    header = struct.pack("<BHH", q, w, h)
    return (
        header
        + struct.pack("<I", len(dc_bytes)) + dc_bytes
        + struct.pack("<I", len(ac_bytes)) + ac_bytes
    )


def parse_base_header(data: bytes) -> tuple[int, int, int]:
    """(q, width, height) from a base payload."""
    if len(data) < 5:
        raise FormatError("base payload shorter than its header", len(data))
    q, w, h = struct.unpack_from("<BHH", data, 0)
    if not 1 <= q <= 100:
        raise FormatError(f"invalid quality {q}", 0)
    if w < 8 or h < 8:
        raise FormatError(f"invalid base dimensions {w}x{h}", 1)
    return q, w, h


def _split_streams(data: bytes) -> tuple[bytes, int, bytes, int]:
    pos = 5
    parts = []
    for name in ("DC", "AC"):
        if pos + 4 > len(data):
            raise FormatError(f"truncated {name} length prefix", pos)
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + n > len(data):
            raise FormatError(f"{name} stream length {n} overruns payload", pos - 4)
        parts.append((data[pos : pos + n], pos))
        pos += n
    if pos != len(data):
        raise FormatError("trailing bytes after AC stream", pos)
    return parts[0][0], parts[0][1], parts[1][0], parts[1][1]


def decode_base(data: bytes) -> np.ndarray:
    """Inverse of :func:`encode_base`; raises :class:`FormatError` on corrupt input."""
    q, w, h = parse_base_header(data)
    dc_bytes, dc_off, ac_bytes, ac_off = _split_streams(data)
    nh, nw = _padded(h) // 8, _padded(w) // 8
    dc_dec = RangeDecoder(dc_bytes, dc_off)
    dc_model = SignedModel(14)
    ac_dec = RangeDecoder(ac_bytes, ac_off)
    ac = _ACModels()
    zz = np.zeros((nh * nw, 64), dtype=np.int64)
    prev = 0
    limit = 1 << 20
    for b in range(nh * nw):
        prev += dc_model.decode(dc_dec)
        if abs(prev) > limit:
            raise FormatError("DC coefficient out of range", dc_dec.offset)
        zz[b, 0] = prev
        pos = 1
        while pos <= 63:
            if ac_dec.decode(ac.eob[_eob_ctx(pos)]):
                break
            run = ac.run[_level_class(pos)].decode(ac_dec)
            z = pos + run
            if z > 63:
                raise FormatError(f"AC run overflows block {b}", ac_dec.offset)
            mag = ac.level[_level_class(z)].decode(ac_dec) + 1
            if mag > limit:
                raise FormatError("AC level out of range", ac_dec.offset)
            zz[b, z] = -mag if ac_dec.decode(ac.sign) else mag
            pos = z + 1
    dc_dec.check_consistent()
    ac_dec.check_consistent()
    natural = np.empty_like(zz)
    natural[:, ZIGZAG] = zz
    idx = natural.reshape(nh, nw, 8, 8)
    return reconstruct(idx, q, h, w)


class InternalDCTCodec:
    """Base-codec slot implementation; id 0 in the container header."""

    codec_id = 0
    name = "internal-dct"

    def encode(self, img: np.ndarray, q: int) -> bytes:
        return encode_base(img, q)

    def decode(self, data: bytes) -> np.ndarray:
        return decode_base(data)


CODECS = {InternalDCTCodec.codec_id: InternalDCTCodec()}


def get_codec(codec_id: int):
    try:
        return CODECS[codec_id]
    except KeyError:
        raise FormatError(f"unknown base codec id {codec_id}") from None


# ------------------------------------------------------------ training proxy


def _block_transform(x: Tensor, m: np.ndarray, op: str) -> Tensor:
    """Apply m @ B @ m.T to every 8x8 block of an N x 1 x H x W tensor."""
    blocks = _to_blocks(x.data)
    out = _from_blocks(m @ blocks @ m.T)

    def backward(g):
        return (_from_blocks(m.T @ _to_blocks(g) @ m),)

    return Tensor._make(np.ascontiguousarray(out), (x,), backward, op)


def simulate_base(img: Tensor, q) -> Tensor:
    """Differentiable stand-in for decode_base(encode_base(img, q)).

    ``img`` is N x 1 x h x w; ``q`` is one quality or one per batch element.
    """
    N, C, h, w = img.shape
    if C != 1:
        raise ValueError("simulate_base expects single-channel input")
    qs = [int(q)] * N if np.isscalar(q) else [int(v) for v in q]
    if len(qs) != N:
        raise ValueError("need one quality per batch element")
    H, W = _padded(h), _padded(w)
    x = ops.pad_symmetric(img, 0, H - h, 0, W - w) if (H, W) != (h, w) else img
    steps = np.stack([np.tile(quant_table(v).astype(np.float64), (H // 8, W // 8)) for v in qs])[:, None]
    coef = _block_transform(x * 255.0 - 128.0, DCT8, "block_dct")
    rq = ops.differentiable_round(coef * Tensor(1.0 / steps)) * Tensor(steps)
    pix = _block_transform(rq, DCT8.T, "block_idct")
    out = (pix + 128.0) * (1.0 / 255.0)
    if (H, W) != (h, w):
        out = ops.crop(out, h, w)
    return ops.clip01(out)
