"""Predictive coding of the Gabor parameter maps.

The encoder sends ``Q[I_G - I_G']`` where ``I_G'`` is the prediction the
decoder can reproduce from the decoded base layer. Quantisers are uniform per
channel; steps travel as u16 codes in units of ``range / 65535``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .entropy import Context, RangeDecoder, RangeEncoder, UIntModel
from .errors import FormatError
from .gabor import PARAM_HI, PARAM_LO, PARAM_RANGE, GaborParamMaps

CODE_UNIT = PARAM_RANGE / 65535.0
DEFAULT_CODE = 65535.0 / 64.0  # default step = range / 64
SCALE_LOG2_MIN = -6.0
SCALE_LOG2_MAX = 6.0
SEARCH_ITERS = 12
SIDE_HEADER = struct.Struct("<5HB")
FLAG_BUDGET_EXCEEDED = 0x01
THETA = 1

_HI_EXCL = PARAM_HI.copy()
_HI_EXCL[1] = np.nextafter(math.pi, 0.0)
_HI_EXCL[2] = np.nextafter(math.pi, 0.0)
_LO_EXCL = PARAM_LO.copy()
_LO_EXCL[4] = np.finfo(float).tiny


@dataclass(frozen=True)
class QuantizerSpec:
    codes: tuple[int, int, int, int, int]

    def __post_init__(self):
        if len(self.codes) != 5 or any(not 1 <= int(c) <= 0xFFFF for c in self.codes):
            raise ValueError(f"step codes must be five values in 1..65535, got {self.codes}")

    @property
    def steps(self) -> np.ndarray:
        return np.array(self.codes, dtype=np.float64) * CODE_UNIT

    @classmethod
    def from_scale(cls, scale: float) -> "QuantizerSpec":
        code = int(min(max(round(scale * DEFAULT_CODE), 1), 0xFFFF))
        return cls((code,) * 5)

    @classmethod
    def default(cls) -> "QuantizerSpec":
        return cls.from_scale(1.0)


@dataclass
class ResidueCode:
    indices: np.ndarray  # int64, 5 x h x w
    spec: QuantizerSpec
    budget_exceeded: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.indices.shape[1], self.indices.shape[2]

    def dequantized(self) -> np.ndarray:
        return self.indices * self.spec.steps[:, None, None]


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def wrap_theta(d):
    """Fold an orientation difference into (-pi/2, pi/2]."""
    return d - np.pi * np.ceil(d / np.pi - 0.5)


def residue(target: GaborParamMaps, pred: GaborParamMaps, wrap: bool = True) -> np.ndarray:
    if target.data.shape != pred.data.shape:
        raise ValueError(f"map shapes differ: {target.data.shape} vs {pred.data.shape}")
    r = target.data - pred.data
    if wrap:
        r[THETA] = wrap_theta(r[THETA])
    return r


def quantize_residue(target: GaborParamMaps, pred: GaborParamMaps, spec: QuantizerSpec,
                     wrap: bool = True) -> ResidueCode:
    r = residue(target, pred, wrap)
    idx = round_half_away(r / spec.steps[:, None, None]).astype(np.int64)
    return ResidueCode(idx, spec)


def reconstruct_params(pred: GaborParamMaps, code: ResidueCode) -> GaborParamMaps:
    """I_G' + dequantized residues, folded/clamped back into the legal ranges."""
    if pred.shape != code.shape:
        raise ValueError(f"prediction {pred.shape} vs residues {code.shape}")
    out = pred.data + code.dequantized()
    out[THETA] = np.mod(out[THETA], np.pi)
    out = np.clip(out, _LO_EXCL[:, None, None], _HI_EXCL[:, None, None])
    return GaborParamMaps(out)


def param_error(a: GaborParamMaps, b: GaborParamMaps) -> np.ndarray:
    """Per-channel max abs difference; theta measured modulo pi."""
    d = a.data - b.data
    d[THETA] = wrap_theta(d[THETA])
    return np.abs(d).reshape(5, -1).max(axis=1)


# ------------------------------------------------------------ entropy coding


class _ChannelModel:
    def __init__(self):
        self.zero = [Context() for _ in range(3)]
        self.sign = Context()
        self.mag = UIntModel(12)


def _code_plane(coder, models: _ChannelModel, plane: np.ndarray | None, h: int, w: int, decode: bool):
    out = np.zeros((h, w), dtype=np.int64) if decode else plane
    rows = out.tolist() if not decode else [[0] * w for _ in range(h)]
    for i in range(h):
        up = rows[i - 1] if i else None
        row = rows[i]
        for j in range(w):
            ctx = (1 if j and row[j - 1] else 0) + (1 if up is not None and up[j] else 0)
            if decode:
                if coder.decode(models.zero[ctx]):
                    continue
                neg = coder.decode(models.sign)
                m = models.mag.decode(coder) + 1
                if m > 1 << 24:
                    raise FormatError("residue magnitude out of range", coder.offset)
                row[j] = -m if neg else m
            else:
                v = row[j]
                coder.encode(1 if v == 0 else 0, models.zero[ctx])
                if v:
                    coder.encode(1 if v < 0 else 0, models.sign)
                    models.mag.encode(coder, abs(v) - 1)
    if decode:
        return np.array(rows, dtype=np.int64).reshape(h, w)
    return None


def encode_indices(indices: np.ndarray) -> bytes:
    enc = RangeEncoder()
    _, h, w = indices.shape
    for c in range(5):
        _code_plane(enc, _ChannelModel(), indices[c], h, w, decode=False)
    return enc.finish()


def decode_indices(data: bytes, h: int, w: int, offset: int = 0) -> np.ndarray:
    dec = RangeDecoder(data, offset)
    planes = [_code_plane(dec, _ChannelModel(), None, h, w, decode=True) for _ in range(5)]
    dec.check_consistent()
    return np.stack(planes)


def entropy_encode_residues(code: ResidueCode) -> bytes:
    """Side payload: 5 x u16 step codes | flags u8 | u32 length | coder stream."""
    stream = encode_indices(code.indices)
    flags = FLAG_BUDGET_EXCEEDED if code.budget_exceeded else 0
    return SIDE_HEADER.pack(*code.spec.codes, flags) + struct.pack("<I", len(stream)) + stream


def entropy_decode_residues(data: bytes, h: int, w: int, base_offset: int = 0) -> ResidueCode:
    need = SIDE_HEADER.size + 4
    if len(data) < need:
        raise FormatError("side payload shorter than its header", base_offset + len(data))
    *codes, flags = SIDE_HEADER.unpack_from(data, 0)
    if flags & ~FLAG_BUDGET_EXCEEDED:
        raise FormatError(f"unknown side flags {flags:#x}", base_offset + 10)
    if any(c == 0 for c in codes):
        raise FormatError("zero quantizer step code", base_offset)
    (n,) = struct.unpack_from("<I", data, SIDE_HEADER.size)
    if need + n != len(data):
        raise FormatError(f"side stream length {n} does not match payload", base_offset + SIDE_HEADER.size)
    idx = decode_indices(data[need:], h, w, base_offset + need)
    return ResidueCode(idx, QuantizerSpec(tuple(codes)), bool(flags & FLAG_BUDGET_EXCEEDED))


# ------------------------------------------------------------ rate control


@dataclass
class RateControlResult:
    spec: QuantizerSpec
    code: ResidueCode
    payload: bytes
    scale_log2: float
    budget_bits: float
    budget_exceeded: bool
    evaluations: list[tuple[float, int]] = field(default_factory=list)

    @property
    def side_bits(self) -> int:
        return 8 * len(self.payload)

    @property
    def monotone_violations(self) -> int:
        pts = sorted(self.evaluations)
        return sum(1 for (_, a), (_, b) in zip(pts, pts[1:]) if b > a)


def rate_control(target: GaborParamMaps, pred: GaborParamMaps, base_bits: int,
                 budget_ratio: float = 0.20, wrap: bool = True) -> RateControlResult:
    """Finest uniform quantizer whose side payload fits ``budget_ratio * base_bits``.

    Binary search on log2 of the global scale over [-6, 6]; if the coarsest
    quantizer is still over budget it is returned with the exceeded flag set.
    """
    if base_bits <= 0:
        raise ValueError("base_bits must be positive")
    budget = budget_ratio * base_bits
    r = residue(target, pred, wrap)
    evaluations: list[tuple[float, int]] = []
    cache: dict[tuple, tuple[ResidueCode, bytes]] = {}

    def evaluate(e: float, flagged: bool = False):
        spec = QuantizerSpec.from_scale(2.0**e)
        key = (spec.codes, flagged)
        if key not in cache:
            idx = round_half_away(r / spec.steps[:, None, None]).astype(np.int64)
            code = ResidueCode(idx, spec, flagged)
            cache[key] = (code, entropy_encode_residues(code))
        code, payload = cache[key]
        evaluations.append((e, 8 * len(payload)))
        return code, payload

    code, payload = evaluate(SCALE_LOG2_MIN)
    if 8 * len(payload) <= budget:
        return RateControlResult(code.spec, code, payload, SCALE_LOG2_MIN, budget, False, evaluations)
    code, payload = evaluate(SCALE_LOG2_MAX)
    if 8 * len(payload) > budget:
        code, payload = evaluate(SCALE_LOG2_MAX, flagged=True)
        evaluations.pop()
        return RateControlResult(code.spec, code, payload, SCALE_LOG2_MAX, budget, True, evaluations)
    lo, hi = SCALE_LOG2_MIN, SCALE_LOG2_MAX
    best = (code, payload)
    for _ in range(SEARCH_ITERS):
        mid = 0.5 * (lo + hi)
        c, p = evaluate(mid)
        if 8 * len(p) <= budget:
            hi, best = mid, (c, p)
        else:
            lo = mid
    code, payload = best
    return RateControlResult(code.spec, code, payload, hi, budget, False, evaluations)
