"""Dual-layer encoder/decoder and the .addl container.

Encoding: Gabor-Net -> per-pixel Gabor downsampling -> base codec -> local
base decode -> parameter prediction from the *decoded* base -> quantised
prediction residues under rate control -> container. Decoding mirrors the
receiver half. Both halves share :func:`reconstruct_image`, so an encoder
can produce exactly the image the receiver will see.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .autodiff import Tensor, no_grad
from .base_codec import get_codec
from .errors import FormatError, ModelMismatchError
from .gabor import PARAM_LO, GaborParamMaps, gabor_downsample
from .nets import ADDLModel
from .side_codec import (
    RateControlResult,
    ResidueCode,
    entropy_decode_residues,
    rate_control,
    reconstruct_params,
)

MAGIC = b"ADDL"
VERSION = 1
_HEAD = struct.Struct("<4sBIIBB8s")
CRC_SIZE = 4
PSNR_CAP = 99.0


class Mode(IntEnum):
    FULL = 0
    NO_SIDE_INFO = 1
    NO_PREDICTIVE_CODING = 2
    NO_GSAC = 3

    @classmethod
    def parse(cls, name: "str | Mode | None") -> "Mode":
        if name is None:
            return cls.FULL
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("_", "-")
        aliases = {
            "full": cls.FULL,
            "no-side-info": cls.NO_SIDE_INFO,
            "no-predictive-coding": cls.NO_PREDICTIVE_CODING,
            "no-gsac": cls.NO_GSAC,
        }
        if key not in aliases:
            raise ValueError(f"unknown ablation mode {name!r}; choose from {sorted(aliases)}")
        return aliases[key]

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-")


@dataclass(frozen=True)
class AddlStream:
    width: int
    height: int
    codec_id: int
    mode: int
    model_id: bytes
    base_payload: bytes
    side_payload: bytes
    version: int = VERSION

    def serialize(self) -> bytes:
        if len(self.model_id) != 8:
            raise ValueError("model id must be 8 bytes")
        out = bytearray(_HEAD.pack(MAGIC, self.version, self.width, self.height,
                                   self.codec_id, self.mode, self.model_id))
        out += struct.pack("<I", len(self.base_payload)) + self.base_payload
        out += struct.pack("<I", len(self.side_payload)) + self.side_payload
        out += struct.pack("<I", zlib.crc32(out))
        return bytes(out)

    @classmethod
    def parse(cls, data: bytes) -> "AddlStream":
        data = bytes(data)
        if len(data) < _HEAD.size:
            raise FormatError("stream shorter than the container header", len(data))
        magic, version, w, h, codec_id, mode, mid = _HEAD.unpack_from(data, 0)
        if magic != MAGIC:
            raise FormatError("bad magic, not an ADDL stream", 0)
        if version != VERSION:
            raise FormatError(f"unsupported container version {version}", 4)
        pos = _HEAD.size
        payloads = []
        for name in ("base", "side"):
            if pos + 4 > len(data):
                raise FormatError(f"truncated {name} length prefix", pos)
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + n > len(data):
                raise FormatError(f"{name} payload of {n} bytes overruns stream", pos - 4)
            payloads.append(data[pos : pos + n])
            pos += n
        if pos + CRC_SIZE != len(data):
            raise FormatError(
                f"stream length {len(data)} does not match declared payloads", min(pos, len(data))
            )
        (crc,) = struct.unpack_from("<I", data, pos)
        if zlib.crc32(data[:pos]) != crc:
            raise FormatError("CRC mismatch", pos)
        if mode not in Mode._value2member_map_:
            raise FormatError(f"unknown mode {mode}", 14)
        return cls(w, h, codec_id, mode, mid, payloads[0], payloads[1], version)

    @property
    def header_bits(self) -> int:
        return 8 * (len(self.serialize()) - len(self.base_payload) - len(self.side_payload))

    @property
    def base_bits(self) -> int:
        return 8 * len(self.base_payload)

    @property
    def side_bits(self) -> int:
        return 8 * len(self.side_payload)

    @property
    def total_bits(self) -> int:
        return 8 * len(self.serialize())


@dataclass
class EncodeResult:
    data: bytes
    stream: AddlStream
    params: GaborParamMaps  # I_G
    prediction: GaborParamMaps  # I_G'
    reconstructed_params: GaborParamMaps  # what the decoder will rebuild
    base: np.ndarray  # decoded base layer
    rate: RateControlResult | None
    mode: Mode
    local_decode: np.ndarray | None = None

    @property
    def budget_exceeded(self) -> bool:
        return bool(self.rate and self.rate.budget_exceeded)


@dataclass
class DecodeResult:
    image: np.ndarray
    base: np.ndarray
    prediction: GaborParamMaps
    reconstructed_params: GaborParamMaps
    mode: Mode


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for [0, 1] data; identical inputs report the 99 dB cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def bpp(stream: bytes | AddlStream | int, dims: tuple[int, int]) -> float:
    """Bits per pixel of the original-resolution image; ints are byte counts."""
    if isinstance(stream, AddlStream):
        n = len(stream.serialize())
    elif isinstance(stream, int):
        n = stream
    else:
        n = len(stream)
    h, w = dims
    return 8.0 * n / (h * w)


def _check_image(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D luminance plane, got shape {x.shape}")
    if min(x.shape) < 16:
        raise ValueError(f"image must be at least 16x16, got {x.shape[0]}x{x.shape[1]}")
    if not np.isfinite(x).all() or x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("samples must lie in [0, 1]")
    return x


def pad_even(x: np.ndarray) -> np.ndarray:
    h, w = x.shape
    return np.pad(x, ((0, h % 2), (0, w % 2)), mode="symmetric")


def analyze(model: ADDLModel, x: np.ndarray) -> tuple[GaborParamMaps, np.ndarray]:
    """I_G and the Gabor-downsampled plane Y for an even-sized image."""
    with no_grad():
        t = Tensor(x[None, None])
        p = model.gabor_net(t)
        y = gabor_downsample(t, p, model.kernel_support)
    return GaborParamMaps(p.data[0]), y.data[0, 0]


def predict_params(model: ADDLModel, yhat: np.ndarray) -> GaborParamMaps:
    with no_grad():
        p = model.predict_net(Tensor(yhat[None, None]))
    return GaborParamMaps(p.data[0])


def upsample(model: ADDLModel, yhat: np.ndarray, params: GaborParamMaps, unit_modulation: bool = False) -> np.ndarray:
    with no_grad():
        out = model.upsampler(Tensor(yhat[None, None]), Tensor(params.data[None]), unit_modulation)
    return out.data[0, 0]


def _direct_reference(shape: tuple[int, int]) -> GaborParamMaps:
    """Fixed 'prediction' used when predictive coding is disabled."""
    return GaborParamMaps(np.broadcast_to(PARAM_LO[:, None, None], (5,) + shape).copy())


def side_reference(mode: Mode, prediction: GaborParamMaps) -> GaborParamMaps:
    return _direct_reference(prediction.shape) if mode == Mode.NO_PREDICTIVE_CODING else prediction


def reconstruct_image(model: ADDLModel, yhat: np.ndarray, prediction: GaborParamMaps,
                      code: ResidueCode | None, mode: Mode) -> tuple[np.ndarray, GaborParamMaps]:
    """Receiver half shared by encoder and decoder: Î_G and the upsampled image."""
    if mode == Mode.NO_SIDE_INFO or code is None:
        params = prediction
    else:
        params = reconstruct_params(side_reference(mode, prediction), code)
    return upsample(model, yhat, params, unit_modulation=(mode == Mode.NO_GSAC)), params


def encode(x: np.ndarray, q: int, model: ADDLModel, budget_ratio: float = 0.20,
           mode: "Mode | str" = Mode.FULL, codec_id: int = 0, local_decode: bool = False) -> EncodeResult:
    mode = Mode.parse(mode)
    x = _check_image(x)
    H, W = x.shape
    xe = pad_even(x)
    codec = get_codec(codec_id)
    params, y = analyze(model, xe)
    base_payload = codec.encode(y, q)
    yhat = codec.decode(base_payload)
    prediction = predict_params(model, yhat)
    rate = None
    code = None
    side_payload = b""
    if mode != Mode.NO_SIDE_INFO:
        reference = side_reference(mode, prediction)
        rate = rate_control(params, reference, 8 * len(base_payload), budget_ratio,
                            wrap=(mode != Mode.NO_PREDICTIVE_CODING))
        code = rate.code
        side_payload = rate.payload
    stream = AddlStream(W, H, codec_id, int(mode), model.model_id(), base_payload, side_payload)
    data = stream.serialize()
    local = None
    if local_decode:
        img, rebuilt = reconstruct_image(model, yhat, prediction, code, mode)
        local = img[:H, :W]
    elif code is not None:
        rebuilt = reconstruct_params(side_reference(mode, prediction), code)
    else:
        rebuilt = prediction
    return EncodeResult(data, stream, params, prediction, rebuilt, yhat, rate, mode, local)


def decode(data: "bytes | AddlStream", model: ADDLModel) -> DecodeResult:
    stream = data if isinstance(data, AddlStream) else AddlStream.parse(data)
    if stream.model_id != model.model_id():
        raise ModelMismatchError(
            f"stream was encoded with model {stream.model_id.hex()}, loaded model is {model.model_id().hex()}"
        )
    mode = Mode(stream.mode)
    H, W = stream.height, stream.width
    He, We = H + H % 2, W + W % 2
    yhat = get_codec(stream.codec_id).decode(stream.base_payload)
    if yhat.shape != (He // 2, We // 2):
        raise FormatError(f"base layer {yhat.shape} does not match container dims {W}x{H}")
    prediction = predict_params(model, yhat)
    code = None
    if mode != Mode.NO_SIDE_INFO:
        if not stream.side_payload:
            raise FormatError("mode requires side information but the side payload is empty")
        code = entropy_decode_residues(stream.side_payload, *yhat.shape)
    elif stream.side_payload:
        raise FormatError("side payload present in no-side-info mode")
    img, params = reconstruct_image(model, yhat, prediction, code, mode)
    return DecodeResult(img[:H, :W], yhat, prediction, params, mode)


@dataclass
class SyncReport:
    model_id_match: bool
    prediction_match: bool
    params_match: bool
    image_match: bool
    details: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.model_id_match and self.prediction_match and self.params_match and self.image_match


def sync_check(x: np.ndarray, q: int, model: ADDLModel, receiver: ADDLModel | None = None,
               mode: "Mode | str" = Mode.FULL) -> SyncReport:
    """Compare encoder-side and receiver-side predictions, Î_G and X̂ bit for bit.

    ``receiver`` defaults to ``model``; pass a different model to emulate a
    decoder whose weights drifted. The receiver run skips the model-id guard
    so the numerical divergence itself can be measured.
    """
    receiver = receiver or model
    enc = encode(x, q, model, mode=mode, local_decode=True)
    stream = AddlStream.parse(enc.data)
    mode_ = Mode(stream.mode)
    yhat = get_codec(stream.codec_id).decode(stream.base_payload)
    prediction = predict_params(receiver, yhat)
    code = entropy_decode_residues(stream.side_payload, *yhat.shape) if stream.side_payload else None
    img, params = reconstruct_image(receiver, yhat, prediction, code, mode_)
    img = img[: stream.height, : stream.width]
    return SyncReport(
        model_id_match=receiver.model_id() == stream.model_id,
        prediction_match=prediction.data.tobytes() == enc.prediction.data.tobytes(),
        params_match=params.data.tobytes() == enc.reconstructed_params.data.tobytes(),
        image_match=img.tobytes() == enc.local_decode.tobytes(),
        details={
            "max_prediction_diff": float(np.abs(prediction.data - enc.prediction.data).max()),
            "max_image_diff": float(np.abs(img - enc.local_decode).max()),
        },
    )
