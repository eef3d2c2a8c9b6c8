from __future__ import annotations

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """U(-b, b) with b = sqrt(6 / fan_in), so Var = 2 / fan_in."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ConvLayer:
    """Weights (out, in, kh, kw), bias (out,), zero padding."""

    def __init__(self, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0):
        if weight.data.ndim != 4 or min(weight.shape[2:]) < 1:
            raise ShapeError(f"bad conv weight shape {weight.shape}")
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} outputs")
        if stride < 1 or padding < 0:
            raise ShapeError("stride must be >= 1 and padding >= 0")
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.padding = padding

    @classmethod
    def create(cls, rng: np.random.Generator, in_ch: int, out_ch: int, k: int = 3,
               stride: int = 1, padding: int | None = None, gain: float = 1.0) -> "ConvLayer":
        w = he_uniform(rng, (out_ch, in_ch, k, k), in_ch * k * k) * gain
        pad = (k - 1) // 2 if padding is None else padding
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(out_ch), requires_grad=True), stride, pad)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class TransposedConvLayer(ConvLayer):
    """Stride-2 upsampling layer; weight is (in, out, k, k)."""

    def __init__(self, weight: Tensor, bias: Tensor, stride: int = 2, padding: int = 1):
        if weight.data.ndim != 4:
            raise ShapeError(f"bad transposed conv weight shape {weight.shape}")
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[1]} outputs")
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.padding = padding

    @classmethod
    def create(cls, rng: np.random.Generator, in_ch: int, out_ch: int, k: int = 4,
               stride: int = 2, padding: int | None = None, gain: float = 1.0) -> "TransposedConvLayer":
        # each output sees in_ch * (k/stride)^2 taps
        fan_in = max(1, in_ch * (k // stride) ** 2)
        w = he_uniform(rng, (in_ch, out_ch, k, k), fan_in) * gain
        pad = (k - stride) // 2 if padding is None else padding
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(out_ch), requires_grad=True), stride, pad)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)
