"""Dual-layer image codec with learned per-pixel Gabor downsampling."""

__version__ = "0.1.0"
