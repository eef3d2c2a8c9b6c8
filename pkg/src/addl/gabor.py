"""Gabor filter evaluation, kernel synthesis and per-pixel factor-2 downsampling.

A Gabor filter is a Gaussian envelope modulated by a cosine along the rotated
axis ``x'``::

    G(x, y) = exp(-(x'^2 + gamma^2 y'^2) / (2 sigma^2)) * cos(2 pi x' / lambda + psi)
    x' =  x cos(theta) + y sin(theta)
    y' = -x sin(theta) + y cos(theta)

Coordinates are in pixels; ``x`` runs along columns and ``y`` along rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor
from .autodiff.ops import clip01

PARAM_NAMES = ("lambda", "theta", "psi", "sigma", "gamma")
PARAM_LO = np.array([2.0, 0.0, -math.pi, 0.5, 0.0])
PARAM_HI = np.array([16.0, math.pi, math.pi, 4.0, 1.0])
PARAM_RANGE = PARAM_HI - PARAM_LO
PARAM_MID = 0.5 * (PARAM_LO + PARAM_HI)

DEFAULT_K = 6
FALLBACK_EPS = 1e-6


class ParamValidationError(ValueError):
    pass


@dataclass(frozen=True)
class GaborParams:
    lam: float
    theta: float
    psi: float
    sigma: float
    gamma: float

    def validate(self) -> "GaborParams":
        checks = (
            (2.0 <= self.lam <= 16.0, "lambda", self.lam, "[2, 16]"),
            (0.0 <= self.theta < math.pi, "theta", self.theta, "[0, pi)"),
            (-math.pi <= self.psi < math.pi, "psi", self.psi, "[-pi, pi)"),
            (0.5 <= self.sigma <= 4.0, "sigma", self.sigma, "[0.5, 4]"),
            (0.0 < self.gamma <= 1.0, "gamma", self.gamma, "(0, 1]"),
        )
        for ok, name, value, rng in checks:
            if not (ok and math.isfinite(value)):
                raise ParamValidationError(f"{name}={value!r} outside {rng}")
        return self

    def canonical(self) -> "GaborParams":
        """Fold theta into [0, pi) using G(theta + pi, psi) = G(theta, -psi)."""
        turns = math.floor(self.theta / math.pi)
        theta = self.theta - turns * math.pi
        psi = -self.psi if turns % 2 else self.psi
        # rounding in the subtraction can land just outside [0, pi)
        if theta < 0.0:
            theta += math.pi
            psi = -psi
        if theta >= math.pi:
            theta = 0.0
            psi = -psi
        psi = (psi + math.pi) % (2 * math.pi) - math.pi
        return GaborParams(self.lam, theta, psi, self.sigma, self.gamma)

    def as_array(self) -> np.ndarray:
        return np.array([self.lam, self.theta, self.psi, self.sigma, self.gamma])


def gabor_raw(x, y, lam, theta, psi, sigma, gamma):
    """Vectorised filter value with no range checks."""
    c = np.cos(theta)
    s = np.sin(theta)
    xp = x * c + y * s
    yp = -x * s + y * c
    env = np.exp(-(xp * xp + gamma * gamma * yp * yp) / (2.0 * sigma * sigma))
    return env * np.cos(2.0 * np.pi * xp / lam + psi)


def gabor_value(x: float, y: float, p: GaborParams) -> float:
    p.validate()
    return float(gabor_raw(x, y, p.lam, p.theta, p.psi, p.sigma, p.gamma))


def lattice_offsets(K: int) -> np.ndarray:
    """Tap offsets from the output sample site, e.g. -2.5 .. 2.5 for K=6."""
    if K < 2 or K % 2:
        raise ValueError(f"kernel support must be even and >= 2, got {K}")
    return np.arange(K) - (K - 1) / 2.0


@dataclass(frozen=True)
class Kernel:
    taps: np.ndarray  # K x K, rows = y offsets
    fallback: bool

    @property
    def size(self) -> int:
        return self.taps.shape[0]

    def anchor(self, i: int, j: int) -> tuple[int, int]:
        """Top-left input pixel of the window producing output (i, j)."""
        K = self.size
        return 2 * i - K // 2 + 1, 2 * j - K // 2 + 1


def synth_kernel(p: GaborParams, K: int = DEFAULT_K) -> Kernel:
    p.validate()
    taps, fb = _taps(
        *(np.array([[v]]) for v in p.as_array()), lattice_offsets(K)
    )[:2]
    return Kernel(taps[0, 0], bool(fb[0, 0]))


# ------------------------------------------------------------ batched kernels


def _taps(lam, theta, psi, sigma, gamma, d):
    """Per-pixel normalised taps of shape (..., K, K) plus backward intermediates.

    Parameter arrays share a leading shape; ``d`` holds the K lattice offsets.
    """
    # extended precision: normalising near-zero-sum kernels amplifies rounding
    L = np.longdouble
    ex = np.asarray(lam, dtype=L)[..., None, None]
    th = np.asarray(theta, dtype=L)[..., None, None]
    ps = np.asarray(psi, dtype=L)[..., None, None]
    sg = np.asarray(sigma, dtype=L)[..., None, None]
    gm = np.asarray(gamma, dtype=L)[..., None, None]
    d = np.asarray(d, dtype=L)
    xs = d[None, :]  # columns
    ys = d[:, None]  # rows
    c = np.cos(th)
    s = np.sin(th)
    xp = xs * c + ys * s
    yp = -xs * s + ys * c
    q = xp * xp + gm * gm * yp * yp
    env = np.exp(-q / (2.0 * sg * sg))
    phase = 2 * L("3.14159265358979323846264338327950288") * xp / ex + ps
    cosph = np.cos(phase)
    raw = env * cosph
    total = raw.sum(axis=(-2, -1))
    fallback = np.abs(total) < FALLBACK_EPS
    if fallback.any():
        fb = fallback[..., None, None]
        raw = np.where(fb, env, raw)
        total = np.where(fallback, env.sum(axis=(-2, -1)), total)
        cosph = np.where(fb, 1.0, cosph)
        sinph = np.where(fb, 0.0, np.sin(phase))
    else:
        sinph = np.sin(phase)
    taps = (raw / total[..., None, None]).astype(np.float64)
    f = np.float64
    inter = dict(xp=xp.astype(f), yp=yp.astype(f), q=q.astype(f), env=env.astype(f),
                 sinph=sinph.astype(f), raw=raw.astype(f), total=total.astype(f),
                 lam=ex.astype(f), sigma=sg.astype(f), gamma=gm.astype(f))
    return taps, fallback, inter


def _taps_backward(dtaps, taps, inter):
    """Map d(loss)/d(taps) to d(loss)/d(params), each shaped like the parameter maps."""
    total = inter["total"][..., None, None]
    inner = (dtaps * taps).sum(axis=(-2, -1))[..., None, None]
    draw = (dtaps - inner) / total
    xp, yp, raw = inter["xp"], inter["yp"], inter["raw"]
    env, sinph = inter["env"], inter["sinph"]
    lam, sg, gm = inter["lam"], inter["sigma"], inter["gamma"]
    es = env * sinph
    two_pi = 2.0 * np.pi
    d_psi = -es
    d_lam = es * two_pi * xp / (lam * lam)
    d_sigma = raw * inter["q"] / (sg * sg * sg)
    d_gamma = -raw * gm * yp * yp / (sg * sg)
    d_theta = -raw * xp * yp * (1.0 - gm * gm) / (sg * sg) - es * two_pi * yp / lam
    return [(draw * d).sum(axis=(-2, -1)) for d in (d_lam, d_theta, d_psi, d_sigma, d_gamma)]


def _windows(img: np.ndarray, K: int) -> np.ndarray:
    """(..., H, W) -> (..., H/2, W/2, K, K) symmetric-padded stride-2 windows."""
    pad = K // 2 - 1
    widths = [(0, 0)] * (img.ndim - 2) + [(pad, pad), (pad, pad)]
    xp = np.pad(img, widths, mode="symmetric")
    return sliding_window_view(xp, (K, K), axis=(-2, -1))[..., ::2, ::2, :, :]


def _window_adjoint(dwin: np.ndarray, shape: tuple[int, ...], K: int) -> np.ndarray:
    """Transpose of :func:`_windows`: scatter window gradients back to the image."""
    pad = K // 2 - 1
    H, W = shape[-2:]
    h, w = H // 2, W // 2
    acc = np.zeros(shape[:-2] + (H + 2 * pad, W + 2 * pad))
    for a in range(K):
        for b in range(K):
            acc[..., a : a + 2 * h : 2, b : b + 2 * w : 2] += dwin[..., a, b]
    # fold the symmetric padding back onto its source pixels
    rows = np.arange(-pad, H + pad)
    rows = np.where(rows < 0, -rows - 1, np.where(rows >= H, 2 * H - 1 - rows, rows))
    cols = np.arange(-pad, W + pad)
    cols = np.where(cols < 0, -cols - 1, np.where(cols >= W, 2 * W - 1 - cols, cols))
    tmp = np.zeros(shape[:-2] + (H, W + 2 * pad))
    np.add.at(tmp, (..., rows, slice(None)), acc)
    out = np.zeros(shape)
    np.add.at(out, (..., slice(None), cols), tmp)
    return out


def _check_dims(H: int, W: int, h: int, w: int, K: int) -> None:
    if H % 2 or W % 2 or H != 2 * h or W != 2 * w:
        raise ValueError(f"image {H}x{W} must be exactly twice the parameter maps {h}x{w}")
    if K // 2 - 1 > min(H, W):
        raise ValueError(f"image {H}x{W} too small for kernel support {K}")


def gabor_downsample(x: Tensor, params: Tensor, K: int = DEFAULT_K) -> Tensor:
    """Differentiable per-pixel Gabor downsampling, N x 1 x H x W -> N x 1 x H/2 x W/2.

    ``params`` is N x 5 x H/2 x W/2 in (lambda, theta, psi, sigma, gamma)
    order. The result is clamped to [0, 1].
    """
    N, C, H, W = x.shape
    if C != 1 or params.shape[:2] != (N, 5):
        raise ValueError(f"expected N x 1 x H x W image and N x 5 maps, got {x.shape}, {params.shape}")
    h, w = params.shape[2:]
    _check_dims(H, W, h, w, K)
    d = lattice_offsets(K)
    pm = params.data
    taps, _, inter = _taps(pm[:, 0], pm[:, 1], pm[:, 2], pm[:, 3], pm[:, 4], d)
    win = _windows(x.data[:, 0], K)
    out = (taps * win).sum(axis=(-2, -1))[:, None]

    def backward(g):
        g0 = g[:, 0][..., None, None]
        gx = _window_adjoint(g0 * taps, (N, H, W), K)[:, None] if x.requires_grad else None
        gp = None
        if params.requires_grad:
            gp = np.stack(_taps_backward(g0 * win, taps, inter), axis=1)
        return gx, gp

    return clip01(Tensor._make(out, (x, params), backward, "gabor_downsample"))


@dataclass
class GaborParamMaps:
    """Five (H/2) x (W/2) planes stacked as a 5 x h x w array."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[0] != 5:
            raise ValueError(f"parameter maps must be 5 x h x w, got {self.data.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    def plane(self, name: str) -> np.ndarray:
        return self.data[PARAM_NAMES.index(name)]

    def in_range(self) -> bool:
        d = self.data
        lo = PARAM_LO[:, None, None]
        hi = PARAM_HI[:, None, None]
        ok = (d >= lo) & (d <= hi)
        ok[1] &= d[1] < np.pi
        ok[2] &= d[2] < np.pi
        ok[4] &= d[4] > 0
        return bool(ok.all()) and bool(np.isfinite(d).all())

    def validate(self) -> "GaborParamMaps":
        if not self.in_range():
            raise ParamValidationError("parameter maps contain out-of-range values")
        return self

    @classmethod
    def constant(cls, p: GaborParams, h: int, w: int) -> "GaborParamMaps":
        return cls(np.broadcast_to(p.as_array()[:, None, None], (5, h, w)).copy())


def downsample(img: np.ndarray, maps: GaborParamMaps, K: int = DEFAULT_K) -> np.ndarray:
    """Numpy entry point sharing the forward path of :func:`gabor_downsample`."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D plane, got shape {img.shape}")
    maps.validate()
    out = gabor_downsample(Tensor(img[None, None]), Tensor(maps.data[None]), K)
    return out.data[0, 0]
