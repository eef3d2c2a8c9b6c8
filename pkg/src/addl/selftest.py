"""Oracle and gradient suites shared by the test-suite and ``addl selftest``."""

from __future__ import annotations

import math
import time
import zlib
from dataclasses import dataclass
from typing import Callable

import mpmath
import numpy as np

from .autodiff import Tensor, grad_check, ops
from .base_codec import DCT8, _block_transform, quant_table, simulate_base
from .gabor import (
    PARAM_LO,
    PARAM_RANGE,
    GaborParams,
    _taps,
    gabor_downsample,
    lattice_offsets,
    synth_kernel,
)
from .nets import GsacLayer, gsac_forward, param_activation, param_features

GRAD_H = 1e-5
GRAD_TOL = 1e-4


def away_from(x: np.ndarray, kinks, margin: float = 1e-3) -> np.ndarray:
    """Nudge samples off non-differentiable points so central differences stay valid."""
    x = np.array(x, dtype=np.float64)
    for k in kinks:
        near = np.abs(x - k) < margin
        x[near] = k + np.where(x[near] >= k, margin, -margin) * 2
    return x


def random_maps(rng: np.random.Generator, n: int, h: int, w: int, margin: float = 0.1) -> np.ndarray:
    lo = (PARAM_LO + margin * PARAM_RANGE)[None, :, None, None]
    span = ((1 - 2 * margin) * PARAM_RANGE)[None, :, None, None]
    return lo + span * rng.random((n, 5, h, w))


def _unit_gsac(rng):
    while True:
        layer = GsacLayer(rng, 3, 4)
        x = rng.standard_normal((1, 3, 4, 4))
        p = param_features(Tensor(random_maps(rng, 1, 4, 4))).data
        ws = [layer.ext1.weight.data, rng.standard_normal(4) * 0.1, layer.ext2.weight.data,
              layer.ext2.bias.data + rng.standard_normal(3) * 0.1, layer.conv.weight.data, rng.standard_normal(3)]
        # keep the extractor's relu inputs away from the kink
        pre = np.einsum("oc,nchw->nohw", ws[0][:, :, 0, 0], p) + ws[1][None, :, None, None]
        if np.abs(pre).min() > 1e-3:
            break

    def fn(x, p, w1, b1, w2, b2, w3, b3):
        layer.ext1.weight, layer.ext1.bias = w1, b1
        layer.ext2.weight, layer.ext2.bias = w2, b2
        layer.conv.weight, layer.conv.bias = w3, b3
        return gsac_forward(x, p, layer)

    return fn, [x, p] + ws


def _relu_input(rng, shape):
    return away_from(rng.standard_normal(shape), [0.0])


GRAD_CASES: dict[str, Callable[[np.random.Generator], tuple[Callable, list[np.ndarray]]]] = {
    "add": lambda r: (lambda a, b: a + b, [r.standard_normal((2, 3, 4, 4)), r.standard_normal((1, 3, 1, 1))]),
    "sub": lambda r: (lambda a, b: a - b, [r.standard_normal((2, 3)), r.standard_normal(3)]),
    "mul": lambda r: (lambda a, b: a * b, [r.standard_normal((2, 3, 4, 4)), r.standard_normal((1, 3, 1, 4))]),
    "neg": lambda r: (lambda a: -a, [r.standard_normal((3, 4))]),
    "relu": lambda r: (ops.relu, [_relu_input(r, (2, 3, 4))]),
    "sigmoid": lambda r: (ops.sigmoid, [3 * r.standard_normal((2, 3, 4))]),
    "clip01": lambda r: (ops.clip01, [away_from(r.uniform(-0.5, 1.5, (3, 5)), [0.0, 1.0])]),
    "cos": lambda r: (ops.cos, [3 * r.standard_normal((3, 4))]),
    "sin": lambda r: (ops.sin, [3 * r.standard_normal((3, 4))]),
    "select_channels": lambda r: (lambda x: ops.select_channels(x, [2, 0, 2]), [r.standard_normal((2, 3, 2, 2))]),
    "differentiable_round": lambda r: (
        ops.differentiable_round,
        [away_from(r.uniform(-3, 3, (4, 5)), np.arange(-3.5, 4.0, 1.0))],
    ),
    "sum_all": lambda r: (ops.sum_all, [r.standard_normal((2, 3, 4))]),
    "mean_all": lambda r: (ops.mean_all, [r.standard_normal((2, 3, 4))]),
    "l1_loss": lambda r: _l1_case(r),
    "reshape": lambda r: (lambda x: ops.reshape(x, (4, 6)), [r.standard_normal((2, 3, 4))]),
    "concat_channels": lambda r: (ops.concat_channels, [r.standard_normal((2, 2, 3, 3)), r.standard_normal((2, 3, 3, 3))]),
    "pad_symmetric": lambda r: (lambda x: ops.pad_symmetric(x, 1, 2, 2, 1), [r.standard_normal((1, 2, 4, 5))]),
    "crop": lambda r: (lambda x: ops.crop(x, 3, 2), [r.standard_normal((1, 2, 4, 5))]),
    "resize_nearest": lambda r: (lambda x: ops.resize_nearest(x, 6, 4), [r.standard_normal((1, 2, 3, 2))]),
    "conv2d_3x3": lambda r: (
        lambda x, w, b: ops.conv2d(x, w, b, 1, 1),
        [r.standard_normal((2, 2, 5, 5)), r.standard_normal((3, 2, 3, 3)), r.standard_normal(3)],
    ),
    "conv2d_4x4_stride2": lambda r: (
        lambda x, w, b: ops.conv2d(x, w, b, 2, 1),
        [r.standard_normal((1, 2, 6, 6)), r.standard_normal((3, 2, 4, 4)), r.standard_normal(3)],
    ),
    "conv2d_1x1": lambda r: (
        lambda x, w: ops.conv2d(x, w, None, 1, 0),
        [r.standard_normal((2, 3, 3, 3)), r.standard_normal((2, 3, 1, 1))],
    ),
    "conv_transpose2d": lambda r: (
        lambda x, w, b: ops.conv_transpose2d(x, w, b, 2, 1),
        [r.standard_normal((1, 2, 3, 3)), r.standard_normal((2, 3, 4, 4)), r.standard_normal(3)],
    ),
    "maxpool2": lambda r: (ops.maxpool2, [r.permutation(64).reshape(1, 1, 8, 8) * 0.1 + r.random((1, 1, 8, 8)) * 0.01]),
    "bilinear_up2": lambda r: (ops.bilinear_up2, [r.standard_normal((1, 2, 3, 4))]),
    "straight_through": lambda r: (lambda x: ops.straight_through(x, x.data), [r.standard_normal((3, 3))]),
    "block_dct": lambda r: (lambda x: _block_transform(x, DCT8, "block_dct"), [r.standard_normal((1, 1, 8, 16))]),
    "simulate_base": lambda r: _simulate_case(r),
    "gabor_downsample": lambda r: (
        lambda x, p: gabor_downsample(x, p, 6),
        [r.uniform(0.3, 0.7, (1, 1, 8, 8)), random_maps(r, 1, 4, 4)],
    ),
    "param_activation": lambda r: (param_activation, [r.standard_normal((1, 5, 2, 3))]),
    "param_features": lambda r: (param_features, [random_maps(r, 1, 2, 3)]),
    "gsac_layer": _unit_gsac,
}


def _l1_case(r):
    a = r.standard_normal((3, 4))
    d = away_from(r.standard_normal((3, 4)), [0.0])
    return ops.l1_loss, [a, a - d]


def _simulate_case(r):
    # grey levels whose DCT coefficients avoid the rounding discontinuities at q=50
    while True:
        x = r.uniform(0.3, 0.7, (1, 1, 8, 8))
        coef = DCT8 @ (x[0, 0] * 255 - 128) @ DCT8.T / quant_table(50)
        frac = np.abs(coef - np.floor(coef) - 0.5)
        if frac.min() > 1e-3:
            return (lambda t: simulate_base(t, 50)), [x]


@dataclass
class SuiteResult:
    name: str
    max_error: float
    passed: bool
    seconds: float
    detail: str = ""


def run_grad_suite(instances: int = 20, seed: int = 0, names=None) -> list[SuiteResult]:
    out = []
    for name in names or GRAD_CASES:
        t0 = time.perf_counter()
        worst = 0.0
        for i in range(instances):
            rng = np.random.default_rng([seed, i, zlib_hash(name)])
            fn, inputs = GRAD_CASES[name](rng)
            rep = grad_check(fn, inputs, h=GRAD_H, tol=GRAD_TOL, seed=i)
            worst = max(worst, rep.max_rel_error)
        out.append(SuiteResult(name, worst, worst <= GRAD_TOL, time.perf_counter() - t0, f"{instances} instances"))
    return out


def zlib_hash(s: str) -> int:
    return zlib.crc32(s.encode())


# ------------------------------------------------------------ Gabor oracle


def random_params(rng: np.random.Generator) -> GaborParams:
    return GaborParams(
        lam=rng.uniform(2.0, 16.0),
        theta=rng.uniform(0.0, math.pi),
        psi=rng.uniform(-math.pi, math.pi),
        sigma=rng.uniform(0.5, 4.0),
        gamma=rng.uniform(1e-3, 1.0),
    )


def direct_taps(p: GaborParams, K: int = 6, digits: int = 40) -> np.ndarray:
    """High-precision scalar evaluation of the filter on the lattice, then DC normalization."""
    with mpmath.workdps(digits):
        th, lam, psi = mpmath.mpf(p.theta), mpmath.mpf(p.lam), mpmath.mpf(p.psi)
        sg, gm = mpmath.mpf(p.sigma), mpmath.mpf(p.gamma)
        c, s = mpmath.cos(th), mpmath.sin(th)
        env, raw = [], []
        for y in lattice_offsets(K):
            for x in lattice_offsets(K):
                x, y = mpmath.mpf(float(x)), mpmath.mpf(float(y))
                xr = x * c + y * s
                yr = -x * s + y * c
                e = mpmath.exp(-(xr**2 + gm**2 * yr**2) / (2 * sg**2))
                env.append(e)
                raw.append(e * mpmath.cos(2 * mpmath.pi * xr / lam + psi))
        total = mpmath.fsum(raw)
        if abs(total) < mpmath.mpf(1e-6):
            raw, total = env, mpmath.fsum(env)
        return np.array([float(v / total) for v in raw]).reshape(K, K)


def direct_taps_ld(p, K: int = 6) -> np.ndarray:
    """Same construction as :func:`direct_taps` in long double: a fast, looped oracle.

    ``p`` holds (lambda, theta, psi, sigma, gamma); theta may be any long double.
    """
    L = np.longdouble
    lam, th, psi, sg, gm = (L(v) for v in p)
    c, s = np.cos(th), np.sin(th)
    two_pi = 2 * L(LD_PI)
    env = []
    raw = []
    for y in lattice_offsets(K):
        for x in lattice_offsets(K):
            x, y = L(x), L(y)
            xr = x * c + y * s
            yr = -x * s + y * c
            e = np.exp(-(xr * xr + gm * gm * yr * yr) / (2 * sg * sg))
            env.append(e)
            raw.append(e * np.cos(two_pi * xr / lam + psi))
    total = _kahan(raw)
    if abs(total) < 1e-6:
        raw, total = env, _kahan(env)
    return np.array([float(v / total) for v in raw]).reshape(K, K)


LD_PI = "3.14159265358979323846264338327950288"


def _kahan(values):
    total = np.longdouble(0)
    comp = np.longdouble(0)
    for v in values:
        y = v - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total


def run_gabor_oracle(draws: int = 1000, seed: int = 0, K: int = 6) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_identity = 0.0
    worst_canon = 0.0
    d = lattice_offsets(K)
    L = np.longdouble
    for _ in range(draws):
        p = random_params(rng)
        taps = synth_kernel(p, K).taps
        worst = max(worst, float(np.abs(taps - direct_taps_ld(p.as_array(), K)).max()))
        # G(theta + pi, -psi) == G(theta, psi), with theta + pi formed in long double
        flipped = _taps(*[np.array([v], dtype=L) for v in
                          (p.lam, L(p.theta) + L(LD_PI), -p.psi, p.sigma, p.gamma)], d)[0][0]
        worst_identity = max(worst_identity, float(np.abs(flipped - taps).max()))
        # canonical() keeps the kernel of an out-of-range angle, up to float64 angle rounding
        q = GaborParams(p.lam, p.theta + math.pi, -p.psi, p.sigma, p.gamma)
        direct_q = _taps(*[np.array([v]) for v in (q.lam, q.theta, q.psi, q.sigma, q.gamma)], d)[0][0]
        canon = synth_kernel(q.canonical(), K).taps
        worst_canon = max(worst_canon, float(np.abs(canon - direct_q).max() / max(1.0, np.abs(direct_q).max())))
    ok = worst <= 1e-12 and worst_identity <= 1e-12 and worst_canon <= 1e-12
    return SuiteResult("gabor_oracle", max(worst, worst_identity), ok, time.perf_counter() - t0,
                       f"{draws} draws: taps {worst:.2e}, theta+pi identity {worst_identity:.2e}, "
                       f"canonical form (relative) {worst_canon:.2e}")


# ------------------------------------------------------------ rounding surrogate


def run_rounding_check(step: float = 1e-3, h: float = 1e-6) -> SuiteResult:
    t0 = time.perf_counter()
    n = int(round(6.0 / step))
    x = -3.0 + step * np.arange(n + 1)
    s = ops.differentiable_round(Tensor(x)).data
    dev = float(np.abs(s - ops.round_half_away(x)).max())
    t = Tensor(x, requires_grad=True)
    ops.sum_all(ops.differentiable_round(t)).backward()
    frac = np.abs(x - np.floor(x) - 0.5)
    keep = frac > 10 * h
    fd = (ops.differentiable_round(Tensor(x + h)).data - ops.differentiable_round(Tensor(x - h)).data) / (2 * h)
    gerr = float(np.abs(t.grad - fd)[keep].max())
    r = ops.round_half_away(x)
    aerr = float(np.abs(t.grad - 3 * (x - r) ** 2).max())
    ok = dev <= 0.125 and gerr <= 1e-6 and aerr <= 1e-15
    return SuiteResult("rounding_surrogate", max(gerr, aerr), ok, time.perf_counter() - t0,
                       f"max |s-round| {dev:.6f}, grad vs fd {gerr:.2e}")


def run_all(instances: int = 20) -> list[SuiteResult]:
    return [run_gabor_oracle(), run_rounding_check()] + run_grad_suite(instances)
