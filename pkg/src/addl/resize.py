"""Separable bicubic resampling (Keys kernel, a = -0.5) for the BD baseline.

Half-pixel centres, symmetric boundary extension; the 1/2 case widens the
kernel by 2 (anti-aliased, as in MATLAB's imresize).
"""

from __future__ import annotations

import numpy as np

A = -0.5


def cubic(t: np.ndarray) -> np.ndarray:
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2 = t * t
    t3 = t2 * t
    near = (A + 2) * t3 - (A + 3) * t2 + 1
    far = A * t3 - 5 * A * t2 + 8 * A * t - 4 * A
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def _fold(j: np.ndarray, n: int) -> np.ndarray:
    j = np.mod(j, 2 * n)
    return np.where(j >= n, 2 * n - 1 - j, j)


def resize_matrix(n_in: int, factor: float) -> np.ndarray:
    """(n_out x n_in) interpolation matrix for factor 2 or 1/2."""
    if factor == 2:
        n_out, scale = 2 * n_in, 1.0
    elif factor == 0.5:
        if n_in % 2:
            raise ValueError("halving needs an even length")
        n_out, scale = n_in // 2, 2.0
    else:
        raise ValueError(f"only factors 2 and 1/2 are supported, got {factor}")
    m = np.zeros((n_out, n_in))
    support = 2.0 * scale
    for i in range(n_out):
        centre = (i + 0.5) * (n_in / n_out) - 0.5
        lo = int(np.floor(centre - support)) + 1
        js = np.arange(lo, int(np.ceil(centre + support)))
        w = cubic((js - centre) / scale)
        w = w / w.sum()
        np.add.at(m[i], _fold(js, n_in), w)
    return m


def bicubic_resize(img: np.ndarray, factor: float) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("expected a 2-D plane")
    mh = resize_matrix(img.shape[0], factor)
    mw = resize_matrix(img.shape[1], factor)
    return mh @ img @ mw.T
