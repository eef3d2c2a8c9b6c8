"""Differentiable operators used by the three networks and the codec proxy.

Every op returns a new :class:`Tensor`. Image data is channels-first,
N x C x H x W. Reductions run in a fixed order (numpy's pairwise sum over a
fixed memory layout, explicit loops over kernel taps) so identical inputs give
bit-identical outputs.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    return Tensor._make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Tensor._make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Tensor._make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def cos(x: Tensor) -> Tensor:
    return Tensor._make(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),), "cos")


def sin(x: Tensor) -> Tensor:
    return Tensor._make(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),), "sin")


def clip01(x: Tensor) -> Tensor:
    """Clamp to [0, 1]; gradient passes where the input is inside the range."""
    mask = (x.data >= 0.0) & (x.data <= 1.0)
    return Tensor._make(np.clip(x.data, 0.0, 1.0), (x,), lambda g: (g * mask,), "clip01")


def straight_through(x: Tensor, value: np.ndarray) -> Tensor:
    """Forward ``value``, backward identity (the straight-through estimator)."""
    value = np.asarray(value, dtype=np.float64)
    if value.shape != x.shape:
        raise ShapeError(f"straight_through: {value.shape} != {x.shape}")
    return Tensor._make(value.copy(), (x,), lambda g: (g,), "straight_through")


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def differentiable_round(x: Tensor) -> Tensor:
    """round(x) + (x - round(x))**3 with round treated as a constant."""
    r = round_half_away(x.data)
    t = x.data - r
    return Tensor._make(r + t**3, (x,), lambda g: (g * 3.0 * t * t,), "differentiable_round")


def sum_all(x: Tensor) -> Tensor:
    return Tensor._make(
        np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),), "sum"
    )


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return Tensor._make(
        np.asarray(x.data.sum() / n), (x,), lambda g: (np.full(x.shape, float(g) / n),), "mean"
    )


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; the gradient at exact ties is 0."""
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    sgn = np.sign(diff)
    return Tensor._make(
        np.asarray(np.abs(diff).sum() / n),
        (pred, target),
        lambda g: (sgn * (float(g) / n), -sgn * (float(g) / n)),
        "l1_loss",
    )


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects N x C x H x W tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    return Tensor._make(
        np.concatenate([a.data, b.data], axis=1),
        (a, b),
        lambda g: (g[:, :ca], g[:, ca:]),
        "concat",
    )


def select_channels(x: Tensor, idx) -> Tensor:
    """x[:, idx]; repeated channels accumulate their gradients."""
    idx = np.asarray(idx, dtype=np.intp)
    if x.data.ndim != 4:
        raise ShapeError("select_channels expects N x C x H x W")

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, (slice(None), idx), g)
        return (out,)

    return Tensor._make(x.data[:, idx], (x,), backward, "select_channels")


def take_spatial(x: Tensor, rows: np.ndarray, cols: np.ndarray, op: str = "gather") -> Tensor:
    """out[..., i, j] = x[..., rows[i], cols[j]]; indices may repeat (padding)."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    H, W = x.shape[-2:]

    def backward(g):
        gr = np.zeros(g.shape[:-2] + (H, g.shape[-1]))
        np.add.at(gr, (..., rows, slice(None)), g)
        gx = np.zeros(g.shape[:-2] + (H, W))
        np.add.at(gx, (..., slice(None), cols), gr)
        return (gx,)

    out = x.data[..., rows, :][..., :, cols]
    return Tensor._make(out, (x,), backward, op)


def symmetric_indices(n: int, before: int, after: int) -> np.ndarray:
    """Source indices for numpy-style ``symmetric`` padding (edge sample repeated)."""
    idx = np.arange(-before, n + after)
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


def pad_symmetric(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    H, W = x.shape[-2:]
    return take_spatial(
        x, symmetric_indices(H, top, bottom), symmetric_indices(W, left, right), "pad_symmetric"
    )


def crop(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left h x w region."""
    return take_spatial(x, np.arange(h), np.arange(w), "crop")


def resize_nearest(x: Tensor, h: int, w: int) -> Tensor:
    H, W = x.shape[-2:]
    rows = np.minimum((np.arange(h) * H) // h, H - 1)
    cols = np.minimum((np.arange(w) * W) // w, W - 1)
    return take_spatial(x, rows, cols, "resize_nearest")


# ---------------------------------------------------------------- convolution


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"conv geometry not exact: in={n} k={k} stride={stride} pad={pad}"
        )
    return span // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """N x C x H x W -> columns of shape (C*kh*kw, N*Ho*Wo)."""
    N, C, H, W = x.shape
    Ho = _conv_out(H, kh, stride, pad)
    Wo = _conv_out(W, kw, stride, pad)
    xt = x.transpose(1, 0, 2, 3)
    if pad:
        xt = np.pad(xt, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((C, kh, kw, N, Ho, Wo))
    for a in range(kh):
        for b in range(kw):
            cols[:, a, b] = xt[:, :, a : a + stride * Ho : stride, b : b + stride * Wo : stride]
    return cols.reshape(C * kh * kw, N * Ho * Wo), Ho, Wo


def _col2im(dcols: np.ndarray, shape, kh: int, kw: int, stride: int, pad: int, Ho: int, Wo: int):
    """Adjoint of :func:`_im2col`; accumulates taps in a fixed (a, b) order."""
    N, C, H, W = shape
    d = dcols.reshape(C, kh, kw, N, Ho, Wo)
    acc = np.zeros((C, N, H + 2 * pad, W + 2 * pad))
    for a in range(kh):
        for b in range(kw):
            acc[:, :, a : a + stride * Ho : stride, b : b + stride * Wo : stride] += d[:, a, b]
    if pad:
        acc = acc[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(acc.transpose(1, 0, 2, 3))


def _to_cfirst(x: np.ndarray) -> np.ndarray:
    return x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1)


def _from_cfirst(m: np.ndarray, N: int, H: int, W: int) -> np.ndarray:
    return np.ascontiguousarray(m.reshape(-1, N, H, W).transpose(1, 0, 2, 3))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded cross-correlation, y_i = W . x_i + b at every window."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be N x C x H x W, got {x.shape}")
    O, C, kh, kw = weight.shape
    if x.shape[1] != C:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {C}")
    N = x.shape[0]
    cols, Ho, Wo = _im2col(x.data, kh, kw, stride, padding)
    wm = weight.data.reshape(O, -1)
    out = wm @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = _from_cfirst(out, N, Ho, Wo)

    def backward(g):
        gm = _to_cfirst(g)
        gw = (gm @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = _col2im(wm.T @ gm, x.shape, kh, kw, stride, padding, Ho, Wo)
        gb = gm.sum(axis=1) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, "conv2d")


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2, padding: int = 1
) -> Tensor:
    """Adjoint of :func:`conv2d` with the same kernel, plus an output bias.

    ``weight`` has shape (C_in, C_out, k, k): it is the kernel of the conv2d
    that would map C_out channels back to C_in.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d input must be N x C x H x W, got {x.shape}")
    Ci, Co, kh, kw = weight.shape
    if x.shape[1] != Ci:
        raise ShapeError(f"conv_transpose2d: input has {x.shape[1]} channels, kernel expects {Ci}")
    N, _, H, W = x.shape
    Ho = (H - 1) * stride + kh - 2 * padding
    Wo = (W - 1) * stride + kw - 2 * padding
    out_shape = (N, Co, Ho, Wo)
    # the conv this is the adjoint of must map out_shape exactly onto x's grid
    if Ho < 1 or Wo < 1 or _conv_out(Ho, kh, stride, padding) != H or _conv_out(Wo, kw, stride, padding) != W:
        raise ShapeError("conv_transpose2d geometry is not an exact adjoint")
    wm = weight.data.reshape(Ci, -1)
    xm = _to_cfirst(x.data)
    out = _col2im(wm.T @ xm, out_shape, kh, kw, stride, padding, H, W)
    if bias is not None:
        out += bias.data.reshape(1, Co, 1, 1)

    def backward(g):
        cols, _, _ = _im2col(g, kh, kw, stride, padding)
        gx = _from_cfirst(wm @ cols, N, H, W) if x.requires_grad else None
        gw = (xm @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, "conv_transpose2d")


# ---------------------------------------------------------------- resampling


def maxpool2(x: Tensor) -> Tensor:
    """2 x 2 max pooling, stride 2. Ties go to the first element in row-major order."""
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {H}x{W}")
    h, w = H // 2, W // 2
    win = x.data.reshape(N, C, h, 2, w, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, h, w, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((N, C, h, w, 4))
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(N, C, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H, W),)

    return Tensor._make(np.ascontiguousarray(out), (x,), backward, "maxpool2")


def bilinear_matrix(n: int) -> np.ndarray:
    """(2n x n) factor-2 bilinear interpolation matrix, half-pixel centres, edge clamp."""
    m = np.zeros((2 * n, n))
    for i in range(2 * n):
        src = (i + 0.5) / 2.0 - 0.5
        src = min(max(src, 0.0), n - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def bilinear_up2(x: Tensor) -> Tensor:
    H, W = x.shape[-2:]
    mh = bilinear_matrix(H)
    mw = bilinear_matrix(W)
    out = mh @ (x.data @ mw.T)
    return Tensor._make(
        np.ascontiguousarray(out), (x,), lambda g: (mh.T @ (g @ mw),), "bilinear_up2"
    )
