"""Differentiable operations over :class:`Tensor`.

Reductions and the forward matmul accumulate in float64 regardless of the
tensor dtype; convolutions and backward contractions run in the operand dtype
through BLAS.
"""

from __future__ import annotations

import contextlib
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, ValidationError
from .tensor import Tensor, as_tensor


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)), dtype=np.float64)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64)
    return grad.reshape(shape)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        a = Tensor(a)
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return Tensor._from_op(a.data * a.data.dtype.type(factor), (a,), backward, "scale")


class ReluMargin:
    """Smallest |pre-activation| seen by relu while tracking is active."""

    def __init__(self):
        self.min = np.inf


_RELU_TRACKERS: list[ReluMargin] = []


@contextlib.contextmanager
def track_relu_margin() -> Iterator[ReluMargin]:
    record = ReluMargin()
    _RELU_TRACKERS.append(record)
    try:
        yield record
    finally:
        _RELU_TRACKERS.remove(record)


def relu(a: Tensor) -> Tensor:
    # gradient at exactly zero is zero
    active = a.data > 0
    if _RELU_TRACKERS:
        margin = float(np.min(np.abs(a.data)))
        for record in _RELU_TRACKERS:
            record.min = min(record.min, margin)

    def backward(g):
        return (g * active,)

    return Tensor._from_op(np.where(active, a.data, 0).astype(a.dtype), (a,), backward, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor._from_op(out, (a,), backward, "sigmoid")


def sin(a: Tensor) -> Tensor:
    x = a.data

    def backward(g):
        return (g * np.cos(x),)

    return Tensor._from_op(np.sin(x), (a,), backward, "sin")


def cos(a: Tensor) -> Tensor:
    x = a.data

    def backward(g):
        return (-g * np.sin(x),)

    return Tensor._from_op(np.cos(x), (a,), backward, "cos")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim:
            raise DimensionError(f"concat: rank {t.ndim} does not match rank {ndim}")
        for ax in range(ndim):
            if ax != axis and t.shape[ax] != tensors[0].shape[ax]:
                raise DimensionError(
                    f"concat: axis {ax} has extent {t.shape[ax]} but expected {tensors[0].shape[ax]}"
                )
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * ndim
            idx[axis] = slice(int(lo), int(hi))
            out.append(g[tuple(idx)])
        return out

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._from_op(data, tensors, backward, "concat")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------
def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view shape {src} as {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(src),)

    return Tensor._from_op(data, (a,), backward, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return Tensor._from_op(a.data.transpose(axes), (a,), backward, "transpose")


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    data = np.array(a.data[index], copy=True)
    return Tensor._from_op(data, (a,), backward, "getitem")


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows ``a[idx]`` from a 2-D tensor."""
    if a.ndim != 2:
        raise DimensionError(f"gather_rows expects a 2-D tensor, got shape {a.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    m, c = a.shape

    def backward(g):
        flat = (idx[:, None] * c + np.arange(c)[None, :]).ravel()
        acc = np.bincount(flat, weights=g.ravel(), minlength=m * c)
        return (acc.reshape(m, c).astype(a.dtype),)

    return Tensor._from_op(a.data[idx], (a,), backward, "gather_rows")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------
def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.dtype),)

    return Tensor._from_op(np.asarray(data), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner axis mismatch, a axis {a.ndim - 1} has {a.shape[-1]}, "
            f"b axis {b.ndim - 2} has {b.shape[-2]}"
        )
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    # 64-bit accumulation keeps each output row independent of how many rows share the call
    out = np.matmul(ad.astype(np.float64, copy=False), bd.astype(np.float64, copy=False))
    return Tensor._from_op(out.astype(np.result_type(ad, bd), copy=False), (a, b), backward, "matmul")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return cols, ho, wo


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = shape
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation, NCHW layout."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be N x C x H x W, got shape {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be Cout x Cin x kh x kw, got shape {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv2d: input channel axis (1) has {cin} but weight expects {wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValidationError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise ValidationError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise DimensionError(f"conv2d: padded input {h + 2 * pad}x{w + 2 * pad} smaller than kernel {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias axis 0 has {bias.shape} but weight has {cout} output channels")

    cols, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)

    def backward(g):
        g2 = g.reshape(n, cout, ho * wo)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0, dtype=np.float64)
        gw = gw.reshape(weight.shape).astype(weight.dtype)
        gcols = np.matmul(wmat.T, g2)
        gx = _col2im(gcols, x.shape, kh, kw, stride, pad, ho, wo)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=(0, 2), dtype=np.float64).astype(bias.dtype))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------
def grid_sample_bilinear(x: Tensor, points: Tensor) -> Tensor:
    """Bilinear lookup of ``x`` (N,C,H,W) at pixel-unit points (N,P,2) given as (x, y).

    Neighbours outside the image contribute zero. Differentiable with respect
    to both the feature map and the sample locations.
    """
    if x.ndim != 4:
        raise DimensionError(f"grid_sample input must be N x C x H x W, got shape {x.shape}")
    if points.ndim != 3 or points.shape[2] != 2:
        raise DimensionError(f"grid_sample points must be N x P x 2, got shape {points.shape}")
    if points.shape[0] != x.shape[0]:
        raise DimensionError(
            f"grid_sample: batch axis (0) has {points.shape[0]} points sets for {x.shape[0]} maps"
        )
    n, c, h, w = x.shape
    p = points.shape[1]
    px = points.data[..., 0]
    py = points.data[..., 1]
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    flat = x.data.reshape(n, c, h * w)

    corners = []  # (idx, valid, wy_factor, wx_factor)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy = y0 + dy
            xx = x0 + dx
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            idx = np.where(valid, yy * w + xx, 0)
            vals = np.take_along_axis(flat, idx[:, None, :], axis=2) * valid[:, None, :]
            corners.append((idx, valid, wy, wx, vals))

    out = np.zeros((n, c, p), dtype=x.dtype)
    for _, _, wy, wx, vals in corners:
        out += (wy * wx)[:, None, :].astype(x.dtype) * vals

    def backward(g):
        # feature map: scatter each corner's weighted gradient back to its pixel
        base = (np.arange(n)[:, None, None] * c + np.arange(c)[None, :, None]) * (h * w)
        flat_idx = []
        weights = []
        for idx, valid, wy, wx, _ in corners:
            wgt = (wy * wx * valid)[:, None, :]
            flat_idx.append((base + idx[:, None, :]).ravel())
            weights.append((g * wgt).ravel())
        gx = np.bincount(np.concatenate(flat_idx), weights=np.concatenate(weights), minlength=n * c * h * w)
        gx = gx.reshape(x.shape).astype(x.dtype)
        # sample locations: derivative of the bilinear weights
        (_, _, wy0, wx0, v00), (_, _, _, wx1, v01), (_, _, wy1, _, v10), (_, _, _, _, v11) = corners
        dvdx = wy0[:, None, :] * (v01 - v00) + wy1[:, None, :] * (v11 - v10)
        dvdy = wx0[:, None, :] * (v10 - v00) + wx1[:, None, :] * (v11 - v01)
        gpx = (g * dvdx).sum(axis=1, dtype=np.float64)
        gpy = (g * dvdy).sum(axis=1, dtype=np.float64)
        gp = np.stack([gpx, gpy], axis=-1).astype(points.dtype)
        return gx, gp

    return Tensor._from_op(out, (x, points), backward, "grid_sample_bilinear")


def _interp_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    # half-pixel centres, border clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def resize_bilinear_array(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Non-differentiable bilinear resize of the last two axes."""
    if x.shape[-2:] == (out_h, out_w):
        return x.copy()
    ry = _interp_matrix(out_h, x.shape[-2], x.dtype)
    rx = _interp_matrix(out_w, x.shape[-1], x.dtype)
    return np.matmul(np.matmul(ry, x), rx.T)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of an N,C,H,W tensor (half-pixel centres, clamped borders)."""
    if x.ndim != 4:
        raise DimensionError(f"resize_bilinear input must be N x C x H x W, got shape {x.shape}")
    ry = _interp_matrix(out_h, x.shape[2], x.dtype)
    rx = _interp_matrix(out_w, x.shape[3], x.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def backward(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return Tensor._from_op(out, (x,), backward, "resize_bilinear")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------
def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean per-pixel cross-entropy of N,K,H,W logits against N,H,W labels."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if logits.ndim != 4:
        raise DimensionError(f"softmax_cross_entropy logits must be N x K x H x W, got {logits.shape}")
    n, k, h, w = logits.shape
    if target.shape != (n, h, w):
        raise DimensionError(f"softmax_cross_entropy: target shape {target.shape} does not match {(n, h, w)}")
    labels = target.astype(np.int64)
    if not np.array_equal(labels, target) or labels.min() < 0 or labels.max() > 1:
        raise ValidationError("softmax_cross_entropy target values must lie in {0, 1}")
    if labels.max() >= k:
        raise ValidationError(f"target class {labels.max()} out of range for {k} logits")

    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, labels[:, None], axis=1)
    count = n * h * w
    loss = -picked.sum(dtype=np.float64) / count

    def backward(g):
        probs = np.exp(logp)
        np.put_along_axis(probs, labels[:, None], np.take_along_axis(probs, labels[:, None], axis=1) - 1.0, axis=1)
        return ((probs * (float(g) / count)).astype(logits.dtype),)

    return Tensor._from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_cross_entropy")


__all__ = [
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "sin",
    "cos",
    "concat",
    "reshape",
    "transpose",
    "getitem",
    "gather_rows",
    "sum",
    "mean",
    "matmul",
    "conv2d",
    "grid_sample_bilinear",
    "resize_bilinear",
    "resize_bilinear_array",
    "softmax_cross_entropy",
]
