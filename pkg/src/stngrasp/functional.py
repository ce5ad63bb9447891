"""Differentiable operations on :class:`~stngrasp.tensor.Tensor`.

Every function returns a new tensor and, when any input requires
gradients, records a closure computing the vector-Jacobian product.
Broadcasting is supported for the elementwise binary ops only.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, NumericError, ShapeError
from .tensor import Tensor

BCE_EPS = 1e-7


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    if np.any(b.data == 0):
        raise NumericError("division by zero")

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data / b.data, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported as NumericError below
        out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def sin(a: Tensor) -> Tensor:
    return Tensor._from_op(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a: Tensor) -> Tensor:
    return Tensor._from_op(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def atan2(y: Tensor, x: Tensor) -> Tensor:
    """Elementwise ``arctan2(y, x)``; the gradient at the origin is taken as zero."""
    y = _wrap(y, x if isinstance(x, Tensor) else None)
    x = _wrap(x, y)
    r2 = x.data * x.data + y.data * y.data
    safe = np.where(r2 > 0, r2, 1)

    def bw(g):
        gy = _unbroadcast(np.where(r2 > 0, g * x.data / safe, 0), y.shape)
        gx = _unbroadcast(np.where(r2 > 0, -g * y.data / safe, 0), x.shape)
        return gy, gx

    return Tensor._from_op(np.arctan2(y.data, x.data), (y, x), bw, "atan2")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)
    return Tensor._from_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clip")


def where(cond, a: Tensor, b: Tensor) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)

    def bw(g):
        return _unbroadcast(np.where(cond, g, 0), a.shape), _unbroadcast(np.where(cond, 0, g), b.shape)

    return Tensor._from_op(np.where(cond, a.data, b.data), (a, b), bw, "where")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(np.array(a.data[idx]), (a,), bw, "getitem")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    like = next((t for t in tensors if isinstance(t, Tensor)), None)
    tensors = [_wrap(t, like) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(out, tensors, bw, "stack")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tensors, bw, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules (both operands at least 2-D)."""
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fully-connected layer ``x @ weight.T + bias`` with weight shaped [out, in]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"dense expects x [N, in] and weight [out, in], got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense input width {x.shape[1]} != weight input width {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, bw, "dense")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    Args:
        x: input [N, C, H, W].
        weight: kernels [F, C, kH, kW].
        bias: optional [F].
        stride: step between output positions.
        pad: zeros added on every spatial border.

    Returns:
        Tensor [N, F, H', W'] with ``H' = (H + 2*pad - kH) // stride + 1``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    N, C, H, W = x.shape
    F_, C_w, kh, kw = weight.shape
    if C != C_w:
        raise ShapeError(f"conv2d input has {C} channels but weight expects {C_w}")
    if stride < 1 or pad < 0:
        raise ContractError("conv2d needs stride >= 1 and pad >= 0")
    if H + 2 * pad < kh or W + 2 * pad < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {H + 2 * pad}x{W + 2 * pad}")
    if bias is not None and bias.shape != (F_,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({F_},)")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("conv2d input contains non-finite values")

    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, F
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(weight.data[:, :, i, j], g, axes=([0], [1]))  # C, N, Ho, Wo
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += contrib.transpose(1, 0, 2, 3)
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, bw, "conv2d")


def max_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    stride = stride or kernel
    N, C, H, W = x.shape
    if H < kernel or W < kernel:
        raise ShapeError(f"max_pool2d kernel {kernel} larger than input {H}x{W}")
    Ho = (H - kernel) // stride + 1
    Wo = (W - kernel) // stride + 1
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    flat = win.reshape(N, C, Ho, Wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        rows = (np.arange(Ho) * stride)[None, None, :, None] + arg // kernel
        cols = (np.arange(Wo) * stride)[None, None, None, :] + arg % kernel
        n_idx = np.arange(N)[:, None, None, None]
        c_idx = np.arange(C)[None, :, None, None]
        gx = np.zeros_like(x.data)
        np.add.at(gx, (n_idx, c_idx, rows, cols), g)
        return (gx,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), bw, "max_pool2d")


def avg_pool2d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping average pooling; trailing rows/columns that do not fill a window are dropped."""
    N, C, H, W = x.shape
    Ho, Wo = H // kernel, W // kernel
    if Ho == 0 or Wo == 0:
        raise ShapeError(f"avg_pool2d kernel {kernel} larger than input {H}x{W}")
    crop = x.data[:, :, :Ho * kernel, :Wo * kernel]
    out = crop.reshape(N, C, Ho, kernel, Wo, kernel).mean(axis=(3, 5))

    def bw(g):
        gx = np.zeros_like(x.data)
        up = np.repeat(np.repeat(g, kernel, axis=2), kernel, axis=3) / (kernel * kernel)
        gx[:, :, :Ho * kernel, :Wo * kernel] = up
        return (gx,)

    return Tensor._from_op(out, (x,), bw, "avg_pool2d")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def binary_cross_entropy(score: Tensor, label, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy; scores are clamped into [eps, 1 - eps]."""
    label = np.asarray(label.data if isinstance(label, Tensor) else label, dtype=score.dtype)
    if label.shape != score.shape:
        raise ShapeError(f"score shape {score.shape} != label shape {label.shape}")
    if not np.all((label == 0) | (label == 1)):
        raise ContractError("binary_cross_entropy labels must be 0 or 1")
    s = np.clip(score.data, eps, 1 - eps)
    inside = (score.data >= eps) & (score.data <= 1 - eps)
    n = score.size
    loss = -np.mean(label * np.log(s) + (1 - label) * np.log(1 - s))

    def bw(g):
        d = (-(label / s) + (1 - label) / (1 - s)) / n
        return (g * d * inside,)

    return Tensor._from_op(np.asarray(loss, dtype=score.dtype), (score,), bw, "bce")


def masked_mse(pred: Tensor, target, mask) -> Tensor:
    """Mean squared error over unmasked entries; masked entries get exactly zero gradient."""
    target = np.asarray(target, dtype=pred.dtype)
    mask = np.asarray(mask, dtype=pred.dtype)
    denom = max(float(mask.sum()), 1.0)
    diff = (pred - Tensor(target)) * Tensor(mask)
    return sum(diff * diff) / denom
