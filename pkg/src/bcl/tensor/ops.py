"""Differentiable primitives.

Each function computes its forward result with numpy and registers a backward
rule through :func:`record`. Broadcasting is supported only in elementwise
add/sub/mul/div (enough for bias and per-channel affine terms).
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ShapeError, Tensor, as_tensor, record


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b, name):
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(name, a.shape, b.shape) from None
    return a, b


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    a, b = _pair(a, b, "add")
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", (a, b), out, back)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")
    out = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record("sub", (a, b), out, back)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        s = float(b)
        out = a.data * np.asarray(s, dtype=a.dtype)

        def back_scalar(g):
            return (g * np.asarray(s, dtype=g.dtype),)

        return record("mul", (a,), out, back_scalar)
    a, b = _pair(a, b, "mul")
    out = a.data * b.data

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", (a, b), out, back)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b, "div")
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return record("div", (a, b), out, back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def back(g):
        return (g * mask,)

    return record("relu", (x,), out, back)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def back(g):
        return (g * out,)

    return record("exp", (x,), out, back)


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise ValueError("log: input must be strictly positive")
    out = np.log(x.data)

    def back(g):
        return (g / x.data,)

    return record("log", (x,), out, back)


# -- reductions & shape ---------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return record("sum", (x,), out, back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype, copy=True),)

    return record("mean", (x,), out, back)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None

    def back(g):
        return (g.reshape(x.shape),)

    return record("reshape", (x,), out, back)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError("transpose", x.shape, detail="expects a 2-D tensor")
    out = x.data.T

    def back(g):
        return (g.T,)

    return record("transpose", (x,), out, back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError("concat", ref, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", tuple(tensors), out, back)


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Row-wise gather: ``out[i] = x[i, index[i]]`` for a 2-D ``x``."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise ShapeError("pick", x.shape, index.shape)
    rows = np.arange(x.shape[0])
    out = x.data[rows, index]

    def back(g):
        full = np.zeros_like(x.data)
        full[rows, index] = g
        return (full,)

    return record("pick", (x,), out, back)


# -- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return record("matmul", (a, b), out, back)


# -- softmax family -------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record("softmax", (x,), out, back)


def log_softmax(x: Tensor, axis: int = -1, exclude: Optional[np.ndarray] = None) -> Tensor:
    """Log-softmax along ``axis``.

    Entries where ``exclude`` is True take no part in the normaliser; their
    output is 0 and they receive no gradient.
    """
    data = x.data
    if exclude is not None:
        exclude = np.broadcast_to(np.asarray(exclude, dtype=bool), data.shape)
        data = np.where(exclude, -np.inf, data)
    m = data.max(axis=axis, keepdims=True)
    z = data - m
    e = np.exp(z)
    s = e.sum(axis=axis, keepdims=True)
    out = z - np.log(s)
    p = e / s
    if exclude is not None:
        out = np.where(exclude, 0.0, out).astype(x.dtype, copy=False)

    def back(g):
        if exclude is not None:
            g = np.where(exclude, 0.0, g)
        return ((g - p * g.sum(axis=axis, keepdims=True)).astype(x.dtype, copy=False),)

    return record("log_softmax", (x,), out.astype(x.dtype, copy=False), back)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    out = x.data / norm

    def back(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return record("l2_normalize", (x,), out, back)


# -- convolution & pooling ------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # (N, C, OH, OW, KH, KW) -> (N*OH*OW, C*KH*KW)
    n, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on NCHW input with OIHW weights."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    n, c, h, wd = x.shape
    oc, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = w.data.reshape(oc, -1)
    out2 = cols @ wmat.T
    if b is not None:
        if b.shape != (oc,):
            raise ShapeError("conv2d.bias", b.shape, (oc,))
        out2 = out2 + b.data
    out = np.ascontiguousarray(out2.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2))
    inputs = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, oc)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.ascontiguousarray((g2 @ wmat).reshape(n, oh, ow, c, kh, kw).transpose(4, 5, 0, 3, 1, 2))
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[i, j]
            gx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
            gx = np.ascontiguousarray(gx)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return record("conv2d", inputs, out, back)


def max_pool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    stride = stride or kernel
    if x.ndim != 4:
        raise ShapeError("max_pool2d", x.shape, detail="expects NCHW")
    n, c, h, w = x.shape
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    flat = win.reshape(n, c, oh, ow, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gx = np.zeros_like(x.data)
        di, dj = np.divmod(arg, kernel)
        nn_, cc, ii, jj = np.indices(arg.shape)
        np.add.at(gx, (nn_, cc, ii * stride + di, jj * stride + dj), g)
        return (gx,)

    return record("max_pool2d", (x,), np.ascontiguousarray(out), back)


def avg_pool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    stride = stride or kernel
    if x.ndim != 4:
        raise ShapeError("avg_pool2d", x.shape, detail="expects NCHW")
    n, c, h, w = x.shape
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    out = win.mean(axis=(-2, -1)).astype(x.dtype, copy=False)
    scale = 1.0 / (kernel * kernel)

    def back(g):
        gx = np.zeros_like(x.data)
        gs = (g * scale).astype(x.dtype, copy=False)
        for i in range(kernel):
            for j in range(kernel):
                gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gs
        return (gx,)

    return record("avg_pool2d", (x,), out, back)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("global_avg_pool", x.shape, detail="expects NCHW")
    return mean(x, axis=(2, 3))


# -- normalisation --------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch norm over N (2-D input) or N,H,W (4-D input).

    In training mode batch statistics are used and the running buffers are
    updated in place; otherwise the running buffers are used as constants.
    """
    if x.ndim == 4:
        axes, bshape = (0, 2, 3), (1, -1, 1, 1)
    elif x.ndim == 2:
        axes, bshape = (0,), (1, -1)
    else:
        raise ShapeError("batch_norm", x.shape, detail="expects 2-D or 4-D input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batch_norm", x.shape, gamma.shape)
    m = x.size // c
    if training:
        if m < 2:
            raise ShapeError("batch_norm", x.shape, detail="needs more than one value per channel in training")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * m / (m - 1)
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * invstd.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def back(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (invstd.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = dxhat * invstd.reshape(bshape)
        return gx.astype(x.dtype, copy=False), ggamma, gbeta

    return record("batch_norm", (x, gamma, beta), out.astype(x.dtype, copy=False), back)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("group_norm", x.shape, detail="expects NCHW")
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError("group_norm", x.shape, detail=f"{c} channels not divisible by {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    m = xg.shape[-1]
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat_g = (xg - mu) * invstd
    xhat = xhat_g.reshape(x.shape)
    bshape = (1, -1, 1, 1)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def back(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = (g * gamma.data.reshape(bshape)).reshape(n, groups, -1)
        gx = (invstd / m) * (
            m * dxhat - dxhat.sum(axis=-1, keepdims=True)
            - xhat_g * (dxhat * xhat_g).sum(axis=-1, keepdims=True)
        )
        return gx.reshape(x.shape).astype(x.dtype, copy=False), ggamma, gbeta

    return record("group_norm", (x, gamma, beta), out.astype(x.dtype, copy=False), back)


# -- losses ---------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    logp = log_softmax(logits, axis=1)
    nll = mul(pick(logp, labels), -1.0)
    if reduction == "none":
        return nll
    return mean(nll)
