"""Differentiable primitives.

Every function takes and returns :class:`Tensor`.  Plain numbers and arrays
are promoted to constant tensors.  Backward closures return one gradient per
parent (``None`` for parents that need none).
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor

_make = Tensor._make


def _const(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class _BranchTape:
    """Branch choices of piecewise-linear ops, recorded once then replayed."""

    def __init__(self):
        self.masks: list = []
        self.cursor = 0
        self.replaying = False

    def pick(self, computed: np.ndarray) -> np.ndarray:
        if not self.replaying:
            self.masks.append(computed)
            return computed
        if self.cursor >= len(self.masks) or self.masks[self.cursor].shape != computed.shape:
            raise RuntimeError("replayed graph differs from the recorded one")
        mask = self.masks[self.cursor]
        self.cursor += 1
        return mask

    def rewind(self) -> None:
        self.replaying = True
        self.cursor = 0


_TAPE: _BranchTape | None = None


@contextmanager
def frozen_branches():
    """Pin relu / leaky_relu / abs to the branches taken on the first pass.

    Inside the context, the first forward records every branch mask; call
    ``tape.rewind()`` before each later forward to replay them.  Perturbed
    evaluations then follow the same linear piece as the base point, which
    keeps finite differences meaningful near kinks.
    """
    global _TAPE
    prev, _TAPE = _TAPE, _BranchTape()
    try:
        yield _TAPE
    finally:
        _TAPE = prev


def _branch(mask: np.ndarray) -> np.ndarray:
    return mask if _TAPE is None else _TAPE.pick(mask)


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _const(a, b if isinstance(b, Tensor) else None), _const(b, a if isinstance(a, Tensor) else None)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _const(a, b if isinstance(b, Tensor) else None), _const(b, a if isinstance(a, Tensor) else None)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _const(a, b if isinstance(b, Tensor) else None), _const(b, a if isinstance(a, Tensor) else None)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _const(a, b if isinstance(b, Tensor) else None), _const(b, a if isinstance(a, Tensor) else None)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(out, (a,), backward, "power")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(a: Tensor) -> Tensor:
    sign = _branch(np.sign(a.data))
    return _make(a.data * sign, (a,), lambda g: (g * sign,), "abs")


# -- activations --------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = _branch(a.data > 0)
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = _branch(a.data > 0)
    scale = np.where(mask, 1.0, slope).astype(a.data.dtype)
    return _make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)) without overflow."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1 + np.tanh(0.5 * x))
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


def activation(a: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "leaky_relu":
        return leaky_relu(a, slope)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "tanh":
        return tanh(a)
    if kind in ("none", "linear", None):
        return a
    raise ValueError(f"unknown activation {kind!r}")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


# -- reductions and shape ops -------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).astype(a.data.dtype),)

    return _make(out, (a,), backward, "mean")


def exchangeable_mean(a: Tensor, axis: int = 0) -> Tensor:
    """Mean along ``axis`` that is bitwise invariant to reordering that axis.

    Values are sorted along the axis and accumulated as offsets from the
    smallest one, so duplicated inputs reproduce themselves exactly.
    """
    n = a.shape[axis]
    s = np.sort(a.data, axis=axis)
    base = np.take(s, [0], axis=axis)
    acc = np.zeros_like(base)
    for i in range(1, n):
        acc = acc + (np.take(s, [i], axis=axis) - base)
    out = np.squeeze(base + acc / n, axis=axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).astype(a.data.dtype),)

    return _make(out, (a,), backward, "exchangeable_mean")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(out, (a,), backward, "transpose")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), backward, "getitem")


def concat(items: Sequence, axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in items]
    out = np.concatenate([t.data for t in items], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in items])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(items))
        )

    return _make(out, tuple(items), backward, "concat")


def stack(items: Sequence, axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in items]
    out = np.stack([t.data for t in items], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return _make(out, tuple(items), backward, "stack")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


# -- image ops ----------------------------------------------------------------

def _pair(v) -> tuple:
    return (v, v) if isinstance(v, (int, np.integer)) else tuple(v)


def conv_output_size(size: int, k: int, stride: int, pad: int, dil: int) -> int:
    return (size + 2 * pad - dil * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0, dilation=1,
           pad_mode: str = "zeros") -> Tensor:
    """Cross-correlation of an N×C×H×W batch with an F×C×kh×kw kernel.

    ``pad_mode`` is ``"zeros"`` or ``"circular"`` (toroidal wrap-around).
    """
    if pad_mode not in ("zeros", "circular"):
        raise ValueError(f"unknown pad_mode {pad_mode!r}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape}, {weight.shape}")
    N, C, H, W = x.shape
    F, Ck, kh, kw = weight.shape
    if C != Ck:
        raise ShapeError(f"conv2d channel mismatch: input {C}, kernel {Ck}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    dh, dw = _pair(dilation)
    Ho = conv_output_size(H, kh, sh, ph, dh)
    Wo = conv_output_size(W, kw, sw, pw, dw)
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d output extent non-positive ({Ho}x{Wo}) for input {H}x{W}")
    xd = x.data
    dtype = xd.dtype
    if pad_mode == "circular":
        rows = np.arange(-ph, H + ph) % H
        cols_idx = np.arange(-pw, W + pw) % W
        xp = xd[:, :, rows][:, :, :, cols_idx]
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    cols = np.empty((N, Ho, Wo, C, kh, kw), dtype=dtype)
    h_span = sh * (Ho - 1) + 1
    w_span = sw * (Wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i * dh:i * dh + h_span:sh, j * dw:j * dw + w_span:sw]
            cols[:, :, :, :, i, j] = patch.transpose(0, 2, 3, 1)
    cols2d = cols.reshape(N * Ho * Wo, C * kh * kw)
    w2d = weight.data.reshape(F, -1)
    out = (cols2d @ w2d.T).reshape(N, Ho, Wo, F).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, F, 1, 1)
    out = np.ascontiguousarray(out, dtype=dtype)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2d = g.transpose(0, 2, 3, 1).reshape(-1, F)
        gw = (g2d.T @ cols2d).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2d @ w2d).reshape(N, Ho, Wo, C, kh, kw)
            dxp = np.zeros(xp.shape, dtype=dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i * dh:i * dh + h_span:sh, j * dw:j * dw + w_span:sw] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if pad_mode == "circular":
                folded = np.zeros((N, C, H, xp.shape[3]), dtype=dtype)
                np.add.at(folded, (slice(None), slice(None), rows), dxp)
                gx = np.zeros((N, C, H, W), dtype=dtype)
                np.add.at(gx, (slice(None), slice(None), slice(None), cols_idx), folded)
            else:
                gx = dxp[:, :, ph:ph + H, pw:pw + W] if (ph or pw) else dxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out, parents, backward, "conv2d")


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each (sample, channel) plane over its spatial extent."""
    if x.ndim < 3:
        raise ShapeError(f"instance_norm needs spatial axes, got {x.shape}")
    axes = (-2, -1)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _make(xhat.astype(x.data.dtype), (x,), backward, "instance_norm")


def adain(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Instance-normalise ``x`` then apply a per-channel affine map.

    ``gamma``/``beta`` are either length C (shared across the batch) or N×C.
    """
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    C = x.shape[1]
    if gamma.shape[-1] != C or beta.shape[-1] != C:
        raise ShapeError(f"adain parameters must have {C} channels, got {gamma.shape}, {beta.shape}")
    shape = (-1, C, 1, 1)
    return add(mul(instance_norm(x, eps), reshape(gamma, shape)), reshape(beta, shape))


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"upsample factor must be a positive integer, got {factor}")
    if factor == 1:
        return x
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)
    *lead, H, W = x.shape

    def backward(g):
        return (g.reshape(*lead, H, factor, W, factor).sum(axis=(-3, -1)),)

    return _make(out, (x,), backward, "upsample_nearest")


def avg_pool2(x: Tensor) -> Tensor:
    """2×2 average pooling with stride 2."""
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2 needs even extents, got {H}x{W}")
    return mean(reshape(x, (N, C, H // 2, 2, W // 2, 2)), axis=(3, 5))


def time_shift(v: Tensor, fold_fwd: int, fold_bwd: int) -> Tensor:
    """Shift channel groups of an N×C×T×H×W volume along time.

    Channels ``[0, fold_fwd)`` move one step later in time, the next
    ``fold_bwd`` channels one step earlier; vacated slots are zero.
    """
    if v.ndim != 5:
        raise ShapeError(f"time_shift needs N×C×T×H×W, got {v.shape}")
    a, b = fold_fwd, fold_fwd + fold_bwd
    x = v.data
    out = x.copy()
    out[:, :a, 1:] = x[:, :a, :-1]
    out[:, :a, :1] = 0
    out[:, a:b, :-1] = x[:, a:b, 1:]
    out[:, a:b, -1:] = 0

    def backward(g):
        gi = g.copy()
        gi[:, :a, :-1] = g[:, :a, 1:]
        gi[:, :a, -1:] = 0
        gi[:, a:b, 1:] = g[:, a:b, :-1]
        gi[:, a:b, :1] = 0
        return (gi,)

    return _make(out, (v,), backward, "time_shift")


