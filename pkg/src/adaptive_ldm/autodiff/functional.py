"""Differentiable primitives.

Each primitive computes its forward value with numpy and registers a closure
returning the cotangent of every input. Cotangents are treated as read-only
throughout; no adjoint mutates an array it receives.
"""

from __future__ import annotations

import numbers
from typing import Sequence

import numpy as np

from . import conv as _conv
from .tensor import Tensor, as_tensor, make_node

EPS_NORM = 1e-5


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _is_scalar(x) -> bool:
    return isinstance(x, numbers.Number)


def cast(x: Tensor, dtype) -> Tensor:
    src = x.dtype
    return make_node(x.data.astype(dtype), (x,), lambda g: (g.astype(src),), "cast")


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    if _is_scalar(b):
        return make_node(a.data + b, (a,), lambda g: (g,), "add_scalar")
    if _is_scalar(a):
        return add(b, a)
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return make_node(a.data - b, (a,), lambda g: (g,), "sub_scalar")
    if _is_scalar(a):
        return make_node(a - b.data, (b,), lambda g: (-g,), "rsub_scalar")
    a, b = as_tensor(a, b), as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        return make_node(a.data * b, (a,), lambda g: (g * b,), "mul_scalar")
    if _is_scalar(a):
        return mul(b, a)
    a, b = as_tensor(a, b), as_tensor(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make_node(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    if _is_scalar(b):
        return mul(a, 1.0 / b)
    if _is_scalar(a):
        bd = b.data
        out = a / bd
        return make_node(out, (b,), lambda g: (-g * out / bd,), "rdiv_scalar")
    a, b = as_tensor(a, b), as_tensor(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return make_node(out, (a, b), backward, "div")


def neg(x: Tensor) -> Tensor:
    return make_node(-x.data, (x,), lambda g: (-g,), "neg")


def power(x: Tensor, p: float) -> Tensor:
    xd = x.data
    if p == 2:
        return make_node(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")
    return make_node(xd**p, (x,), lambda g: (p * g * xd ** (p - 1),), "power")


def square(x: Tensor) -> Tensor:
    return power(x, 2)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_node(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def abs(x: Tensor) -> Tensor:
    xd = x.data
    return make_node(np.abs(xd), (x,), lambda g: (g * np.sign(xd),), "abs")


# -- activations ----------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return make_node(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = 0.5 * (1.0 + np.tanh(0.5 * xd))
    return make_node(xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),), "silu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), backward, "softmax")


# -- reductions and shape ops ---------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return make_node(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


permute = transpose


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def index(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(idx)

    def backward(g):
        gx = np.zeros(shape, dtype=dtype)
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return make_node(x.data[idx], (x,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a, b), as_tensor(b, a)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul expects operands of rank >= 2, got {ad.shape} and {bd.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_node(ad @ bd, (a, b), backward, "matmul")


def broadcast_to(x: Tensor, shape) -> Tensor:
    src = x.shape
    out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    return make_node(out, (x,), lambda g: (_unbroadcast(g, src),), "broadcast_to")


# -- convolution, resampling, normalization ------------------------------------


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError(f"conv3d expects 5-D input and weight, got {x.shape} and {weight.shape}")
    out, ctx = _conv.conv3d_forward(x.data, weight.data, None if bias is None else bias.data, stride, pad)
    wd = weight.data

    def backward(g):
        gx, gw, gb = _conv.conv3d_backward(g, wd, ctx, need_x=x.requires_grad, need_w=weight.requires_grad)
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "conv3d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    return make_node(
        _conv.upsample_nearest_forward(x.data, factor),
        (x,),
        lambda g: (_conv.upsample_nearest_backward(g, factor),),
        "upsample_nearest",
    )


def group_norm(x: Tensor, groups: int, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = EPS_NORM) -> Tensor:
    n, c = x.shape[:2]
    if c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    centered = xg - mu
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=2, keepdims=True) + eps)
    xhat = (centered * rstd).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    out = xhat if weight is None else xhat * weight.data.reshape(bshape)
    if bias is not None:
        out = out + bias.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        gxhat = g if weight is None else g * weight.data.reshape(bshape)
        gxh = gxhat.reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        gx = rstd * (gxh - gxh.mean(axis=2, keepdims=True) - xh * (gxh * xh).mean(axis=2, keepdims=True))
        grads = [gx.reshape(x.shape)]
        if weight is not None:
            grads.append((g * xhat).sum(axis=red))
        if bias is not None:
            grads.append(g.sum(axis=red))
        return tuple(grads)

    parents = [x] + [p for p in (weight, bias) if p is not None]
    return make_node(out, parents, backward, "group_norm")


def instance_norm(x: Tensor, eps: float = EPS_NORM) -> Tensor:
    return group_norm(x, x.shape[1], eps=eps)


def instance_stats(h: Tensor, eps: float = EPS_NORM) -> tuple[Tensor, Tensor]:
    """Per-sample, per-channel spatial mean and sqrt(variance + eps)."""
    if h.ndim < 3 or int(np.prod(h.shape[2:])) < 1:
        raise ValueError(f"instance_stats needs spatial extent >= 1, got {h.shape}")
    axes = tuple(range(2, h.ndim))
    mu = mean(h, axes, keepdims=True)
    centered = h - mu
    sigma = sqrt(mean(centered * centered, axes, keepdims=True) + eps)
    n, c = h.shape[:2]
    return reshape(mu, (n, c)), reshape(sigma, (n, c))


def attention_core(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the key axis, batched over the leading dim."""
    d = q.shape[-1]
    if d == 0 or k.shape[-1] != d:
        raise ValueError(f"attention_core needs a shared nonzero inner dim, got {q.shape} and {k.shape}")
    if k.shape[-2] < 1 or v.shape[-2] != k.shape[-2]:
        raise ValueError(f"attention_core needs >= 1 key with matching values, got {k.shape} and {v.shape}")
    logits = matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))) * (1.0 / np.sqrt(d))
    return matmul(softmax(logits, axis=-1), v)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x W^T + b with W shaped (out, in)."""
    y = matmul(x, transpose(weight))
    return y if bias is None else y + bias


# -- losses ---------------------------------------------------------------------


def l1_loss(a: Tensor, b) -> Tensor:
    return mean(abs(a - b))


def mse_loss(a: Tensor, b) -> Tensor:
    d = a - b
    return mean(d * d)
