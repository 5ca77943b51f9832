"""Differentiable ops over :class:`~lhdff.core.tensor.Tensor`.

Every op computes its forward value with numpy and, when a tape is active,
records a closure mapping the output gradient to one gradient per input.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, make_result


class DegenerateStatisticsError(ValueError):
    """Raised when batch statistics are requested over an empty extent."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _operand(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype), dtype=like.dtype)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _operand(b, a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _operand(a, b)
    b = _operand(b, a)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _operand(b, a)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at 0 is taken as 0."""
    positive = x.data > 0
    out = np.where(positive, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        return (g * positive,)

    return make_result(out, (x,), backward, "relu")


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)

    def backward(g):
        return (g * keep,)

    return make_result(x.data * keep, (x,), backward, "dropout")


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return make_result(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    out = x.data.transpose(axes)

    def backward(g):
        return (g.transpose(inverse),)

    return make_result(out, (x,), backward, "transpose")


def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index], dtype=x.dtype)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return make_result(out, (x,), backward, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tensors, backward, "concat")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make_result(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return make_result(out, (x,), backward, "mean")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_result(out, (a, b), backward, "matmul")


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``x[..., index]`` along the last axis, one index per leading position."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.shape[:-1]:
        raise ShapeError(f"pick index shape {index.shape} does not match {x.shape[:-1]}")
    expanded = index[..., None]
    out = np.take_along_axis(x.data, expanded, axis=-1)[..., 0]

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, expanded, g[..., None], axis=-1)
        return (full,)

    return make_result(out, (x,), backward, "pick")


# ---------------------------------------------------------------- layers

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight.T + bias``."""
    if weight.ndim != 2:
        raise ShapeError(f"linear weight must be 2-D, got {weight.shape}")
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in:
        raise ShapeError(f"linear expects last extent {d_in}, got {x.shape[-1]}")
    flat = x.data.reshape(-1, d_in)
    out = flat @ weight.data.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(x.shape[:-1] + (d_out,))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ flat if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(out, inputs, backward, "linear")


def _im2col(x: np.ndarray) -> np.ndarray:
    """``N x C x H x W`` -> ``(N*H*W) x (C*9)`` patches of the zero-padded input."""
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(2, 3))  # N C H W 3 3
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def _cols_to_nchw(out: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    return np.ascontiguousarray(out.reshape(n, h, w, -1).transpose(0, 3, 1, 2))


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (output keeps the input's spatial size).

    ``x`` is ``N x C x H x W`` and ``weight`` is ``C' x C x 3 x 3``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"conv2d kernel must be 3x3, got {kh}x{kw}")
    if c_in != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {c_in}")

    cols = _im2col(x.data)
    out = cols @ weight.data.reshape(c_out, c * 9).T
    if bias is not None:
        out += bias.data
    out = _cols_to_nchw(out, n, h, w)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * h * w, c_out)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            # input gradient is a 3x3 convolution of g with the flipped, channel-swapped kernel
            flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, c_out * 9)
            gx = _cols_to_nchw(_im2col(g) @ flipped.T, n, h, w)
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    return make_result(out, inputs, backward, "conv2d")


def avg_pool2d(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; a trailing odd row or column is dropped."""
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"avg_pool2d needs spatial extents >= 2, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    cropped = x.data[:, :, : h2 * 2, : w2 * 2]
    out = cropped.reshape(n, c, h2, 2, w2, 2).mean(axis=(3, 5))

    def backward(g):
        full = np.zeros_like(x.data)
        spread = np.broadcast_to((g / 4)[:, :, :, None, :, None], (n, c, h2, 2, w2, 2))
        full[:, :, : h2 * 2, : w2 * 2] = spread.reshape(n, c, h2 * 2, w2 * 2)
        return (full,)

    return make_result(out.astype(x.dtype, copy=False), (x,), backward, "avg_pool2d")


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of an ``N x C x H x W`` tensor.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place; in eval mode the running statistics
    are used instead.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm2d parameters must have shape ({c},)")
    count = n * h * w
    axes = (0, 2, 3)
    if training:
        if count == 0:
            raise DegenerateStatisticsError("batch norm over an empty batch-by-spatial extent")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            scale = (gamma.data * inv_std)[None, :, None, None]
            if training:
                gx = scale * (g - (gb / count)[None, :, None, None] - xhat * (gg / count)[None, :, None, None])
            else:
                gx = scale * g
        return gx, gg, gb

    return make_result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batch_norm2d")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(x.ndim - 1))
        gxhat = g * gamma.data
        gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "layer_norm")


def embedding(ids: np.ndarray, weight: Tensor) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range for vocabulary of size {vocab}")
    out = weight.data[ids]

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return make_result(out, (weight,), backward, "embedding")


# ---------------------------------------------------------------- softmax family

def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis, computed with max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return make_result(out, (x,), backward, "log_softmax")


def softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; positions where ``mask`` is False get weight 0.

    Every row must keep at least one unmasked position.
    """
    scores = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, scores.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax row with every position masked")
        scores = np.where(mask, scores, -np.inf)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype, copy=False)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None):
    """Attention over the last two axes; returns ``(output, weights)``.

    ``mask`` is boolean and broadcastable to ``... x Lq x Lk`` (True = attend).
    """
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))) * scale
    weights = softmax(scores, mask)
    return matmul(weights, v), weights
