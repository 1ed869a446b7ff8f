"""Differentiable primitives used by the networks and losses."""

from __future__ import annotations

import warnings
from typing import Optional, Tuple

import numpy as np

from ..errors import DataError, ParameterError, ShapeError
from .tensor import Tensor, _make, _norm_axes, as_tensor


class EmptyLossWarning(UserWarning):
    """Every pixel was ignored, so the loss mean is empty (reported as 0)."""


# --- pointwise nonlinearities -----------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), backward, "relu")


def leaky_relu(x, alpha: float = 0.2) -> Tensor:
    """``x`` for ``x >= 0``, ``alpha * x`` otherwise."""
    if alpha < 0:
        raise ParameterError(f"leaky_relu slope must be >= 0, got {alpha}")
    x = as_tensor(x)
    slope = np.where(x.data >= 0, 1.0, alpha).astype(x.dtype)

    def backward(g):
        return (g * slope,)

    return _make(x.data * slope, (x,), backward, "leaky_relu")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)

    def backward(g):
        return (g * (1 - y * y),)

    return _make(y, (x,), backward, "tanh")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(-np.logaddexp(0, -x.data)).astype(x.dtype)

    def backward(g):
        return (g * y * (1 - y),)

    return _make(y, (x,), backward, "sigmoid")


def log(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (g / x.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    return _make(y, (x,), backward, "log")


def tabs(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)

    def backward(g):
        return (g * sign,)

    return _make(np.abs(x.data), (x,), backward, "abs")


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp into ``[lo, hi]``; the gradient is zero where clamping is active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        return (g * inside,)

    return _make(np.clip(x.data, lo, hi), (x,), backward, "clip")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axes(axis, x.ndim)[0]
    z = np.exp(x.data - x.data.max(axis=ax, keepdims=True))
    y = z / z.sum(axis=ax, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def l1_distance(a, b) -> Tensor:
    """Mean absolute difference between two same-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_distance needs equal shapes, got {a.shape} and {b.shape}")
    diff = a.data - b.data
    sign = np.sign(diff)
    n = diff.size

    def backward(g):
        ga = g * sign / n
        return ga, -ga

    return _make(np.asarray(np.abs(diff).mean(), dtype=diff.dtype), (a, b), backward, "l1_distance")


# --- convolution ------------------------------------------------------------

def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> Tuple[np.ndarray, int, int]:
    """Rows are receptive fields ordered (n, i, j); columns are (c, ki, kj)."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _col2im(cols: np.ndarray, shape, k: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add receptive fields back onto the input grid."""
    n, c, h, w = shape
    cols = cols.reshape(n, ho, wo, c, k, k)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki : ki + (ho - 1) * stride + 1 : stride, kj : kj + (wo - 1) * stride + 1 : stride] += (
                cols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            )
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out)


def _rows_to_nchw(rows: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    return np.ascontiguousarray(rows.reshape(n, h, w, -1).transpose(0, 3, 1, 2))


def _nchw_to_rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(-1, x.shape[1])


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``x`` is NCHW, ``weight`` is (out, in, k, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d input has {c} channels but weight expects {ci}")
    if k != k2:
        raise ShapeError(f"conv2d supports square kernels only, got {k}x{k2}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride {stride} / padding {padding}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"kernel {k} exceeds padded input extent {(h + 2 * padding, w + 2 * padding)}")
    cols, ho, wo = _im2col(x.data, k, stride, padding)
    wmat = weight.data.reshape(o, -1)
    rows = cols @ wmat.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d bias shape {bias.shape} != ({o},)")
        rows = rows + bias.data
        parents.append(bias)

    def backward(g):
        grows = _nchw_to_rows(g)
        gx = _col2im(grows @ wmat, x.shape, k, stride, padding, ho, wo) if x.requires_grad else None
        gw = (grows.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, grows.sum(axis=0)

    return _make(_rows_to_nchw(rows, n, ho, wo), parents, backward, "conv2d")


def conv_transpose2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; ``weight`` is (in, out, k, k).

    Forward equals the input-gradient of ``conv2d`` with the same weight, so
    the output size is ``(H - 1) * stride - 2 * padding + k``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    ci, o, k, k2 = weight.shape
    if ci != c:
        raise ShapeError(f"conv_transpose2d input has {c} channels but weight expects {ci}")
    if k != k2:
        raise ShapeError(f"conv_transpose2d supports square kernels only, got {k}x{k2}")
    ho = (h - 1) * stride - 2 * padding + k
    wo = (w - 1) * stride - 2 * padding + k
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d output would be empty ({ho}x{wo})")
    xrows = _nchw_to_rows(x.data)
    wmat = weight.data.reshape(c, -1)
    out = _col2im(xrows @ wmat, (n, o, ho, wo), k, stride, padding, h, w)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv_transpose2d bias shape {bias.shape} != ({o},)")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        gcols, _, _ = _im2col(g, k, stride, padding)
        gx = _rows_to_nchw(gcols @ wmat.T, n, h, w) if x.requires_grad else None
        gw = (xrows.T @ gcols).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out, parents, backward, "conv_transpose2d")


# --- normalization and regularization ---------------------------------------

def instance_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize every (instance, channel) plane to zero mean / unit variance."""
    if eps <= 0:
        raise ParameterError(f"instance_norm epsilon must be > 0, got {eps}")
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"instance_norm expects NCHW input, got {x.shape}")
    c = x.shape[1]
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    parents = [x]
    y = xhat
    if gamma is not None:
        gamma, beta = as_tensor(gamma), as_tensor(beta)
        if gamma.shape != (c,) or beta.shape != (c,):
            raise ShapeError(f"instance_norm affine params must have shape ({c},)")
        y = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
        parents += [gamma, beta]

    def backward(g):
        gxhat = g if gamma is None else g * gamma.data[None, :, None, None]
        gx = None
        if x.requires_grad:
            gx = inv_std * (
                gxhat
                - gxhat.mean(axis=(2, 3), keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=(2, 3), keepdims=True)
            )
        if gamma is None:
            return (gx,)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _make(y.astype(x.dtype, copy=False), parents, backward, "instance_norm")


def dropout(x, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)``; identity at inference."""
    if not 0 <= p < 1:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode needs an explicit rng")
    scale = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)

    def backward(g):
        return (g * scale,)

    return _make(x.data * scale, (x,), backward, "dropout")


# --- fused classification loss ----------------------------------------------

def cross_entropy(logits, labels: np.ndarray, ignore_index: Optional[int] = None) -> Tensor:
    """Mean per-pixel negative log-softmax of the labelled class.

    ``logits`` is N x C x H x W, ``labels`` is N x H x W integer class indices.
    Pixels equal to ``ignore_index`` are excluded. When every pixel is ignored
    the loss is 0 and an :class:`EmptyLossWarning` is issued.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 4:
        raise ShapeError(f"cross_entropy expects N x C x H x W logits, got {logits.shape}")
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = np.ones(labels.shape, dtype=bool) if ignore_index is None else labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= c))
    if bad.any():
        where = tuple(int(v) for v in np.argwhere(bad)[0])
        raise DataError(
            f"label {int(labels[where])} out of range [0, {c}) at pixel (n, y, x) = {where}"
        )
    count = int(valid.sum())
    if count == 0:
        warnings.warn("all pixels ignored; loss defined as 0", EmptyLossWarning, stacklevel=2)
        return Tensor(np.zeros((), dtype=logits.dtype))
    safe = np.where(valid, labels, 0).astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count

    def backward(g):
        grad = np.exp(logp)
        onehot_sub = np.zeros_like(grad)
        np.put_along_axis(onehot_sub, safe[:, None], 1.0, axis=1)
        grad = (grad - onehot_sub) * valid[:, None] * (g / count)
        return (grad.astype(logits.dtype, copy=False),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")
