"""Differentiable neural-network primitives built on :mod:`jctnet.tensor`."""

from __future__ import annotations

import contextlib
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import Tensor, linear, matmul, roll  # noqa: F401  (re-exported primitives)

MASK_VALUE = -1e9

_branch_log: list | None = None


@contextlib.contextmanager
def record_branches():
    """Collect the discrete choices (ReLU signs, max-pool winners) of every forward pass run inside.

    Two evaluations with equal logs lie on the same smooth piece of the network.
    """
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def conv_output_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    # xp: [B, C, Hp, Wp] -> [B, Ho, Wo, C, k, k]
    span = dilation * (k - 1) + 1
    win = sliding_window_view(xp, (span, span), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride, ::dilation, ::dilation]
    return win.transpose(0, 2, 3, 1, 4, 5)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-D cross-correlation with zero padding and dilation.

    Shapes: ``x`` is ``[B, Cin, H, W]``, ``weight`` is ``[Cout, Cin, k, k]``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    b, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    if k != k2:
        raise ValueError("conv2d supports square kernels only")
    ho = conv_output_size(h, k, stride, padding, dilation)
    wo = conv_output_size(w, k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output extent non-positive: {ho}x{wo}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, dilation, ho, wo).reshape(b * ho * wo, cin * k * k)
    wmat = weight.data.reshape(cout, cin * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, cout)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(b, ho, wo, cin, k, k).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    hs, ws = i * dilation, j * dilation
                    gxp[:, :, hs : hs + (ho - 1) * stride + 1 : stride, ws : ws + (wo - 1) * stride + 1 : stride] += gcols[
                        :, :, i, j
                    ]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._result(np.ascontiguousarray(out), parents, backward, "conv2d")


def maxpool2d(x: Tensor, k: int = 2, stride: int | None = None) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first element in scan order."""
    stride = k if stride is None else stride
    if stride != k:
        raise ValueError("maxpool2d supports stride == kernel only")
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"maxpool2d extents {h}x{w} not divisible by {k}")
    ho, wo = h // k, w // k
    win = x.data.reshape(b, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    if _branch_log is not None:
        _branch_log.append(arg)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros((b, c, ho, wo, k * k), dtype=g.dtype)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(b, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return (gx,)

    return Tensor._result(out, (x,), backward, "maxpool2d")


class RunningStats:
    """Per-channel running mean/variance buffers for batch normalization."""

    def __init__(self, channels: int, dtype=np.float64):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Batch normalization over (B, H, W) per channel.

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance for the running estimate).
    """
    b, c, h, w = x.shape
    if training:
        m = b * h * w
        if m < 2:
            raise ValueError("batchnorm2d in train mode needs more than one value per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running.mean *= 1 - momentum
        running.mean += momentum * mu
        running.var *= 1 - momentum
        running.var += momentum * var * m / (m - 1)
    else:
        mu, var = running.mean, running.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
                mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = (gxhat - mean_g - xhat * mean_gx) * inv[None, :, None, None]
            else:
                gx = gxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return Tensor._result(out, (x, gamma, beta), backward, "batchnorm2d")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis per token, then apply the affine transform."""
    d = x.shape[-1]
    if d < 2:
        raise ValueError("layernorm needs a last dimension of at least 2")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            gx = (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)) * inv
        return gx, ggamma, gbeta

    return Tensor._result(out, (x, gamma, beta), backward, "layernorm")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _branch_log is not None:
        _branch_log.append(mask)

    def backward(g):
        return (g * mask,)

    return Tensor._result(x.data * mask, (x,), backward, "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU: ``0.5 * x * (1 + erf(x / sqrt(2)))``."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return Tensor._result(x.data * cdf, (x,), backward, "gelu")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), backward, "softmax")


def smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over samples of 0.5*d^2 (|d| < 1) or |d| - 0.5, with d = pred - target."""
    if pred.shape != target.shape:
        raise ValueError(f"smooth_l1 shape mismatch {pred.shape} vs {target.shape}")
    n = pred.data.size
    if n == 0:
        raise ValueError("smooth_l1 needs at least one sample")
    d = pred.data - target.data
    small = np.abs(d) < 1.0
    per = np.where(small, 0.5 * d * d, np.abs(d) - 0.5)

    def backward(g):
        gd = np.where(small, d, np.sign(d)) * (g / n)
        return gd, -gd

    return Tensor._result(np.asarray(per.mean()), (pred, target), backward, "smooth_l1")
