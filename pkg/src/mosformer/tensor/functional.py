"""Fused differentiable kernels.

Each kernel computes its forward pass in numpy and attaches a hand-written
backward. Backward bodies that the gradient checker exercises by name are
module-level functions so they can be swapped out in negative-control tests.
"""

from __future__ import annotations

import functools
import math
from typing import Optional

import numpy as np
from scipy.special import erf

from ..exceptions import DimensionError
from .core import Tensor, _result, as_tensor, unbroadcast


# ------------------------------------------------------------------- softmax
def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` using max-subtraction for stability."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------- layer norm
def _layer_norm_backward(g, xhat, inv_std, gamma):
    d = xhat.shape[-1]
    gx = g * gamma
    gin = inv_std / d * (d * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
    lead = tuple(range(g.ndim - 1))
    return gin, (g * xhat).sum(axis=lead), g.sum(axis=lead)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise each token over its last (channel) axis, then apply ``gamma``/``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"affine shapes {gamma.shape}/{beta.shape} do not match channel dim {x.shape[-1]}")
    mu = x.data.mean(-1, keepdims=True)
    var = x.data.var(-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data
    return _result(out, (x, gamma, beta), lambda g: _layer_norm_backward(g, xhat, inv_std, gamma.data))


# ---------------------------------------------------------------- batch norm
def batch_norm(
    x,
    gamma,
    beta,
    running_mean: Optional[np.ndarray],
    running_var: Optional[np.ndarray],
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Batch normalisation over (N, H, W) for NCHW input.

    In training mode the batch statistics are used and, when
    ``update_stats`` is set, the running buffers are updated in place as
    ``running = momentum * running + (1 - momentum) * batch`` (unbiased
    variance). In eval mode the running buffers are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats and running_mean is not None:
            n = x.data.size // x.shape[1]
            unbiased = var * (n / max(n - 1, 1))
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mu
            running_var *= momentum
            running_var += (1.0 - momentum) * unbiased
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(shape)
    xhat = (x.data - mu.astype(x.dtype).reshape(shape)) * inv_std
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        gx = g * gamma.data.reshape(shape)
        if training:
            n = g.size // g.shape[1]
            gin = inv_std / n * (
                n * gx - gx.sum(axis=axes, keepdims=True) - xhat * (gx * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gin = gx * inv_std
        return gin, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(out, (x, gamma, beta), backward)


# ------------------------------------------------------------------- GELU
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _result(out, (x,), backward)


# -------------------------------------------------------------------- linear
def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` laid out as (in, out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear input dim {x.shape[-1]} != weight rows {weight.shape[0]}")
    lead = x.shape[:-1]
    flat = x.data.reshape(-1, x.shape[-1])
    out = flat @ weight.data
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = flat.T @ g2 if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


# ------------------------------------------------------------------ conv2d
def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (N×C×H×W or C×H×W) with ``weight`` (O×C×kh×kw).

    Implemented as a single GEMM over an im2col buffer.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects N×C×H×W input and O×C×kh×kw weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if cw != c:
        raise DimensionError(f"conv2d channel mismatch: input {c}, weight {cw}")
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d output extent would be {ho}×{wo} for input {h}×{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    if kh == 1 and kw == 1:
        patches = xp[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
        cols = patches.transpose(1, 0, 2, 3).reshape(c, -1)
    else:
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, -1)
    wmat = weight.data.reshape(o, -1)
    out = wmat @ cols
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[:, None]
    out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(o, -1)
        grads = []
        if x.requires_grad:
            dcols = (wmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                        dcols[:, i, j].transpose(1, 0, 2, 3)
                    )
            grads.append(dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp)
        else:
            grads.append(None)
        grads.append((gmat @ cols.T).reshape(weight.shape) if weight.requires_grad else None)
        if bias is not None:
            grads.append(gmat.sum(axis=1))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    result = _result(np.ascontiguousarray(out), parents, backward)
    if squeeze:
        result = result.reshape(result.shape[1:])
    return result


# --------------------------------------------------------------- resampling
@functools.lru_cache(maxsize=64)
def _bilinear_matrix(src: int, dst: int, dtype_name: str) -> np.ndarray:
    mat = np.zeros((dst, src), dtype=np.dtype(dtype_name))
    scale = src / dst
    for i in range(dst):
        pos = max((i + 0.5) * scale - 0.5, 0.0)
        lo = min(int(np.floor(pos)), src - 1)
        hi = min(lo + 1, src - 1)
        frac = pos - lo
        mat[i, lo] += 1.0 - frac
        mat[i, hi] += frac
    mat.flags.writeable = False
    return mat


def bilinear_matrix(src: int, dst: int, dtype=np.float64) -> np.ndarray:
    """Interpolation matrix (dst × src), half-pixel centres (align_corners=False)."""
    return _bilinear_matrix(src, dst, np.dtype(dtype).name)


def resize_bilinear(x, height: int, width: int) -> Tensor:
    """Bilinearly resample the last two axes of ``x`` to ``height`` × ``width``."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    ah = bilinear_matrix(h, height, x.dtype)
    aw = bilinear_matrix(w, width, x.dtype)
    out = ah @ x.data @ aw.T
    return _result(out, (x,), lambda g: (ah.T @ g @ aw,))


def upsample2x(x) -> Tensor:
    h, w = x.shape[-2:]
    return resize_bilinear(x, 2 * h, 2 * w)


def add_constant(x, const: np.ndarray) -> Tensor:
    """``x + const`` where ``const`` never receives a gradient."""
    x = as_tensor(x)
    return _result(x.data + const, (x,), lambda g: (unbroadcast(g, x.shape),))
