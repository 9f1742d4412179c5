"""Tensor layers on NHWC arrays with explicit backward passes.

Each layer's ``forward`` returns ``(output, cache)`` and ``backward`` maps
the output gradient (plus the cache) to input gradients and parameter
gradients.  Nothing here keeps state; batch-norm running statistics are
returned as updates for the caller to apply.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99
LOSS_CLAMP = 1e-7
_CHUNK_ROWS = 1 << 17


# --------------------------------------------------------------------------
# convolution


def _pad_same(x: np.ndarray, k: int) -> np.ndarray:
    p = (k - 1) // 2
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def _columns(xp: np.ndarray, k: int) -> np.ndarray:
    """im2col: (B*H*W, k*k*C) with column order (dy, dx, c)."""
    b, hp, wp, c = xp.shape
    win = sliding_window_view(xp, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    return win.reshape(b * (hp - k + 1) * (wp - k + 1), k * k * c)


def _chunks(b: int, pixels: int):
    step = max(1, _CHUNK_ROWS // max(pixels, 1))
    for start in range(0, b, step):
        yield slice(start, min(b, start + step))


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-size convolution with zero padding (odd square kernels):
    ``out[b,y,x,o] = bias[o] + sum K[dy,dx,c,o] * in[b,y+dy-p,x+dx-p,c]``."""
    k, k2, cin, cout = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernels must be square with odd size, got {k}x{k2}")
    if x.ndim != 4 or x.shape[-1] != cin:
        raise ValueError(f"input of shape {x.shape} does not match a kernel expecting {cin} channels")
    b, h, w, _ = x.shape
    xp = _pad_same(x, k)
    out = np.empty((b, h, w, cout), dtype=np.result_type(x, kernel))
    out[...] = bias
    # one matmul per kernel tap on shifted views
    for dy in range(k):
        for dx in range(k):
            out += xp[:, dy:dy + h, dx:dx + w, :] @ kernel[dy, dx]
    return out


def conv2d_backward(dout: np.ndarray, x: np.ndarray, kernel: np.ndarray):
    """Gradients (dx, dkernel, dbias) of ``conv2d``."""
    k, _, cin, cout = kernel.shape
    b, h, w, _ = x.shape
    p = (k - 1) // 2
    xp = _pad_same(x, k)
    dxp = np.zeros_like(xp)
    for dy in range(k):
        for dx in range(k):
            dxp[:, dy:dy + h, dx:dx + w, :] += dout @ kernel[dy, dx].T
    dk = np.zeros((k * k * cin, cout), dtype=np.result_type(x, kernel))
    for sl in _chunks(b, h * w):
        dk += _columns(xp[sl], k).T @ dout[sl].reshape(-1, cout)
    dbias = dout.reshape(-1, cout).sum(axis=0)
    return dxp[:, p:p + h, p:p + w, :], dk.reshape(k, k, cin, cout), dbias


# --------------------------------------------------------------------------
# batch normalization


def batchnorm_train(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = BN_EPSILON):
    """Normalize with the batch statistics over (batch, height, width).

    Returns (output, cache, batch_mean, batch_var)."""
    axes = tuple(range(x.ndim - 1))
    mean = x.mean(axis=axes, dtype=np.float64)
    var = x.var(axis=axes, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((x - mean.astype(x.dtype)) * inv.astype(x.dtype))
    out = xhat * gamma + beta
    return out, (xhat, inv.astype(x.dtype), gamma), mean, var


def batchnorm_backward(dout: np.ndarray, cache):
    xhat, inv, gamma = cache
    axes = tuple(range(dout.ndim - 1))
    n = dout.size // dout.shape[-1]
    dbeta = dout.sum(axis=axes)
    dgamma = (dout * xhat).sum(axis=axes)
    dxhat = dout * gamma
    dx = (inv / n) * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


def batchnorm_infer(x: np.ndarray, gamma, beta, moving_mean, moving_var, eps: float = BN_EPSILON):
    scale = (gamma / np.sqrt(moving_var + eps)).astype(x.dtype)
    shift = (beta - moving_mean * gamma / np.sqrt(moving_var + eps)).astype(x.dtype)
    return x * scale + shift, scale


def update_moving(moving: np.ndarray, batch: np.ndarray, momentum: float = BN_MOMENTUM) -> np.ndarray:
    return (momentum * moving + (1.0 - momentum) * batch).astype(moving.dtype)


# --------------------------------------------------------------------------
# activations


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_backward(dout: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dout * y * (1 - y)


# --------------------------------------------------------------------------
# pooling


def maxpool_argmax(x: np.ndarray):
    """2x2 max pooling.  Indices are flat positions ``row * W + col`` in the
    input plane; ties go to the smallest flat index."""
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max pooling needs even spatial dims, got {h}x{w}")
    win = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h // 2, w // 2, c, 4)
    local = win.argmax(axis=-1)
    pooled = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(h // 2)[None, :, None, None] + local // 2
    cols = 2 * np.arange(w // 2)[None, None, :, None] + local % 2
    return pooled, rows * w + cols


def unpool(pooled: np.ndarray, indices: np.ndarray, out_shape) -> np.ndarray:
    """Place every pooled value at its recorded flat index; zeros elsewhere."""
    b, h, w, c = out_shape
    if indices.shape != pooled.shape:
        raise ValueError("indices must match the pooled tensor")
    if indices.size and (indices.min() < 0 or indices.max() >= h * w):
        raise IndexError("unpool index out of range")
    out = np.zeros((b, h * w, c), dtype=pooled.dtype)
    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(c)[None, None, None, :]
    out[bi, indices, ci] = pooled
    return out.reshape(b, h, w, c)


def unpool_backward(dout: np.ndarray, indices: np.ndarray) -> np.ndarray:
    b, h, w, c = dout.shape
    flat = dout.reshape(b, h * w, c)
    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(c)[None, None, None, :]
    return flat[bi, indices, ci]


def maxpool_backward(dout: np.ndarray, indices: np.ndarray, in_shape) -> np.ndarray:
    return unpool(dout, indices, in_shape)


def upsample(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample_backward(dout: np.ndarray) -> np.ndarray:
    b, h, w, c = dout.shape
    return dout.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


# --------------------------------------------------------------------------
# loss


def masked_log_loss(p: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood over all gathered pixels and its
    gradient with respect to ``p`` (zero where the clamp is active)."""
    pc = np.clip(p, LOSS_CLAMP, 1 - LOSS_CLAMP)
    loss = -(y * np.log(pc) + (1 - y) * np.log(1 - pc))
    n = p.size
    grad = (pc - y) / (pc * (1 - pc)) / n
    grad = np.where((p > LOSS_CLAMP) & (p < 1 - LOSS_CLAMP), grad, 0).astype(p.dtype)
    return float(loss.mean(dtype=np.float64)), grad
