"""Dense float64 layer kernels with explicit backward rules.

Every forward function returns ``(output, cache)``; the matching
``*_backward`` consumes the upstream gradient and that cache.  Arrays are
plain ``numpy.ndarray`` in NCHW layout.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class DegenerateBatchError(ValueError):
    """Batch statistics requested over a single value per channel."""


class MissingCacheError(RuntimeError):
    """Backward pass requested without a cached forward pass."""


def _check_ndim(name, x, ndim):
    if x.ndim != ndim:
        raise ValueError(f"{name}: expected {ndim}-d array, got shape {x.shape}")


def conv2d(x, w, stride=1, pad=0):
    """Zero-padded cross-correlation without bias.

    x: [N, C, H, W], w: [K, C, kh, kw] -> [N, K, H', W'].
    """
    _check_ndim("conv2d x", x, 4)
    _check_ndim("conv2d w", w, 4)
    n, c, h, wd = x.shape
    k, cw, kh, kw = w.shape
    if c != cw:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {cw}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ValueError("conv2d: kernel larger than padded input")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # im2col: rows are output pixels (n, i, j), columns are (a, b, c)
    cols = win.transpose(0, 2, 3, 4, 5, 1).reshape(n * ho * wo, kh * kw * c)
    y = cols @ w.transpose(0, 2, 3, 1).reshape(k, -1).T
    y = np.ascontiguousarray(y.reshape(n, ho, wo, k).transpose(0, 3, 1, 2))
    return y, (xp.shape, cols, w, stride, pad)


def conv2d_backward(dy, cache):
    """Returns (dx, dw)."""
    xp_shape, cols, w, stride, pad = cache
    k, c, kh, kw = w.shape
    n, _, ho, wo = dy.shape
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
    dw = (dy_mat.T @ cols).reshape(k, kh, kw, c).transpose(0, 3, 1, 2)
    dcols = (dy_mat @ w.transpose(0, 2, 3, 1).reshape(k, -1)).reshape(n, ho, wo, kh, kw, c)
    # col2im accumulated channels-last, fixed (a, b) order
    dxp = np.zeros((xp_shape[0], xp_shape[2], xp_shape[3], xp_shape[1]))
    for a in range(kh):
        for b in range(kw):
            dxp[:, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride, :] += (
                dcols[:, :, :, a, b, :])
    if pad:
        dxp = dxp[:, pad:-pad, pad:-pad, :]
    return np.ascontiguousarray(dxp.transpose(0, 3, 1, 2)), np.ascontiguousarray(dw)


@dataclass
class BatchNormParams:
    """Affine parameters and running statistics of one batchnorm layer."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def identity(cls, channels):
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels))

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("batchnorm eps must be positive")
        if np.any(self.running_var < 0):
            raise ValueError("batchnorm running variance must be non-negative")


def batch_norm(x, params: BatchNormParams, mode="train"):
    """Per-channel normalization over (N, H, W).

    In train mode the minibatch statistics are used and the running
    statistics are updated in place (EMA with ``params.momentum`` as decay,
    unbiased variance).  Eval mode uses the running statistics.
    """
    _check_ndim("batch_norm x", x, 4)
    if x.shape[1] != params.gamma.shape[0]:
        raise ValueError("batch_norm: channel count mismatch")
    g = params.gamma[None, :, None, None]
    b = params.beta[None, :, None, None]
    if mode == "train":
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise DegenerateBatchError("batch_norm: train mode needs N*H*W >= 2 per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        rho = params.momentum
        params.running_mean[...] = rho * params.running_mean + (1 - rho) * mean
        params.running_var[...] = rho * params.running_var + (1 - rho) * var * (m / (m - 1))
    elif mode == "eval":
        mean, var = params.running_mean, params.running_var
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + params.eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    return xhat * g + b, (xhat, inv_std, params.gamma, mode)


def batch_norm_backward(dy, cache):
    """Returns (dx, dgamma, dbeta)."""
    xhat, inv_std, gamma, mode = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    if mode == "eval":
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    mean_dxhat = dxhat.sum(axis=(0, 2, 3)) / m
    mean_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3)) / m
    dx = (dxhat - mean_dxhat[None, :, None, None] - xhat * mean_dxhat_xhat[None, :, None, None])
    return dx * inv_std[None, :, None, None], dgamma, dbeta


def relu(x):
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(dy, mask):
    return np.where(mask, dy, 0.0)


def gap(x):
    """Global average pooling, [N, K, h, w] -> [N, K]."""
    _check_ndim("gap x", x, 4)
    return x.mean(axis=(2, 3)), x.shape


def gap_backward(dy, shape):
    n, k, h, w = shape
    return np.broadcast_to((dy / (h * w))[:, :, None, None], shape).copy()


def linear(x, w, b):
    """y = x @ w + b with x: [N, K], w: [K, C], b: [C]."""
    _check_ndim("linear x", x, 2)
    _check_ndim("linear w", w, 2)
    if x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"linear: incompatible shapes x{x.shape} w{w.shape} b{b.shape}")
    return x @ w + b, (x, w)


def linear_backward(dy, cache):
    """Returns (dx, dw, db)."""
    x, w = cache
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and softmax probabilities (row-max shifted)."""
    _check_ndim("logits", logits, 2)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError("softmax_cross_entropy: one label per row required")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(n), labels].mean()
    return float(loss), np.exp(log_probs)


def softmax_cross_entropy_backward(probs, labels):
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return d / n
