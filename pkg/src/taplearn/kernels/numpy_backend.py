"""Reference numpy implementations of the hot per-tick kernels.

Array layout is batch-first, time-major, channels-last: [B, T, C].
The compiled backend in _ckern.pyx mirrors these signatures exactly;
parity tests compare the two element-by-element.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"


def conv1d_causal_fwd(x, w, b, dilation):
    """Causal dilated conv: y[t] = b + sum_j x[t - j*dilation] @ w[j].

    x: [B, T, Cin], w: [K, Cin, Cout], b: [Cout]. Positions before the
    window start contribute zero (left padding only).
    """
    B, T, _ = x.shape
    K = w.shape[0]
    y = np.matmul(x, w[0])
    y += b
    for j in range(1, K):
        s = j * dilation
        if s >= T:
            break
        y[:, s:, :] += x[:, : T - s, :] @ w[j]
    return y


def conv1d_causal_bwd(x, w, dy, dilation, need_dx=True):
    """Gradients of conv1d_causal_fwd w.r.t. input, weights, bias.

    need_dx=False skips the input gradient (the first block never
    propagates into the features).
    """
    B, T, _ = x.shape
    K = w.shape[0]
    dx = dy @ w[0].T if need_dx else None
    dw = np.zeros_like(w)
    db = dy.sum(axis=(0, 1))
    dw[0] = np.matmul(x.transpose(0, 2, 1), dy).sum(axis=0)
    for j in range(1, K):
        s = j * dilation
        if s >= T:
            break
        if need_dx:
            dx[:, : T - s, :] += dy[:, s:, :] @ w[j].T
        dw[j] = np.matmul(x[:, : T - s].transpose(0, 2, 1), dy[:, s:]).sum(axis=0)
    return dx, dw, db


def relu_fwd(x):
    return np.maximum(x, 0.0)


def relu_bwd(dy, y):
    return np.where(y > 0.0, dy, 0.0)


def maxpool_fwd(x, stride):
    """Non-overlapping temporal max pool; trailing remainder is dropped."""
    B, T, C = x.shape
    t2 = T // stride
    xr = x[:, : t2 * stride].reshape(B, t2, stride, C)
    idx = xr.argmax(axis=2)
    y = np.take_along_axis(xr, idx[:, :, None, :], axis=2)[:, :, 0, :]
    return y, idx


def maxpool_bwd(dy, idx, T, stride):
    B, t2, C = dy.shape
    dx = np.zeros((B, T, C), dtype=dy.dtype)
    dxr = dx[:, : t2 * stride].reshape(B, t2, stride, C)
    np.put_along_axis(dxr, idx[:, :, None, :], dy[:, :, None, :], axis=2)
    return dx


def layernorm_fwd(x, gain, bias, eps):
    """Normalize over the channel axis at each (batch, time) position."""
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * rstd
    return xhat * gain + bias, xhat, rstd


def layernorm_bwd(dy, xhat, gain, rstd):
    C = xhat.shape[-1]
    dyg = dy * gain
    s1 = dyg.sum(axis=-1, keepdims=True)
    s2 = (dyg * xhat).sum(axis=-1, keepdims=True)
    dx = (dyg - s1 / C - xhat * (s2 / C)) * rstd
    reduce_axes = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=reduce_axes)
    dbias = dy.sum(axis=reduce_axes)
    return dx, dgain, dbias


def softmax_fwd(x):
    """Row softmax over the last axis."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(dy, y):
    inner = (dy * y).sum(axis=-1, keepdims=True)
    return (dy - inner) * y


def adam_step(p, g, m, v, lr, beta1, beta2, eps, t):
    """One bias-corrected adaptive-moment update, in place."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)
