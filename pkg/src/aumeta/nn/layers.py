"""Differentiable building blocks: forward returns (output, cache), backward
consumes (grad_output, cache).

All gradients are hand-derived; tests/test_layers.py checks every one of them
against central finite differences. Convolution is im2col + BLAS matmul with
the column matrix recomputed in the backward pass (cheaper than holding the
~10x-inflated column buffers across the whole chain at 224x224).
"""

from __future__ import annotations

import numpy as np

from . import kernels


# ---------------------------------------------------------------------------
# convolution (3x3, stride 1, same padding) and pooling
# ---------------------------------------------------------------------------

def conv3x3_forward(x, w, b):
    """x (B,H,W,Cin), w (3,3,Cin,Cout), b (Cout) -> y (B,H,W,Cout)."""
    y = kernels.conv3x3_forward(x, w, b)
    return y, (x, w)


def conv3x3_backward(dy, cache):
    x, w = cache
    return kernels.conv3x3_backward(x, w, np.ascontiguousarray(dy))


def maxpool2_forward(x):
    bs, h, w, c = x.shape
    out, arg = kernels.maxpool2_forward(x)
    return out, (arg, h, w)


def maxpool2_backward(dy, cache):
    arg, h, w = cache
    return kernels.maxpool2_backward(dy, arg, h, w)


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


# ---------------------------------------------------------------------------
# dense layers
# ---------------------------------------------------------------------------

def linear_forward(x, w, b):
    """x (..., Din), w (Din, Dout), b (Dout)."""
    return x @ w + b, (x, w)


def linear_backward(dy, cache):
    x, w = cache
    xf = x.reshape(-1, x.shape[-1])
    dyf = dy.reshape(-1, dy.shape[-1])
    dw = xf.T @ dyf
    db = dyf.sum(axis=0)
    dx = (dyf @ w.T).reshape(x.shape)
    return dx, dw, db


def grouped_linear_forward(x, w, b):
    """Independent linear map per leading group.

    x (G,B,Din), w (G,Din,Dout), b (G,Dout) -> y (G,B,Dout). Used for the 2C
    per-region branches and the C per-AU heads, which share no weights.
    """
    y = np.matmul(x, w) + b[:, None, :]
    return y, (x, w)


def grouped_linear_backward(dy, cache):
    x, w = cache
    dw = np.matmul(x.transpose(0, 2, 1), dy)
    db = dy.sum(axis=1)
    dx = np.matmul(dy, w.transpose(0, 2, 1))
    return dx, dw, db


# ---------------------------------------------------------------------------
# normalization / activations
# ---------------------------------------------------------------------------

def layernorm_forward(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis; gamma/beta shaped (D,)."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layernorm_backward(dy, cache):
    xhat, inv, gamma = cache
    d = xhat.shape[-1]
    dxhat = dy * gamma
    dgamma = (dy * xhat).reshape(-1, d).sum(axis=0)
    dbeta = dy.reshape(-1, d).sum(axis=0)
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dgamma, dbeta


def softmax_forward(x):
    """Softmax over the last axis."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return p, p


def softmax_backward(dy, p):
    return p * (dy - (dy * p).sum(axis=-1, keepdims=True))


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def dropout_forward(x, rate, rng):
    """Inverted dropout; pass rng=None (or rate 0) to disable."""
    if rng is None or rate <= 0.0:
        return x, None
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return x * mask, mask


def dropout_backward(dy, mask):
    if mask is None:
        return dy
    return dy * mask
