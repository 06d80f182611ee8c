"""Multi-head self-attention over AU tokens, forward and backward.

No positional encoding: tokens are semantically indexed AU embeddings, so the
whole block is permutation-equivariant (a property the tests assert exactly).
"""

from __future__ import annotations

import numpy as np

from .layers import dropout_backward, dropout_forward, linear_backward, linear_forward, softmax_backward, softmax_forward


def _split_heads(x, n_heads):
    b, t, e = x.shape
    dh = e // n_heads
    return x.reshape(b, t, n_heads, dh).transpose(0, 2, 1, 3)  # (B,h,T,dh)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def mha_forward(x, p, prefix, n_heads, dropout_rate=0.0, rng=None):
    """x (B,T,E) -> (out (B,T,E), attention (B,h,T,T), cache).

    Weights come from ParameterSet `p` under `{prefix}.wq/bq/wk/bk/wv/bv/wo/bo`.
    """
    q, cq = linear_forward(x, p[f"{prefix}.wq"], p[f"{prefix}.bq"])
    k, ck = linear_forward(x, p[f"{prefix}.wk"], p[f"{prefix}.bk"])
    v, cv = linear_forward(x, p[f"{prefix}.wv"], p[f"{prefix}.bv"])
    qh, kh, vh = (_split_heads(a, n_heads) for a in (q, k, v))
    dh = qh.shape[-1]
    scale = 1.0 / np.sqrt(dh)
    scores = np.matmul(qh, kh.transpose(0, 1, 3, 2)) * scale
    attn, cs = softmax_forward(scores)
    ctx = np.matmul(attn, vh)
    merged = _merge_heads(ctx)
    out, co = linear_forward(merged, p[f"{prefix}.wo"], p[f"{prefix}.bo"])
    out, dmask = dropout_forward(out, dropout_rate, rng)
    cache = (cq, ck, cv, qh, kh, vh, attn, cs, scale, co, dmask, n_heads)
    return out, attn, cache


def mha_backward(dout, cache):
    """Returns (dx, grads dict keyed wq/bq/.../wo/bo)."""
    cq, ck, cv, qh, kh, vh, attn, cs, scale, co, dmask, n_heads = cache
    dout = dropout_backward(dout, dmask)
    dmerged, dwo, dbo = linear_backward(dout, co)
    dctx = _split_heads(dmerged, n_heads)
    dattn = np.matmul(dctx, vh.transpose(0, 1, 3, 2))
    dvh = np.matmul(attn.transpose(0, 1, 3, 2), dctx)
    dscores = softmax_backward(dattn, cs) * scale
    dqh = np.matmul(dscores, kh)
    dkh = np.matmul(dscores.transpose(0, 1, 3, 2), qh)
    dq, dk, dv = (_merge_heads(a) for a in (dqh, dkh, dvh))
    dx_q, dwq, dbq = linear_backward(dq, cq)
    dx_k, dwk, dbk = linear_backward(dk, ck)
    dx_v, dwv, dbv = linear_backward(dv, cv)
    dx = dx_q + dx_k + dx_v
    grads = {
        "wq": dwq, "bq": dbq, "wk": dwk, "bk": dbk,
        "wv": dwv, "bv": dbv, "wo": dwo, "bo": dbo,
    }
    return dx, grads
