"""Hot inner-loop kernels with a numba fast path and a pure-numpy fallback.

The backbone's cost is dominated by 3x3/stride-1/same-pad convolution and 2x2
max pooling over NHWC float64 maps. Two interchangeable backends implement
them:

  * numba: fused direct-convolution kernels (one pass over the image, no
    intermediate column buffers) compiled with @njit(parallel=True); the
    parallel loop runs over the batch axis only and per-image partial sums
    are reduced in a fixed order, so results are deterministic.
  * numpy: im2col + BLAS matmul, the classic vectorized formulation.

Backend selection: env var ``AUMETA_BACKEND=numpy`` forces the fallback;
``numba`` (or unset) uses the jitted kernels, degrading to numpy with a
warning if numba is unavailable. `set_backend` switches at runtime (the
benchmark and the equivalence tests exercise both in one process).
"""

from __future__ import annotations

import logging
import os

import numpy as np

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# pure-numpy backend
# ---------------------------------------------------------------------------

def im2col3(x: np.ndarray) -> np.ndarray:
    """(B,H,W,C) -> (B*H*W, 9*C) patches of the 3x3/pad-1 neighbourhoods."""
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1 : h + 1, 1 : w + 1, :] = x
    cols = np.empty((b, h, w, 3, 3, c), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, ky, kx, :] = xp[:, ky : ky + h, kx : kx + w, :]
    return cols.reshape(b * h * w, 9 * c)


def col2im3(dcols: np.ndarray, b: int, h: int, w: int, c: int) -> np.ndarray:
    """Adjoint of im2col3: scatter-add columns back to (B,H,W,C)."""
    d = dcols.reshape(b, h, w, 3, 3, c)
    xp = np.zeros((b, h + 2, w + 2, c), dtype=dcols.dtype)
    for ky in range(3):
        for kx in range(3):
            xp[:, ky : ky + h, kx : kx + w, :] += d[:, :, :, ky, kx, :]
    return xp[:, 1 : h + 1, 1 : w + 1, :]


def conv3x3_forward_numpy(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    bs, h, ww, cin = x.shape
    cout = w.shape[3]
    y = im2col3(x) @ w.reshape(9 * cin, cout)
    y += b
    return y.reshape(bs, h, ww, cout)


def conv3x3_backward_numpy(x: np.ndarray, w: np.ndarray, dy: np.ndarray):
    bs, h, ww, cin = x.shape
    cout = w.shape[3]
    dyf = dy.reshape(bs * h * ww, cout)
    cols = im2col3(x)
    dw = (cols.T @ dyf).reshape(w.shape)
    db = dyf.sum(axis=0)
    dcols = dyf @ w.reshape(9 * cin, cout).T
    dx = col2im3(dcols, bs, h, ww, cin)
    return dx, dw, db


def maxpool2_forward_numpy(x: np.ndarray):
    """(B,H,W,C) -> pooled (B,H/2,W/2,C) plus argmax in {0..3} (ky*2+kx)."""
    b, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    windows = (
        x.reshape(b, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h2, w2, c, 4)
    )
    arg = windows.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(windows, arg[..., None].astype(np.int64), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2_backward_numpy(dout: np.ndarray, arg: np.ndarray, h: int, w: int) -> np.ndarray:
    b, h2, w2, c = dout.shape
    windows = np.zeros((b, h2, w2, c, 4), dtype=dout.dtype)
    np.put_along_axis(windows, arg[..., None].astype(np.int64), dout[..., None], axis=-1)
    return (
        windows.reshape(b, h2, w2, c, 2, 2)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(b, h, w, c)
        .copy()
    )


_NUMPY_BACKEND = {
    "conv3x3_forward": conv3x3_forward_numpy,
    "conv3x3_backward": conv3x3_backward_numpy,
    "maxpool2_forward": maxpool2_forward_numpy,
    "maxpool2_backward": maxpool2_backward_numpy,
}


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

def _build_numba_backend():
    from numba import njit, prange

    @njit(cache=True, parallel=True)
    def conv3x3_forward_nb(x, w, b):
        bs, h, ww, ci = x.shape
        co = w.shape[3]
        y = np.empty((bs, h, ww, co), dtype=x.dtype)
        for bi in prange(bs):
            for yy in range(h):
                for xx in range(ww):
                    for c in range(co):
                        y[bi, yy, xx, c] = b[c]
                for ky in range(3):
                    sy = yy + ky - 1
                    if sy < 0 or sy >= h:
                        continue
                    for kx in range(3):
                        x0 = max(0, 1 - kx)
                        x1 = min(ww, ww + 1 - kx)
                        for xx in range(x0, x1):
                            sx = xx + kx - 1
                            for c in range(ci):
                                v = x[bi, sy, sx, c]
                                for o in range(co):
                                    y[bi, yy, xx, o] += v * w[ky, kx, c, o]
        return y

    @njit(cache=True, parallel=True)
    def conv3x3_backward_nb(x, w, dy):
        bs, h, ww, ci = x.shape
        co = w.shape[3]
        dx = np.zeros((bs, h, ww, ci), dtype=x.dtype)
        dw_part = np.zeros((bs, 3, 3, ci, co), dtype=x.dtype)
        db_part = np.zeros((bs, co), dtype=x.dtype)
        for bi in prange(bs):
            for yy in range(h):
                for xx in range(ww):
                    for o in range(co):
                        db_part[bi, o] += dy[bi, yy, xx, o]
                    for ky in range(3):
                        sy = yy + ky - 1
                        if sy < 0 or sy >= h:
                            continue
                        for kx in range(3):
                            sx = xx + kx - 1
                            if sx < 0 or sx >= ww:
                                continue
                            for c in range(ci):
                                xv = x[bi, sy, sx, c]
                                acc = 0.0
                                for o in range(co):
                                    d = dy[bi, yy, xx, o]
                                    dw_part[bi, ky, kx, c, o] += xv * d
                                    acc += d * w[ky, kx, c, o]
                                dx[bi, sy, sx, c] += acc
        dw = np.zeros((3, 3, ci, co), dtype=x.dtype)
        db = np.zeros(co, dtype=x.dtype)
        for bi in range(bs):  # fixed order: deterministic reduction
            dw += dw_part[bi]
            db += db_part[bi]
        return dx, dw, db

    @njit(cache=True, parallel=True)
    def maxpool2_forward_nb(x):
        bs, h, w, c = x.shape
        h2, w2 = h // 2, w // 2
        out = np.empty((bs, h2, w2, c), dtype=x.dtype)
        arg = np.empty((bs, h2, w2, c), dtype=np.int8)
        for bi in prange(bs):
            for y in range(h2):
                for xx in range(w2):
                    for ch in range(c):
                        best = x[bi, 2 * y, 2 * xx, ch]
                        bk = 0
                        for k in range(1, 4):
                            v = x[bi, 2 * y + k // 2, 2 * xx + k % 2, ch]
                            if v > best:
                                best = v
                                bk = k
                        out[bi, y, xx, ch] = best
                        arg[bi, y, xx, ch] = bk
        return out, arg

    @njit(cache=True, parallel=True)
    def maxpool2_backward_nb(dout, arg, h, w):
        bs, h2, w2, c = dout.shape
        dx = np.zeros((bs, h, w, c), dtype=dout.dtype)
        for bi in prange(bs):
            for y in range(h2):
                for xx in range(w2):
                    for ch in range(c):
                        k = arg[bi, y, xx, ch]
                        dx[bi, 2 * y + k // 2, 2 * xx + k % 2, ch] = dout[bi, y, xx, ch]
        return dx

    return {
        "conv3x3_forward": conv3x3_forward_nb,
        "conv3x3_backward": conv3x3_backward_nb,
        "maxpool2_forward": maxpool2_forward_nb,
        "maxpool2_backward": maxpool2_backward_nb,
    }


_BACKENDS = {"numpy": _NUMPY_BACKEND}
_active_name = None
_active = None


def available_backends():
    names = ["numpy"]
    try:
        import numba  # noqa: F401

        names.append("numba")
    except ImportError:
        pass
    return names


def set_backend(name: str) -> None:
    """Select the kernel backend ('numba' or 'numpy') for subsequent calls."""
    global _active_name, _active
    if name == "numba" and "numba" not in _BACKENDS:
        _BACKENDS["numba"] = _build_numba_backend()
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}")
    _active_name = name
    _active = _BACKENDS[name]


def get_backend() -> str:
    return _active_name


def _initial_backend() -> str:
    requested = os.environ.get("AUMETA_BACKEND", "numba").strip().lower()
    if requested not in ("numba", "numpy"):
        raise ValueError(f"AUMETA_BACKEND must be 'numba' or 'numpy', got {requested!r}")
    if requested == "numba":
        try:
            import numba  # noqa: F401
        except ImportError:
            logger.warning("numba unavailable; falling back to pure-numpy kernels")
            return "numpy"
    return requested


set_backend(_initial_backend())


# dispatchers -- the layer code calls these


def conv3x3_forward(x, w, b):
    return _active["conv3x3_forward"](x, w, b)


def conv3x3_backward(x, w, dy):
    return _active["conv3x3_backward"](x, w, dy)


def maxpool2_forward(x):
    return _active["maxpool2_forward"](x)


def maxpool2_backward(dout, arg, h, w):
    return _active["maxpool2_backward"](dout, arg, h, w)
