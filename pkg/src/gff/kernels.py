"""Hot row-wise kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``GFF_NUMBA`` is not set to ``0``. Both paths implement the same
math; summation order differs, so results agree to rounding, not bitwise.

All kernels take 2-D C-contiguous arrays (rows x features) and return new
arrays of the same dtype.
"""

from __future__ import annotations

import math
import os

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def _numba_requested() -> bool:
    return os.environ.get("GFF_NUMBA", "1").strip().lower() not in ("0", "false", "off", "no")


# ---------------------------------------------------------------------------
# numpy reference path


def layernorm_fwd_np(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layernorm_bwd_np(dy, xhat, rstd, gamma):
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    g = dy * gamma
    dx = (g - g.mean(axis=1, keepdims=True) - xhat * (g * xhat).mean(axis=1, keepdims=True)) * rstd[:, None]
    return dx, dgamma, dbeta


def softmax_fwd_np(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd_np(dy, y):
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


def gelu_fwd_np(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x**3)))


def gelu_bwd_np(dy, x):
    u = GELU_C * (x + GELU_A * x**3)
    t = np.tanh(u)
    du = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def bilinear_resize_np(img, out_h, out_w):
    """Half-pixel-centred bilinear resize of an H x W x C image."""
    in_h, in_w = img.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5, 0.0, in_h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5, 0.0, in_w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1.0 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1.0 - wx) + img[y1][:, x1] * wx
    return top * (1.0 - wy) + bot * wy


# ---------------------------------------------------------------------------
# numba path

try:  # pragma: no cover - exercised implicitly when numba is present
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    _HAVE_NUMBA = False


if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def layernorm_fwd_nb(x, gamma, beta, eps):
        rows, d = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(rows, dtype=x.dtype)
        for i in range(rows):
            m = 0.0
            for j in range(d):
                m += x[i, j]
            m /= d
            v = 0.0
            for j in range(d):
                c = x[i, j] - m
                v += c * c
            v /= d
            r = 1.0 / math.sqrt(v + eps)
            rstd[i] = r
            for j in range(d):
                h = (x[i, j] - m) * r
                xhat[i, j] = h
                out[i, j] = h * gamma[j] + beta[j]
        return out, xhat, rstd

    @numba.njit(cache=True)
    def layernorm_bwd_nb(dy, xhat, rstd, gamma):
        rows, d = dy.shape
        dx = np.empty_like(dy)
        dgamma = np.zeros(d, dtype=dy.dtype)
        dbeta = np.zeros(d, dtype=dy.dtype)
        for i in range(rows):
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                g = dy[i, j] * gamma[j]
                s1 += g
                s2 += g * xhat[i, j]
                dgamma[j] += dy[i, j] * xhat[i, j]
                dbeta[j] += dy[i, j]
            s1 /= d
            s2 /= d
            for j in range(d):
                dx[i, j] = (dy[i, j] * gamma[j] - s1 - xhat[i, j] * s2) * rstd[i]
        return dx, dgamma, dbeta

    @numba.njit(cache=True)
    def softmax_fwd_nb(x):
        rows, n = x.shape
        out = np.empty_like(x)
        for i in range(rows):
            mx = x[i, 0]
            for j in range(1, n):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(n):
                e = math.exp(x[i, j] - mx)
                out[i, j] = e
                s += e
            for j in range(n):
                out[i, j] /= s
        return out

    @numba.njit(cache=True)
    def softmax_bwd_nb(dy, y):
        rows, n = dy.shape
        dx = np.empty_like(dy)
        for i in range(rows):
            s = 0.0
            for j in range(n):
                s += dy[i, j] * y[i, j]
            for j in range(n):
                dx[i, j] = y[i, j] * (dy[i, j] - s)
        return dx

    @numba.njit(cache=True)
    def gelu_fwd_nb(x):
        rows, n = x.shape
        out = np.empty_like(x)
        for i in range(rows):
            for j in range(n):
                v = x[i, j]
                out[i, j] = 0.5 * v * (1.0 + math.tanh(GELU_C * (v + GELU_A * v * v * v)))
        return out

    @numba.njit(cache=True)
    def gelu_bwd_nb(dy, x):
        rows, n = x.shape
        out = np.empty_like(x)
        for i in range(rows):
            for j in range(n):
                v = x[i, j]
                t = math.tanh(GELU_C * (v + GELU_A * v * v * v))
                du = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
                out[i, j] = dy[i, j] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        return out

    @numba.njit(cache=True)
    def bilinear_resize_nb(img, out_h, out_w):
        in_h, in_w, ch = img.shape
        out = np.empty((out_h, out_w, ch), dtype=img.dtype)
        sy = in_h / out_h
        sx = in_w / out_w
        for oy in range(out_h):
            fy = min(max((oy + 0.5) * sy - 0.5, 0.0), in_h - 1.0)
            y0 = int(math.floor(fy))
            y1 = min(y0 + 1, in_h - 1)
            wy = fy - y0
            for ox in range(out_w):
                fx = min(max((ox + 0.5) * sx - 0.5, 0.0), in_w - 1.0)
                x0 = int(math.floor(fx))
                x1 = min(x0 + 1, in_w - 1)
                wx = fx - x0
                for c in range(ch):
                    top = img[y0, x0, c] * (1.0 - wx) + img[y0, x1, c] * wx
                    bot = img[y1, x0, c] * (1.0 - wx) + img[y1, x1, c] * wx
                    out[oy, ox, c] = top * (1.0 - wy) + bot * wy
        return out


# ---------------------------------------------------------------------------
# dispatch

_NP_KERNELS = {
    "layernorm_fwd": layernorm_fwd_np,
    "layernorm_bwd": layernorm_bwd_np,
    "softmax_fwd": softmax_fwd_np,
    "softmax_bwd": softmax_bwd_np,
    "gelu_fwd": gelu_fwd_np,
    "gelu_bwd": gelu_bwd_np,
    "bilinear_resize": bilinear_resize_np,
}

if _HAVE_NUMBA:
    _NB_KERNELS = {
        "layernorm_fwd": layernorm_fwd_nb,
        "layernorm_bwd": layernorm_bwd_nb,
        "softmax_fwd": softmax_fwd_nb,
        "softmax_bwd": softmax_bwd_nb,
        "gelu_fwd": gelu_fwd_nb,
        "gelu_bwd": gelu_bwd_nb,
        "bilinear_resize": bilinear_resize_nb,
    }
else:  # pragma: no cover
    _NB_KERNELS = _NP_KERNELS

BACKEND = "numba" if (_HAVE_NUMBA and _numba_requested()) else "numpy"


def get_kernel(name: str, backend: str | None = None):
    """Return the kernel ``name`` for ``backend`` (defaults to the active one)."""
    backend = backend or BACKEND
    table = _NB_KERNELS if backend == "numba" else _NP_KERNELS
    return table[name]


def _c(a):
    return np.ascontiguousarray(a)


def layernorm_fwd(x, gamma, beta, eps):
    return get_kernel("layernorm_fwd")(_c(x), _c(gamma), _c(beta), x.dtype.type(eps))


def layernorm_bwd(dy, xhat, rstd, gamma):
    return get_kernel("layernorm_bwd")(_c(dy), _c(xhat), _c(rstd), _c(gamma))


def softmax_fwd(x):
    return get_kernel("softmax_fwd")(_c(x))


def softmax_bwd(dy, y):
    return get_kernel("softmax_bwd")(_c(dy), _c(y))


def gelu_fwd(x):
    return get_kernel("gelu_fwd")(_c(x))


def gelu_bwd(dy, x):
    return get_kernel("gelu_bwd")(_c(dy), _c(x))


def bilinear_resize(img, out_h: int, out_w: int):
    return get_kernel("bilinear_resize")(_c(img), int(out_h), int(out_w))
