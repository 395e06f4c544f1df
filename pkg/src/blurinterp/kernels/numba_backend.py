"""Numba-compiled conv and resize inner loops.

Same contracts as :mod:`blurinterp.kernels.numpy_backend`: valid-only
convolution (caller pads), half-pixel bilinear resize.  All kernels are
serial ``@njit`` loops; writes never alias, so results are deterministic.
``cache=True`` keeps compiled artifacts on disk between processes.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _conv2d_fwd(x, w, stride, y):
    b, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = y.shape[2]
    wo = y.shape[3]
    for n in range(b):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for p in range(kh):
                            for q in range(kw):
                                acc += x[n, ci, i * stride + p, j * stride + q] * w[co, ci, p, q]
                    y[n, co, i, j] = acc


@njit(cache=True)
def _conv2d_bwd_x(dy, w, stride, dx):
    b, cout, ho, wo = dy.shape
    _, cin, kh, kw = w.shape
    for n in range(b):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    g = dy[n, co, i, j]
                    for ci in range(cin):
                        for p in range(kh):
                            for q in range(kw):
                                dx[n, ci, i * stride + p, j * stride + q] += g * w[co, ci, p, q]


@njit(cache=True)
def _conv2d_bwd_w(dy, x, stride, dw):
    b, cout, ho, wo = dy.shape
    _, cin, kh, kw = dw.shape
    for n in range(b):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    g = dy[n, co, i, j]
                    for ci in range(cin):
                        for p in range(kh):
                            for q in range(kw):
                                dw[co, ci, p, q] += g * x[n, ci, i * stride + p, j * stride + q]


@njit(cache=True)
def _resize_fwd(x, i0y, i1y, fy, i0x, i1x, fx, y):
    b, c, h, w = x.shape
    oh = y.shape[2]
    ow = y.shape[3]
    for n in range(b):
        for ch in range(c):
            for i in range(oh):
                a0 = i0y[i]
                a1 = i1y[i]
                ga = fy[i]
                for j in range(ow):
                    b0 = i0x[j]
                    b1 = i1x[j]
                    gb = fx[j]
                    top = x[n, ch, a0, b0] * (1.0 - gb) + x[n, ch, a0, b1] * gb
                    bot = x[n, ch, a1, b0] * (1.0 - gb) + x[n, ch, a1, b1] * gb
                    y[n, ch, i, j] = top * (1.0 - ga) + bot * ga


@njit(cache=True)
def _resize_bwd(dy, i0y, i1y, fy, i0x, i1x, fx, dx):
    b, c, oh, ow = dy.shape
    for n in range(b):
        for ch in range(c):
            for i in range(oh):
                a0 = i0y[i]
                a1 = i1y[i]
                ga = fy[i]
                for j in range(ow):
                    b0 = i0x[j]
                    b1 = i1x[j]
                    gb = fx[j]
                    g = dy[n, ch, i, j]
                    dx[n, ch, a0, b0] += g * (1.0 - ga) * (1.0 - gb)
                    dx[n, ch, a0, b1] += g * (1.0 - ga) * gb
                    dx[n, ch, a1, b0] += g * ga * (1.0 - gb)
                    dx[n, ch, a1, b1] += g * ga * gb


def conv2d_fwd(x, w, stride):
    """Valid cross-correlation.  x [B,Cin,H,W], w [Cout,Cin,kh,kw]."""
    b, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    y = np.empty((b, cout, ho, wo), dtype=x.dtype)
    _conv2d_fwd(np.ascontiguousarray(x), np.ascontiguousarray(w), stride, y)
    return y


def conv2d_bwd_x(dy, w, x_shape, stride):
    """Gradient wrt input of conv2d_fwd."""
    dx = np.zeros(x_shape, dtype=dy.dtype)
    _conv2d_bwd_x(np.ascontiguousarray(dy), np.ascontiguousarray(w), stride, dx)
    return dx


def conv2d_bwd_w(dy, x, kh, kw, stride):
    """Gradient wrt weights of conv2d_fwd."""
    cout = dy.shape[1]
    cin = x.shape[1]
    dw = np.zeros((cout, cin, kh, kw), dtype=dy.dtype)
    _conv2d_bwd_w(np.ascontiguousarray(dy), np.ascontiguousarray(x), stride, dw)
    return dw


_IDX_CACHE = {}


def _axis_index(n_in, n_out):
    key = (n_in, n_out)
    cached = _IDX_CACHE.get(key)
    if cached is not None:
        return cached
    scale = n_in / n_out
    i0 = np.empty(n_out, dtype=np.int64)
    i1 = np.empty(n_out, dtype=np.int64)
    f = np.empty(n_out, dtype=np.float64)
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        i0[i] = lo
        i1[i] = min(lo + 1, n_in - 1)
        f[i] = src - lo
    out = (i0, i1, f)
    if len(_IDX_CACHE) < 128:
        _IDX_CACHE[key] = out
    return out


def resize_bilinear_fwd(x, out_h, out_w):
    """Half-pixel bilinear resize of x [B,C,H,W] to [B,C,out_h,out_w]."""
    b, c, h, w = x.shape
    i0y, i1y, fy = _axis_index(h, out_h)
    i0x, i1x, fx = _axis_index(w, out_w)
    y = np.empty((b, c, out_h, out_w), dtype=x.dtype)
    _resize_fwd(np.ascontiguousarray(x), i0y, i1y, fy.astype(x.dtype),
                i0x, i1x, fx.astype(x.dtype), y)
    return y


def resize_bilinear_bwd(dy, in_h, in_w):
    """Adjoint of resize_bilinear_fwd back onto a [B,C,in_h,in_w] input."""
    b, c, oh, ow = dy.shape
    i0y, i1y, fy = _axis_index(in_h, oh)
    i0x, i1x, fx = _axis_index(in_w, ow)
    dx = np.zeros((b, c, in_h, in_w), dtype=dy.dtype)
    _resize_bwd(np.ascontiguousarray(dy), i0y, i1y, fy.astype(dy.dtype),
                i0x, i1x, fx.astype(dy.dtype), dx)
    return dx
