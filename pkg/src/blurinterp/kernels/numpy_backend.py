"""Pure-numpy implementations of the conv and resize inner loops.

Convolutions are "valid" only: padding is applied by the caller before the
kernel is invoked, so every function here sees an input that already has the
right border.  Forward and weight-gradient use an im2col view plus one matmul;
the input gradient scatters columns back with ``np.add.at`` on a flat index
map built once per shape.

Bilinear resizing uses half-pixel source alignment (the ``cv2.resize``
convention).  Because each output row/column mixes at most two input
rows/columns, the resize is expressed as two small dense matrices applied on
either side of the image, which turns both directions of the op into plain
matmuls.
"""

import numpy as np


def _im2col(x, kh, kw, stride):
    """Return a [B, Ho, Wo, Cin*kh*kw] view-copy of sliding windows."""
    b, cin, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]          # [B, Cin, Ho, Wo, kh, kw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho, wo, cin * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def conv2d_fwd(x, w, stride):
    """Valid cross-correlation.  x [B,Cin,H,W], w [Cout,Cin,kh,kw]."""
    cout, cin, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride)
    y = cols @ w.reshape(cout, cin * kh * kw).T   # [B,Ho,Wo,Cout]
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_bwd_w(dy, x, kh, kw, stride):
    """Gradient wrt weights.  dy [B,Cout,Ho,Wo] -> dw [Cout,Cin,kh,kw]."""
    b, cout, ho, wo = dy.shape
    cin = x.shape[1]
    cols, _, _ = _im2col(x, kh, kw, stride)       # [B,Ho,Wo,Cin*kh*kw]
    dyf = dy.transpose(1, 0, 2, 3).reshape(cout, b * ho * wo)
    dw = dyf @ cols.reshape(b * ho * wo, cin * kh * kw)
    return dw.reshape(cout, cin, kh, kw)


_COL_IDX_CACHE = {}


def _col_index_map(shape, kh, kw, stride):
    """Flat input index for every im2col column entry of a [B,Cin,H,W] input."""
    key = (shape, kh, kw, stride)
    cached = _COL_IDX_CACHE.get(key)
    if cached is not None:
        return cached
    b, cin, h, w = shape
    idx = np.arange(b * cin * h * w, dtype=np.int64).reshape(b, cin, h, w)
    cols, _, _ = _im2col(idx, kh, kw, stride)
    flat = cols.reshape(-1)
    if len(_COL_IDX_CACHE) < 64:
        _COL_IDX_CACHE[key] = flat
    return flat


def conv2d_bwd_x(dy, w, x_shape, stride):
    """Gradient wrt input.  Scatter-adds d(cols) back through the im2col map."""
    b, cout, ho, wo = dy.shape
    cout_, cin, kh, kw = w.shape
    dyf = dy.transpose(0, 2, 3, 1).reshape(b * ho * wo, cout)
    dcols = dyf @ w.reshape(cout, cin * kh * kw)  # [B*Ho*Wo, Cin*kh*kw]
    idx = _col_index_map(x_shape, kh, kw, stride)
    flat = np.bincount(idx, weights=dcols.reshape(-1).astype(np.float64),
                       minlength=int(np.prod(x_shape)))
    return flat.reshape(x_shape).astype(dy.dtype)


def _axis_weights(n_in, n_out, dtype):
    """Dense [n_out, n_in] matrix of half-pixel bilinear weights for one axis."""
    r = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        r[i, i0] += 1.0 - f
        r[i, i1] += f
    return r


_AXIS_CACHE = {}


def _axis_matrix(n_in, n_out, dtype):
    key = (n_in, n_out, np.dtype(dtype).str)
    m = _AXIS_CACHE.get(key)
    if m is None:
        m = _axis_weights(n_in, n_out, dtype)
        _AXIS_CACHE[key] = m
    return m


def resize_bilinear_fwd(x, out_h, out_w):
    """Half-pixel bilinear resize of x [B,C,H,W] to [B,C,out_h,out_w]."""
    b, c, h, w = x.shape
    ry = _axis_matrix(h, out_h, x.dtype)
    rx = _axis_matrix(w, out_w, x.dtype)
    return ry @ (x @ rx.T)


def resize_bilinear_bwd(dy, in_h, in_w):
    """Adjoint of resize_bilinear_fwd back onto a [B,C,in_h,in_w] input."""
    b, c, out_h, out_w = dy.shape
    ry = _axis_matrix(in_h, out_h, dy.dtype)
    rx = _axis_matrix(in_w, out_w, dy.dtype)
    return ry.T @ (dy @ rx)
