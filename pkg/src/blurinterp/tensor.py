"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``np.ndarray`` and, when gradients are enabled,
records the producing operation so that :meth:`Tensor.backward` can run the
chain rule over the recorded graph.  Ops are plain functions that construct
the result tensor together with a closure computing parent gradients from the
output gradient.  Gradients are always accumulated with ``+=`` semantics so a
tensor feeding several consumers receives the sum of their contributions.

Default compute dtype is float32; building the same graph from float64 leaves
runs everything in float64, which is what the finite-difference gradient
checker does.

Multiply-accumulate counting: ``count_macs()`` yields a dict that every
matmul / linear / conv op adds to while the context is active.  The label a
count lands under is the innermost active :func:`mac_scope`, falling back to
the op's own kind (``"matmul"`` or ``"conv"``).
"""

import contextlib

import numpy as np
from scipy import special

from blurinterp.errors import ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


_mac_counters = []
_mac_scope = []


@contextlib.contextmanager
def count_macs():
    """Collect multiply-accumulate counts; yields a {label: macs} dict."""
    counter = {}
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


@contextlib.contextmanager
def mac_scope(label):
    """Attribute all MACs inside the block to ``label``."""
    _mac_scope.append(label)
    try:
        yield
    finally:
        _mac_scope.pop()


def _add_macs(kind, n):
    if not _mac_counters:
        return
    label = _mac_scope[-1] if _mac_scope else kind
    for counter in _mac_counters:
        counter[label] = counter.get(label, 0) + int(n)


class Tensor:
    """An array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_retain")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if (arr.dtype == np.float64 and dtype is None
                and not isinstance(data, (np.ndarray, np.generic))):
            # plain Python floats/lists default to the fp32 compute dtype;
            # numpy inputs keep their precision (fp64 runs rely on this)
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._retain = False

    # -- basics ----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def numpy(self):
        """The underlying array (no copy)."""
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        """A new leaf sharing this tensor's array, cut from the graph."""
        return Tensor(self.data)

    def retain_grad(self):
        """Keep this non-leaf tensor's gradient after backward()."""
        self._retain = True
        return self

    def zero_grad(self):
        self.grad = None

    # -- graph -----------------------------------------------------------

    def backward(self, grad=None):
        """Backpropagate from this tensor through the recorded graph."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(
                    "backward() without an explicit gradient needs a scalar, "
                    f"got shape {self.data.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeError(
                    f"gradient shape {grad.shape} does not match tensor "
                    f"shape {self.data.shape}")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and (node._backward is None or node._retain):
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    # method forms used throughout the model code
    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def abs(self):
        return tabs(self)


def _wrap(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _node(data, parents, backward):
    """Build the output tensor, recording the graph if gradients are on."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise -----------------------------------------------------------

def add(a, b):
    a = _wrap(a, getattr(b, "dtype", np.float32))
    b = _wrap(b, a.dtype)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), backward)


def sub(a, b):
    a = _wrap(a, getattr(b, "dtype", np.float32))
    b = _wrap(b, a.dtype)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), backward)


def mul(a, b):
    a = _wrap(a, getattr(b, "dtype", np.float32))
    b = _wrap(b, a.dtype)
    out = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), backward)


def div(a, b):
    a = _wrap(a, getattr(b, "dtype", np.float32))
    b = _wrap(b, a.dtype)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), backward)


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    exponent = float(exponent)
    out = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _node(out, (a,), backward)


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def tabs(a):
    sign = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * sign,))


def clip(a, lo, hi):
    mask = ((a.data >= lo) & (a.data <= hi)).astype(a.dtype)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def gelu(a):
    """Exact GELU, x * Phi(x) with the Gaussian CDF via erf."""
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x / np.sqrt(2.0, dtype=x.dtype)))

    def backward(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return ((g * (cdf + x * pdf)).astype(x.dtype),)

    return _node((x * cdf).astype(x.dtype), (a,), backward)


# -- reductions --------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).astype(a.dtype, copy=False),)

    return _node(out, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            g2 = g
        else:
            g2 = g if keepdims else np.expand_dims(g, axis)
        return ((np.broadcast_to(g2, a.shape) / n).astype(a.dtype, copy=False),)

    return _node(out, (a,), backward)


# -- shape ops ----------------------------------------------------------------

def reshape(a, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, *axes):
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,),
                 lambda g: (g.transpose(inv),))


def getitem(a, key):
    out = a.data[key]

    def backward(g):
        dx = np.zeros_like(a.data)
        np.add.at(dx, key, g)
        return (dx,)

    return _node(np.ascontiguousarray(out), (a,), backward)


def concat(tensors, axis=0):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p)
                     for p in np.split(g, splits, axis=axis))

    return _node(out, tensors, backward)


def stack(tensors, axis=0):
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.ascontiguousarray(p.squeeze(axis)) for p in
                     np.split(g, len(tensors), axis=axis))

    return _node(out, tensors, backward)


def roll(a, shifts, axes):
    out = np.roll(a.data, shifts, axis=axes)
    neg_shifts = tuple(-s for s in shifts) if isinstance(shifts, tuple) else -shifts

    def backward(g):
        return (np.roll(g, neg_shifts, axis=axes),)

    return _node(out, (a,), backward)


_PAD_IDX_CACHE = {}


def pad2d(a, pad, mode="zeros"):
    """Pad the last two axes.  pad = (top, bottom, left, right)."""
    top, bottom, left, right = pad
    widths = [(0, 0)] * (a.ndim - 2) + [(top, bottom), (left, right)]
    if mode == "zeros":
        out = np.pad(a.data, widths, mode="constant")

        def backward(g):
            sl = [slice(None)] * (a.ndim - 2)
            sl += [slice(top, top + a.shape[-2]), slice(left, left + a.shape[-1])]
            return (np.ascontiguousarray(g[tuple(sl)]),)

        return _node(out, (a,), backward)

    np_mode = {"reflect": "reflect", "replicate": "edge"}.get(mode)
    if np_mode is None:
        raise ShapeError(f"unknown pad mode {mode!r}")
    out = np.pad(a.data, widths, mode=np_mode)
    h, w = a.shape[-2], a.shape[-1]
    key = (h, w, pad, np_mode)
    idx = _PAD_IDX_CACHE.get(key)
    if idx is None:
        base = np.arange(h * w, dtype=np.int64).reshape(h, w)
        idx = np.pad(base, [(top, bottom), (left, right)], mode=np_mode).reshape(-1)
        if len(_PAD_IDX_CACHE) < 64:
            _PAD_IDX_CACHE[key] = idx

    def backward(g):
        lead = g.shape[:-2]
        gf = g.reshape(*lead, -1).astype(np.float64, copy=False)
        flat = np.zeros(lead + (h * w,), dtype=np.float64)
        np.add.at(flat.reshape(-1, h * w), (slice(None), idx),
                  gf.reshape(-1, gf.shape[-1]))
        return (flat.reshape(a.shape).astype(a.dtype),)

    return _node(out, (a,), backward)


def pixel_shuffle(a, r):
    """[B, C*r*r, H, W] -> [B, C, H*r, W*r] sub-pixel rearrangement."""
    b, crr, h, w = a.shape
    if crr % (r * r) != 0:
        raise ShapeError(f"channels {crr} not divisible by r^2={r * r}")
    c = crr // (r * r)
    out = (a.data.reshape(b, c, r, r, h, w)
           .transpose(0, 1, 4, 2, 5, 3)
           .reshape(b, c, h * r, w * r))

    def backward(g):
        gg = (g.reshape(b, c, h, r, w, r)
              .transpose(0, 1, 3, 5, 2, 4)
              .reshape(b, crr, h, w))
        return (np.ascontiguousarray(gg),)

    return _node(np.ascontiguousarray(out), (a,), backward)


def pixel_unshuffle(a, r):
    """[B, C, H*r, W*r] -> [B, C*r*r, H, W], inverse of pixel_shuffle."""
    b, c, hr, wr = a.shape
    if hr % r != 0 or wr % r != 0:
        raise ShapeError(f"spatial dims {(hr, wr)} not divisible by r={r}")
    h, w = hr // r, wr // r
    out = (a.data.reshape(b, c, h, r, w, r)
           .transpose(0, 1, 3, 5, 2, 4)
           .reshape(b, c * r * r, h, w))

    def backward(g):
        gg = (g.reshape(b, c, r, r, h, w)
              .transpose(0, 1, 4, 2, 5, 3)
              .reshape(b, c, hr, wr))
        return (np.ascontiguousarray(gg),)

    return _node(np.ascontiguousarray(out), (a,), backward)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    a = _wrap(a, getattr(b, "dtype", np.float32))
    b = _wrap(b, a.dtype)
    out = a.data @ b.data
    _add_macs("matmul", out.size * a.shape[-1])

    def backward(g):
        if b.ndim == 1:
            ga = np.expand_dims(g, -1) @ np.expand_dims(b.data, 0)
            gb = None if not b.requires_grad else np.tensordot(
                g, a.data, axes=(tuple(range(g.ndim)), tuple(range(a.ndim - 1))))
        else:
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        if ga is not None:
            ga = _unbroadcast(ga, a.shape)
        if gb is not None:
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return _node(out, (a, b), backward)


def linear(x, w, b=None):
    """x [..., in] @ w[out, in]^T (+ b[out])."""
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    _add_macs("matmul", out.size * x.shape[-1])

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx = g @ w.data if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gf = g.reshape(-1, g.shape[-1])
            xf = x.data.reshape(-1, x.shape[-1])
            gw = gf.T @ xf
        if b is None:
            return gx, gw
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _node(out, parents, backward)


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (a,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def backward(g):
        gx = None
        if x.requires_grad:
            gy = g * gamma.data
            gx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                        - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
            gx = gx.astype(x.dtype, copy=False)
        red = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gbeta = g.sum(axis=red) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _node(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


# -- image ops ---------------------------------------------------------------

def conv2d(x, w, b=None, stride=1, padding=0, pad_mode="zeros"):
    """2-D cross-correlation over [B,C,H,W] with optional padding and bias."""
    from blurinterp import kernels

    if padding:
        if isinstance(padding, int):
            pad = (padding, padding, padding, padding)
        else:
            pad = tuple(padding)
        x = pad2d(x, pad, mode=pad_mode)

    cout, cin, kh, kw = w.shape
    if x.shape[1] != cin:
        raise ShapeError(
            f"conv2d input has {x.shape[1]} channels, weight expects {cin}")
    y = kernels.conv2d_fwd(x.data, w.data, stride)
    _add_macs("conv", y.size * cin * kh * kw)

    x_shape = x.shape

    def backward(g):
        gx = kernels.conv2d_bwd_x(g, w.data, x_shape, stride) \
            if x.requires_grad else None
        gw = kernels.conv2d_bwd_w(g, x.data, kh, kw, stride) \
            if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    if b is not None:
        y = y + b.data.reshape(1, -1, 1, 1)
    return _node(y, parents, backward)


def resize_bilinear(x, out_h, out_w):
    """Half-pixel bilinear resize of [B,C,H,W] to [B,C,out_h,out_w]."""
    from blurinterp import kernels

    in_h, in_w = x.shape[-2], x.shape[-1]
    if (out_h, out_w) == (in_h, in_w):
        return _node(x.data.copy(), (x,), lambda g: (g,))
    y = kernels.resize_bilinear_fwd(x.data, out_h, out_w)

    def backward(g):
        return (kernels.resize_bilinear_bwd(g, in_h, in_w),)

    return _node(y, (x,), backward)


# -- parameter initialization -------------------------------------------------

def trunc_normal(rng, shape, std=0.02, dtype=np.float32):
    """Normal(0, std) truncated to +-2 std, as a requires-grad Tensor."""
    vals = special.erfinv(rng.uniform(special.erf(-2.0 / np.sqrt(2)),
                                      special.erf(2.0 / np.sqrt(2)),
                                      size=shape))
    return Tensor((vals * np.sqrt(2) * std).astype(dtype), requires_grad=True)


def he_normal(rng, shape, dtype=np.float32):
    """Kaiming-scaled normal init for conv weights [out, in, kh, kw]."""
    fan_in = int(np.prod(shape[1:]))
    std = np.sqrt(2.0 / fan_in)
    return Tensor((rng.standard_normal(shape) * std).astype(dtype),
                  requires_grad=True)


def zeros_param(shape, dtype=np.float32):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=np.float32):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


# -- gradient checking --------------------------------------------------------

def gradcheck(fn, inputs, eps=1e-5, rtol=1e-4, atol=1e-7):
    """Compare analytic gradients of ``fn(*inputs).sum()`` to central
    finite differences in float64.

    ``inputs`` are Tensors; those with ``requires_grad`` are checked.
    Returns the worst relative error over all checked inputs and raises
    AssertionError if any element disagrees beyond ``rtol``/``atol``.
    """
    inputs64 = [Tensor(t.data.astype(np.float64), requires_grad=t.requires_grad)
                for t in inputs]
    out = fn(*inputs64)
    loss = tsum(out)
    loss.backward()

    worst = 0.0
    for t in inputs64:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                plus = float(fn(*inputs64).data.sum())
                flat[i] = orig - eps
                minus = float(fn(*inputs64).data.sum())
                flat[i] = orig
                nflat[i] = (plus - minus) / (2.0 * eps)
        denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
        err = np.abs(analytic - numeric)
        rel = float((err / denom).max()) if err.size else 0.0
        worst = max(worst, rel)
        if not np.allclose(analytic, numeric, rtol=rtol, atol=atol):
            bad = np.unravel_index(int((err / denom).argmax()), t.shape)
            raise AssertionError(
                f"gradcheck failed at index {bad}: analytic "
                f"{analytic[bad]:.8g} vs numeric {numeric[bad]:.8g} "
                f"(rel {rel:.3g})")
    return worst
