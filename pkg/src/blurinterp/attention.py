"""Window-based multi-head self-attention and the transformer blocks built
from it.

The attention operates on non-overlapping MxM windows of a feature map.
Alternate blocks cyclically shift the map by half a window before
partitioning so information crosses window borders; an additive mask keeps
tokens that came from different pre-shift regions from attending to each
other.  A residual block (RSTB) stacks six such transformer blocks with
alternating shift and closes with a 3x3 convolution plus an outer residual.

Feature maps are [B, C, H, W] at every public boundary; token tensors are
[n_windows, M*M, C].
"""

import numpy as np

from blurinterp import tensor as T
from blurinterp.errors import ShapeError

MASK_VALUE = -1e9


def window_partition(x, window):
    """[B,C,H,W] -> [B*H*W/M^2, M^2, C] of row-major window tokens."""
    b, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(
            f"spatial extents {(h, w)} not divisible by window {window}")
    m = window
    x = T.reshape(x, b, c, h // m, m, w // m, m)
    x = T.transpose(x, (0, 2, 4, 3, 5, 1))        # B, hW, wW, m, m, C
    return T.reshape(x, b * (h // m) * (w // m), m * m, c)


def window_reverse(tokens, window, b, h, w):
    """Inverse of :func:`window_partition` back to [B,C,H,W]."""
    m = window
    n, mm, c = tokens.shape
    if mm != m * m or n != b * (h // m) * (w // m):
        raise ShapeError(
            f"token tensor {tokens.shape} does not tile a {b}x{h}x{w} map "
            f"with window {window}")
    x = T.reshape(tokens, b, h // m, w // m, m, m, c)
    x = T.transpose(x, (0, 5, 1, 3, 2, 4))        # B, C, hW, m, wW, m
    return T.reshape(x, b, c, h, w)


def relative_position_index(window):
    """[M^2, M^2] index into the (2M-1)^2 relative-position bias table."""
    m = window
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij"))
    flat = coords.reshape(2, -1)                   # 2, M^2
    rel = flat[:, :, None] - flat[:, None, :]      # 2, M^2, M^2
    rel = rel.transpose(1, 2, 0).astype(np.int64)
    rel[:, :, 0] += m - 1
    rel[:, :, 1] += m - 1
    rel[:, :, 0] *= 2 * m - 1
    return rel.sum(-1)


_MASK_CACHE = {}


def shift_attention_mask(h, w, window, shift):
    """Additive [n_windows, M^2, M^2] mask for shifted-window attention.

    Tokens that originate from different pre-shift regions of the image get
    MASK_VALUE added to their attention logits.
    """
    key = (h, w, window, shift)
    cached = _MASK_CACHE.get(key)
    if cached is not None:
        return cached
    m = window
    region = np.zeros((h, w), dtype=np.int64)
    idx = 0
    for hs in (slice(0, -m), slice(-m, -shift), slice(-shift, None)):
        for ws in (slice(0, -m), slice(-m, -shift), slice(-shift, None)):
            region[hs, ws] = idx
            idx += 1
    region = (region.reshape(h // m, m, w // m, m)
              .transpose(0, 2, 1, 3)
              .reshape(-1, m * m))                # nW, M^2
    diff = region[:, :, None] - region[:, None, :]
    mask = np.where(diff != 0, MASK_VALUE, 0.0).astype(np.float32)
    if len(_MASK_CACHE) < 256:
        _MASK_CACHE[key] = mask
    return mask


class AttentionParams:
    """Projections, bias table, and head layout for one window-MSA."""

    def __init__(self, channels, heads, window, rng, dtype=np.float32):
        if channels % heads:
            raise ShapeError(
                f"channels {channels} not divisible by heads {heads}")
        self.channels = channels
        self.heads = heads
        self.head_dim = channels // heads
        self.window = window
        self.p_q = T.trunc_normal(rng, (channels, channels), dtype=dtype)
        self.p_k = T.trunc_normal(rng, (channels, channels), dtype=dtype)
        self.p_v = T.trunc_normal(rng, (channels, channels), dtype=dtype)
        self.p_out = T.trunc_normal(rng, (channels, channels), dtype=dtype)
        n_rel = (2 * window - 1) ** 2
        self.bias_table = T.zeros_param((n_rel, heads), dtype=dtype)
        self.index = relative_position_index(window)

    def named(self, prefix):
        return {
            f"{prefix}.p_q": self.p_q,
            f"{prefix}.p_k": self.p_k,
            f"{prefix}.p_v": self.p_v,
            f"{prefix}.p_out": self.p_out,
            f"{prefix}.bias_table": self.bias_table,
        }


def wmsa(tokens, params, mask=None):
    """Multi-head self-attention within each window.

    tokens: [n_win, M^2, C].  mask: optional [n_groups, M^2, M^2] additive
    logits, tiled over n_win (n_win must be a multiple of n_groups).
    """
    n, mm, c = tokens.shape
    if c != params.channels:
        raise ShapeError(
            f"token channels {c} do not match attention params "
            f"{params.channels}")
    h = params.heads
    d = params.head_dim

    with T.mac_scope("attention"):
        q = tokens @ params.p_q
        k = tokens @ params.p_k
        v = tokens @ params.p_v
        q = T.transpose(T.reshape(q, n, mm, h, d), (0, 2, 1, 3))
        k = T.transpose(T.reshape(k, n, mm, h, d), (0, 2, 3, 1))
        v = T.transpose(T.reshape(v, n, mm, h, d), (0, 2, 1, 3))
        scores = (q @ k) * (1.0 / np.sqrt(d))      # n, h, M^2, M^2

        bias = T.getitem(params.bias_table, params.index.reshape(-1))
        bias = T.transpose(T.reshape(bias, mm, mm, h), (2, 0, 1))
        scores = scores + T.reshape(bias, 1, h, mm, mm)

        if mask is not None:
            groups = mask.shape[0]
            if n % groups:
                raise ShapeError(
                    f"{n} windows cannot be tiled by a {groups}-group mask")
            scores = T.reshape(scores, n // groups, groups, h, mm, mm)
            madd = T.Tensor(mask.astype(tokens.dtype).reshape(
                1, groups, 1, mm, mm))
            scores = T.reshape(scores + madd, n, h, mm, mm)

        attn = T.softmax(scores, axis=-1)
        out = attn @ v                             # n, h, M^2, d
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), n, mm, c)
        return out @ params.p_out


def shifted_wmsa(x, params, shift):
    """Window attention on [B,C,H,W], with optional half-window shift."""
    b, c, h, w = x.shape
    m = params.window
    if shift:
        x = T.roll(x, (-shift, -shift), (2, 3))
        mask = shift_attention_mask(h, w, m, shift)
    else:
        mask = None
    tokens = window_partition(x, m)
    tokens = wmsa(tokens, params, mask=mask)
    x = window_reverse(tokens, m, b, h, w)
    if shift:
        x = T.roll(x, (shift, shift), (2, 3))
    return x


class StbParams:
    """One transformer block: attention + MLP, both pre-norm residual."""

    def __init__(self, channels, heads, window, shift, rng, mlp_ratio=2.0,
                 dtype=np.float32):
        self.attn = AttentionParams(channels, heads, window, rng, dtype=dtype)
        self.shift = shift
        hidden = int(round(channels * mlp_ratio))
        self.ln1_g = T.ones_param(channels, dtype=dtype)
        self.ln1_b = T.zeros_param(channels, dtype=dtype)
        self.ln2_g = T.ones_param(channels, dtype=dtype)
        self.ln2_b = T.zeros_param(channels, dtype=dtype)
        self.mlp_w1 = T.trunc_normal(rng, (hidden, channels), dtype=dtype)
        self.mlp_b1 = T.zeros_param(hidden, dtype=dtype)
        self.mlp_w2 = T.trunc_normal(rng, (channels, hidden), dtype=dtype)
        self.mlp_b2 = T.zeros_param(channels, dtype=dtype)

    def named(self, prefix):
        out = self.attn.named(f"{prefix}.attn")
        out.update({
            f"{prefix}.ln1.g": self.ln1_g,
            f"{prefix}.ln1.b": self.ln1_b,
            f"{prefix}.ln2.g": self.ln2_g,
            f"{prefix}.ln2.b": self.ln2_b,
            f"{prefix}.mlp.w1": self.mlp_w1,
            f"{prefix}.mlp.b1": self.mlp_b1,
            f"{prefix}.mlp.w2": self.mlp_w2,
            f"{prefix}.mlp.b2": self.mlp_b2,
        })
        return out


def stb_forward(x, p):
    """Pre-norm transformer block on [B,C,H,W]: attention then MLP,
    each added back to its input."""
    b, c, h, w = x.shape
    xc = T.transpose(x, (0, 2, 3, 1))              # B,H,W,C

    normed = T.layer_norm(xc, p.ln1_g, p.ln1_b)
    normed = T.transpose(normed, (0, 3, 1, 2))
    attn_out = shifted_wmsa(normed, p.attn, p.shift)
    xc = xc + T.transpose(attn_out, (0, 2, 3, 1))

    normed = T.layer_norm(xc, p.ln2_g, p.ln2_b)
    with T.mac_scope("mlp"):
        hidden = T.gelu(T.linear(normed, p.mlp_w1, p.mlp_b1))
        mlp_out = T.linear(hidden, p.mlp_w2, p.mlp_b2)
    xc = xc + mlp_out

    return T.transpose(xc, (0, 3, 1, 2))


class RstbParams:
    """Six alternating-shift transformer blocks plus a trailing 3x3 conv."""

    N_BLOCKS = 6

    def __init__(self, channels, heads, window, rng, mlp_ratio=2.0,
                 dtype=np.float32):
        self.window = window
        self.stbs = []
        for j in range(self.N_BLOCKS):
            shift = 0 if j % 2 == 0 else window // 2
            self.stbs.append(StbParams(channels, heads, window, shift, rng,
                                       mlp_ratio=mlp_ratio, dtype=dtype))
        self.conv_w = T.he_normal(rng, (channels, channels, 3, 3), dtype=dtype)
        self.conv_b = T.zeros_param(channels, dtype=dtype)

    def named(self, prefix):
        out = {}
        for j, stb in enumerate(self.stbs):
            out.update(stb.named(f"{prefix}.stb{j}"))
        out[f"{prefix}.conv.w"] = self.conv_w
        out[f"{prefix}.conv.b"] = self.conv_b
        return out


def pad_to_multiple(x, multiple):
    """Reflect-pad the bottom/right of [B,C,H,W] so H,W divide ``multiple``.

    Falls back to replicate padding when the map is too small to reflect.
    Returns (padded, (0, pad_h, 0, pad_w)).
    """
    h, w = x.shape[-2], x.shape[-1]
    pad_h = (-h) % multiple
    pad_w = (-w) % multiple
    if pad_h == 0 and pad_w == 0:
        return x, (0, 0, 0, 0)
    mode = "reflect" if (pad_h < h and pad_w < w) else "replicate"
    return T.pad2d(x, (0, pad_h, 0, pad_w), mode=mode), (0, pad_h, 0, pad_w)


def rstb_forward(x, p):
    """Residual transformer block: pad, run the six STBs, crop, conv, add."""
    b, c, h, w = x.shape
    y, _ = pad_to_multiple(x, p.window)
    for stb in p.stbs:
        y = stb_forward(y, stb)
    if y.shape != x.shape:
        y = T.getitem(y, (slice(None), slice(None), slice(0, h), slice(0, w)))
    y = T.conv2d(y, p.conv_w, p.conv_b, padding=1)
    return x + y
