"""The full restoration network.

Three blurry frames are each passed through a shared shallow extractor (two
stride-2 convs), fused by channel concatenation, and refined by N multi-scale
residual transformer blocks into shared features that do not depend on any
time query.  A normalized time t in [0,1] is then broadcast to a plane,
concatenated, projected back to C channels by a 1x1 conv, refined by M more
multi-scale blocks, and decoded to a full-resolution sharp frame by a 3x3
conv plus pixel shuffle.

Heads:

* ``head.main``  C  -> 48 channels, shuffle x4 -> one RGB frame at time t
* ``head.dts``   C  -> 96 channels, shuffle x4 -> the two exposure-end
  frames (t=0, t=1), used as extra supervision during training only and
  stripped from inference checkpoints
* ``head.tse``   2C -> 48 channels, shuffle x4 -> fuses a forward branch at
  t with a time-reversed branch at 1-t

Checkpoint names: ``fn.shallow.*``, ``fn.rstb{i}.*``, ``fm.tenc.*``,
``fm.rstb{i}.*``, ``head.main.*``, ``head.dts.*``, ``head.tse.*``.
"""

from dataclasses import dataclass, replace

import numpy as np

from blurinterp import attention as A
from blurinterp import tensor as T
from blurinterp.errors import ConfigError, DomainError, ModeError, ShapeError

INFERENCE_EXCLUDED_PREFIXES = ("head.dts.",)


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 174
    heads: int = 6
    window: int = 8
    n_blocks: int = 3
    m_blocks: int = 3
    scales: int = 3
    rescale: int = 2
    upscale: int = 4
    mlp_ratio: float = 2.0
    global_residual: bool = False

    def __post_init__(self):
        if self.channels % self.heads:
            raise ConfigError(
                f"channels {self.channels} not divisible by heads {self.heads}")
        if self.channels % 3:
            raise ConfigError(
                f"channels {self.channels} not divisible by the 3 input frames")
        if self.upscale != 4:
            raise ConfigError(
                "upscale factor must equal the product of the two stride-2 "
                f"shallow convs (4), got {self.upscale}")
        if self.scales < 1 or self.rescale < 1:
            raise ConfigError("scales and rescale must be positive")
        if self.window < 1 or self.n_blocks < 1 or self.m_blocks < 1:
            raise ConfigError("window and block counts must be positive")

    @classmethod
    def tiny(cls, **overrides):
        """Small profile for tests: C=24, 3 heads, window 4, one block each."""
        base = dict(channels=24, heads=3, window=4, n_blocks=1, m_blocks=1)
        base.update(overrides)
        return cls(**base)

    def replaced(self, **kw):
        return replace(self, **kw)


class MsRstbParams:
    """One shared RSTB applied at several scales plus the fusion conv."""

    def __init__(self, channels, heads, window, scales, rng, mlp_ratio=2.0,
                 dtype=np.float32):
        self.rstb = A.RstbParams(channels, heads, window, rng,
                                 mlp_ratio=mlp_ratio, dtype=dtype)
        self.fuse_w = T.he_normal(rng, (channels, scales * channels, 3, 3),
                                  dtype=dtype)
        self.fuse_b = T.zeros_param(channels, dtype=dtype)

    def named(self, prefix):
        out = self.rstb.named(prefix)
        out[f"{prefix}.fuse.w"] = self.fuse_w
        out[f"{prefix}.fuse.b"] = self.fuse_b
        return out


def ms_rstb_forward(x, p, scales, rescale):
    """Run the shared RSTB at ``scales`` resolutions and fuse.

    Scale s processes the input downscaled by rescale**s; every output is
    resized back to the input size, channel-concatenated, fused by a 3x3
    conv back to C channels, and added to the input.
    """
    b, c, h, w = x.shape
    outs = []
    for s in range(scales):
        factor = rescale ** s
        hs, ws = h // factor, w // factor
        if hs < 1 or ws < 1:
            raise ShapeError(
                f"scale {s} collapses {h}x{w} to {hs}x{ws}; "
                "fewer scales or a larger input is required")
        xs = T.resize_bilinear(x, hs, ws) if s else x
        ys = A.rstb_forward(xs, p.rstb)
        outs.append(T.resize_bilinear(ys, h, w) if s else ys)
    y = T.concat(outs, axis=1)
    y = T.conv2d(y, p.fuse_w, p.fuse_b, padding=1)
    return x + y


class BiT:
    """Blur interpolation network with shared-feature amortization."""

    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        self.training = True
        self.fn_calls = 0
        c = config.channels
        cf = c // 3
        rng = np.random.default_rng(seed)

        self.shallow_w0 = T.he_normal(rng, (cf, 3, 3, 3), dtype=dtype)
        self.shallow_b0 = T.zeros_param(cf, dtype=dtype)
        self.shallow_w1 = T.he_normal(rng, (cf, cf, 3, 3), dtype=dtype)
        self.shallow_b1 = T.zeros_param(cf, dtype=dtype)

        def blocks(n):
            return [MsRstbParams(c, config.heads, config.window,
                                 config.scales, rng,
                                 mlp_ratio=config.mlp_ratio, dtype=dtype)
                    for _ in range(n)]

        self.fn_blocks = blocks(config.n_blocks)
        self.tenc_w = T.trunc_normal(rng, (c, c + 1, 1, 1), dtype=dtype)
        self.tenc_b = T.zeros_param(c, dtype=dtype)
        self.fm_blocks = blocks(config.m_blocks)

        up2 = config.upscale ** 2
        self.head_main_w = T.he_normal(rng, (3 * up2, c, 3, 3), dtype=dtype)
        self.head_main_b = T.zeros_param(3 * up2, dtype=dtype)
        self.head_dts_w = T.he_normal(rng, (6 * up2, c, 3, 3), dtype=dtype)
        self.head_dts_b = T.zeros_param(6 * up2, dtype=dtype)
        self.head_tse_w = T.he_normal(rng, (3 * up2, 2 * c, 3, 3), dtype=dtype)
        self.head_tse_b = T.zeros_param(3 * up2, dtype=dtype)

    # -- parameter plumbing ------------------------------------------------

    def named_params(self):
        out = {
            "fn.shallow.conv0.w": self.shallow_w0,
            "fn.shallow.conv0.b": self.shallow_b0,
            "fn.shallow.conv1.w": self.shallow_w1,
            "fn.shallow.conv1.b": self.shallow_b1,
        }
        for i, blk in enumerate(self.fn_blocks):
            out.update(blk.named(f"fn.rstb{i}"))
        out["fm.tenc.w"] = self.tenc_w
        out["fm.tenc.b"] = self.tenc_b
        for i, blk in enumerate(self.fm_blocks):
            out.update(blk.named(f"fm.rstb{i}"))
        out.update({
            "head.main.w": self.head_main_w,
            "head.main.b": self.head_main_b,
            "head.dts.w": self.head_dts_w,
            "head.dts.b": self.head_dts_b,
            "head.tse.w": self.head_tse_w,
            "head.tse.b": self.head_tse_b,
        })
        return out

    def param_count(self):
        return sum(t.size for t in self.named_params().values())

    def state_dict(self):
        return {name: t.data.copy() for name, t in self.named_params().items()}

    def load_state(self, state, strict=True):
        params = self.named_params()
        missing = [n for n in params if n not in state]
        extra = [n for n in state if n not in params]
        if strict and (missing or extra):
            raise ShapeError(
                f"state mismatch: missing {missing[:4]}, unexpected {extra[:4]}")
        for name, arr in state.items():
            if name not in params:
                continue
            tgt = params[name]
            if tgt.shape != arr.shape:
                raise ShapeError(
                    f"parameter {name}: checkpoint shape {arr.shape} vs "
                    f"model shape {tgt.shape}")
            tgt.data = arr.astype(tgt.dtype).copy()

    def train_mode(self, flag=True):
        self.training = flag
        return self

    # -- forward stages ------------------------------------------------------

    def shallow(self, frame):
        """[B,3,H,W] -> [B,C/3,H/4,W/4] via two stride-2 convs with GELU."""
        b, c, h, w = frame.shape
        if c != 3:
            raise ShapeError(f"expected 3-channel frames, got {c}")
        if h % 4 or w % 4:
            raise ShapeError(
                f"frame extents {(h, w)} must be divisible by 4; pad first")
        x = T.conv2d(frame, self.shallow_w0, self.shallow_b0, stride=2,
                     padding=1, pad_mode="reflect")
        x = T.gelu(x)
        return T.conv2d(x, self.shallow_w1, self.shallow_b1, stride=2,
                        padding=1, pad_mode="reflect")

    def fuse_frames(self, f_prev, f_cur, f_nxt):
        """Fixed-order channel concatenation of the three frame features."""
        if not (f_prev.shape == f_cur.shape == f_nxt.shape):
            raise ShapeError(
                f"frame features disagree: {f_prev.shape} {f_cur.shape} "
                f"{f_nxt.shape}")
        return T.concat([f_prev, f_cur, f_nxt], axis=1)

    def extract_shared(self, prev, cur, nxt):
        """Time-independent shared features [B,C,H/4,W/4]; computed once
        per triplet no matter how many t queries follow."""
        self.fn_calls += 1
        feat = self.fuse_frames(self.shallow(prev), self.shallow(cur),
                                self.shallow(nxt))
        for blk in self.fn_blocks:
            feat = ms_rstb_forward(feat, blk, self.config.scales,
                                   self.config.rescale)
        return feat

    def encode_time(self, feat, t):
        """Broadcast t to a plane, concat, and project C+1 -> C channels.

        t is a scalar applied to the whole batch or a length-B vector with
        one time query per batch element.
        """
        b, c, h, w = feat.shape
        tv = np.asarray(t, dtype=np.float64)
        if tv.ndim not in (0, 1) or (tv.ndim == 1 and tv.shape[0] != b):
            raise DomainError(f"time query shape {tv.shape} does not "
                              f"broadcast over batch {b}")
        if not np.all(np.isfinite(tv)) or tv.min() < 0.0 or tv.max() > 1.0:
            raise DomainError(f"time query {t} outside [0, 1]")
        plane = np.empty((b, 1, h, w), dtype=feat.dtype)
        plane[:, 0] = tv.reshape(-1, 1, 1) if tv.ndim else tv
        plane = T.Tensor(plane)
        x = T.concat([feat, plane], axis=1)
        return T.conv2d(x, self.tenc_w, self.tenc_b)

    def render_features(self, feat, t):
        """Renderer stage: time-encoded features refined by m_blocks
        MS-RSTBs."""
        x = self.encode_time(feat, t)
        for blk in self.fm_blocks:
            x = ms_rstb_forward(x, blk, self.config.scales,
                                self.config.rescale)
        return x

    def _decode(self, features, w, b):
        y = T.conv2d(features, w, b, padding=1)
        y = T.pixel_shuffle(y, self.config.upscale)
        if not self.training:
            y = T.clip(y, 0.0, 1.0)
        return y

    def render_motion(self, feat, t):
        """Sharp frame at time t from shared features."""
        return self._decode(self.render_features(feat, t),
                            self.head_main_w, self.head_main_b)

    def forward(self, prev, cur, nxt, t):
        out = self.render_motion(self.extract_shared(prev, cur, nxt), t)
        if self.config.global_residual:
            out = out + cur
        return out

    def dual_end(self, feat):
        """Training-only head decoding shared features into both exposure
        ends (t=0, t=1); no time encoding is involved."""
        if not self.training:
            raise ModeError(
                "the dual-end head is a training-time auxiliary and is "
                "excluded from inference")
        y = T.conv2d(feat, self.head_dts_w, self.head_dts_b, padding=1)
        y = T.pixel_shuffle(y, self.config.upscale)
        start = T.getitem(y, (slice(None), slice(0, 3)))
        end = T.getitem(y, (slice(None), slice(3, 6)))
        return start, end

    def tse_branches(self, prev, cur, nxt, t):
        """Forward branch at t and time-reversed branch at 1-t."""
        branch_a = self.render_features(self.extract_shared(prev, cur, nxt), t)
        branch_b = self.render_features(self.extract_shared(nxt, cur, prev),
                                        1.0 - t)
        return branch_a, branch_b

    def tse_forward(self, prev, cur, nxt, t):
        """Ensembled prediction through the 2C-input fusion head."""
        branch_a, branch_b = self.tse_branches(prev, cur, nxt, t)
        fused = T.concat([branch_a, branch_b], axis=1)
        out = self._decode(fused, self.head_tse_w, self.head_tse_b)
        if self.config.global_residual:
            out = out + cur
        return out

    def export_inference_state(self):
        """State dict without the training-only head."""
        return {name: arr for name, arr in self.state_dict().items()
                if not any(name.startswith(p)
                           for p in INFERENCE_EXCLUDED_PREFIXES)}
