"""Synthetic blur data: capture profiles, blur synthesis, triplets, IO.

Two synthesis routes emulate different capture pipelines:

* discrete: a sliding window of sharp frames is arithmetically averaged
  (optionally in linear light via an inverse-gamma / gamma pair)
* continuous: an analytic scene, renderable at any real-valued time, is
  integrated over the exposure with the trapezoid rule, so the blur is a
  smooth trail instead of a comb of frozen copies

A capture profile states how many sharp frames fall inside one exposure and
how many are lost to sensor readout between exposures.  Triplets pair each
blurred frame with its neighbors and with the sharp frames of its own
exposure window; the targets' times are normalized so the first/last frame
of the exposure sit at exactly t=0 and t=1.
"""

import json
import os
from dataclasses import asdict, dataclass

import cv2
import numpy as np

from blurinterp.errors import ConfigError, DomainError


# -- pixel value conversions ---------------------------------------------------

def to_uint8(img):
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def from_uint8(img):
    return img.astype(np.float32) / 255.0


def to_uint16(img):
    return np.clip(np.rint(img * 65535.0), 0, 65535).astype(np.uint16)


def from_uint16(img):
    return img.astype(np.float32) / 65535.0


# -- capture configuration ----------------------------------------------------

@dataclass(frozen=True)
class CaptureConfig:
    """Timing relationship between a sharp stream and a blurred stream."""

    blur_fps: float
    sharp_fps: float
    blur_exposure_ms: float
    sharp_exposure_ms: float
    frames_per_blur: int
    deadtime_frames: int

    def __post_init__(self):
        if min(self.blur_fps, self.sharp_fps, self.blur_exposure_ms) <= 0:
            raise ConfigError("rates and exposure must be positive")
        if self.frames_per_blur < 2:
            raise ConfigError("need at least 2 sharp frames per exposure "
                              "(the two exposure ends)")
        interval = 1000.0 / self.sharp_fps
        if self.frames_per_blur * interval > self.blur_exposure_ms + interval + 1e-6:
            raise ConfigError(
                f"{self.frames_per_blur} sharp frames at {interval:.3f} ms "
                f"do not fit a {self.blur_exposure_ms} ms exposure")
        expect_dead = round((1000.0 / self.blur_fps - self.blur_exposure_ms)
                            * self.sharp_fps / 1000.0)
        if self.deadtime_frames != expect_dead:
            raise ConfigError(
                f"deadtime_frames {self.deadtime_frames} inconsistent with "
                f"timing (expected {expect_dead})")

    @property
    def stride(self):
        """Sharp frames from one exposure start to the next."""
        return self.frames_per_blur + self.deadtime_frames

    @property
    def t_grid(self):
        """Normalized target times inside one exposure: 0 .. 1 inclusive."""
        return np.linspace(0.0, 1.0, self.frames_per_blur)

    @property
    def sharp_interval_ms(self):
        return 1000.0 / self.sharp_fps


def profile(name):
    """A named capture profile: 'adobe240', 'rbi', or 'tiny'."""
    if name == "adobe240":
        # 240 fps stream, 11-frame averaging windows, no readout gap
        return CaptureConfig(blur_fps=240.0 / 11.0, sharp_fps=240.0,
                             blur_exposure_ms=11000.0 / 240.0,
                             sharp_exposure_ms=1000.0 / 240.0,
                             frames_per_blur=11, deadtime_frames=0)
    if name == "rbi":
        # 25 fps blurred / 500 fps sharp, 18 ms exposure: 9 sharp frames in
        # the exposure and 11 lost to readout
        return CaptureConfig(blur_fps=25.0, sharp_fps=500.0,
                             blur_exposure_ms=18.0, sharp_exposure_ms=2.0,
                             frames_per_blur=9, deadtime_frames=11)
    if name == "tiny":
        # small desk profile for tests: 5 targets per exposure
        return CaptureConfig(blur_fps=24.0, sharp_fps=120.0,
                             blur_exposure_ms=5000.0 / 120.0,
                             sharp_exposure_ms=1000.0 / 120.0,
                             frames_per_blur=5, deadtime_frames=0)
    raise ConfigError(f"unknown capture profile {name!r}")


PROFILE_NAMES = ("adobe240", "rbi", "tiny")


# -- analytic scenes -----------------------------------------------------------

class Scene:
    """Deterministic procedural scene renderable at any time (ms)."""

    def __init__(self, size):
        self.size = size
        ys, xs = np.mgrid[0:size, 0:size].astype(np.float32)
        self._xs = xs
        self._ys = ys

    def render(self, t_ms):
        raise NotImplementedError


class OrbitingBlobs(Scene):
    """Soft colored blobs on circular orbits; smooth in space and time."""

    def __init__(self, size, seed, speed=1.0, n_blobs=3):
        super().__init__(size)
        rng = np.random.default_rng(seed)
        self.cx = rng.uniform(0.3, 0.7, n_blobs) * size
        self.cy = rng.uniform(0.3, 0.7, n_blobs) * size
        self.radius = rng.uniform(0.10, 0.22, n_blobs) * size
        self.phase = rng.uniform(0, 2 * np.pi, n_blobs)
        self.omega = (rng.uniform(0.7, 1.3, n_blobs) * speed
                      * 2 * np.pi / 1000.0)           # radians per ms
        self.sigma = rng.uniform(0.08, 0.14, n_blobs) * size
        self.color = rng.uniform(0.4, 1.0, (n_blobs, 3)).astype(np.float32)

    def render(self, t_ms):
        acc = np.zeros((3, self.size, self.size), dtype=np.float32)
        for i in range(len(self.cx)):
            ang = self.omega[i] * t_ms + self.phase[i]
            bx = self.cx[i] + self.radius[i] * np.cos(ang)
            by = self.cy[i] + self.radius[i] * np.sin(ang)
            d2 = (self._xs - bx) ** 2 + (self._ys - by) ** 2
            blob = np.exp(-0.5 * d2 / self.sigma[i] ** 2)
            acc += self.color[i][:, None, None] * blob[None]
        return (0.08 + 0.84 * (1.0 - np.exp(-acc))).astype(np.float32)


class RotatingGrating(Scene):
    """A sinusoidal grating spinning about the image center."""

    def __init__(self, size, seed, speed=1.0):
        super().__init__(size)
        rng = np.random.default_rng(seed)
        self.cycles = rng.uniform(2.0, 4.0)
        self.omega = rng.uniform(0.5, 1.0) * speed * 2 * np.pi / 1000.0
        self.phase = rng.uniform(0, 2 * np.pi)
        self.tint = rng.uniform(0.6, 1.0, 3).astype(np.float32)
        self._u = (self._xs - size / 2) / size
        self._v = (self._ys - size / 2) / size

    def render(self, t_ms):
        ang = self.omega * t_ms + self.phase
        proj = self._u * np.cos(ang) + self._v * np.sin(ang)
        wave = 0.5 + 0.38 * np.sin(2 * np.pi * self.cycles * proj)
        return (self.tint[:, None, None] * wave[None]).astype(np.float32)


class LinearDot(Scene):
    """A small Gaussian dot translating at constant velocity."""

    def __init__(self, size, seed, speed=0.5, sigma=1.2):
        super().__init__(size)
        rng = np.random.default_rng(seed)
        self.y0 = size / 2.0 + rng.uniform(-0.1, 0.1) * size
        self.x0 = 0.15 * size
        self.vx = speed                                # px per ms
        self.sigma = sigma

    def render(self, t_ms):
        bx = self.x0 + self.vx * t_ms
        d2 = (self._xs - bx) ** 2 + (self._ys - self.y0) ** 2
        dot = np.exp(-0.5 * d2 / self.sigma ** 2).astype(np.float32)
        return 0.05 + 0.9 * np.repeat(dot[None], 3, axis=0)


SCENE_KINDS = ("blobs", "grating", "dot")


def make_scene(kind, size, seed, speed=1.0):
    if kind == "blobs":
        return OrbitingBlobs(size, seed, speed=speed)
    if kind == "grating":
        return RotatingGrating(size, seed, speed=speed)
    if kind == "dot":
        return LinearDot(size, seed, speed=speed)
    raise ConfigError(f"unknown scene kind {kind!r}")


# -- sharp sequences -----------------------------------------------------------

@dataclass
class SharpSequence:
    """Uniformly timed sharp frames [n, 3, H, W] in [0, 1]."""

    frames: np.ndarray
    interval_ms: float

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise DomainError(
                f"sharp sequence must be [n,3,H,W], got {self.frames.shape}")

    def __len__(self):
        return self.frames.shape[0]

    def reversed(self):
        return SharpSequence(self.frames[::-1].copy(), self.interval_ms)


def sequence_from_scene(scene, cfg, n_frames):
    """Sample a scene at the sharp frame rate."""
    dt = cfg.sharp_interval_ms
    frames = np.stack([scene.render(i * dt) for i in range(n_frames)])
    return SharpSequence(frames, dt)


def frames_needed(cfg, n_blur):
    """Sharp frames required for n_blur full exposure windows."""
    return (n_blur - 1) * cfg.stride + cfg.frames_per_blur


# -- blur synthesis ------------------------------------------------------------

def synth_blur_discrete(frames, start, m_avg, gamma=None):
    """Average m_avg consecutive sharp frames starting at ``start``.

    With ``gamma`` set, averaging happens in linear light: values are
    decoded by x**gamma, averaged, and re-encoded by the inverse power.
    """
    n = frames.shape[0]
    if start < 0 or start + m_avg > n:
        raise DomainError(
            f"window [{start}, {start + m_avg}) overruns {n} frames")
    window = frames[start:start + m_avg]
    if gamma is None:
        return window.mean(axis=0)
    linear = np.power(np.clip(window, 0.0, 1.0), gamma)
    return np.power(linear.mean(axis=0), 1.0 / gamma).astype(frames.dtype)


def synth_blur_continuous(scene, t0_ms, exposure_ms, supersample_k):
    """Trapezoidal integral of the scene over one exposure, normalized.

    supersample_k is the number of integration intervals; accuracy grows
    with it and the result converges for any smooth scene.
    """
    if exposure_ms <= 0:
        raise DomainError(f"exposure must be positive, got {exposure_ms}")
    if supersample_k < 1:
        raise DomainError("supersample_k must be >= 1")
    k = int(supersample_k)
    acc = 0.5 * (scene.render(t0_ms) + scene.render(t0_ms + exposure_ms))
    for i in range(1, k):
        acc = acc + scene.render(t0_ms + exposure_ms * i / k)
    return (acc / k).astype(np.float32)


# -- triplets ------------------------------------------------------------------

@dataclass
class BlurTriplet:
    """Three consecutive blurred frames plus cur's sharp targets."""

    prev: np.ndarray
    cur: np.ndarray
    nxt: np.ndarray
    targets: np.ndarray          # [frames_per_blur, 3, H, W]
    t_grid: np.ndarray           # [frames_per_blur], 0..1
    index: int = 0


def _assemble(blurs, target_stacks, t_grid):
    """Edge-replicating triplet assembly over a list of blurred frames."""
    n = len(blurs)
    triplets = []
    for m in range(n):
        prev = blurs[max(m - 1, 0)]
        nxt = blurs[min(m + 1, n - 1)]
        triplets.append(BlurTriplet(prev=prev, cur=blurs[m], nxt=nxt,
                                    targets=target_stacks[m],
                                    t_grid=t_grid.copy(), index=m))
    return triplets


def build_triplets(seq, cfg, gamma=None):
    """Discrete-averaging triplets from a sharp sequence.

    Exposure m covers sharp frames [m*stride, m*stride + frames_per_blur);
    the deadtime frames between exposures are never used as targets.
    """
    fpb = cfg.frames_per_blur
    n_blur = (len(seq) - fpb) // cfg.stride + 1 if len(seq) >= fpb else 0
    if n_blur < 3:
        raise DomainError(
            f"sequence of {len(seq)} frames yields {n_blur} exposure "
            f"windows; at least 3 are required for triplets")
    blurs, targets = [], []
    for m in range(n_blur):
        start = m * cfg.stride
        blurs.append(synth_blur_discrete(seq.frames, start, fpb, gamma=gamma))
        targets.append(seq.frames[start:start + fpb].copy())
    return _assemble(blurs, targets, cfg.t_grid)


def build_triplets_continuous(scene, cfg, n_blur, supersample_k=64):
    """Continuous-accumulation triplets rendered from an analytic scene."""
    if n_blur < 3:
        raise DomainError("at least 3 exposure windows are required")
    fpb = cfg.frames_per_blur
    dt = cfg.sharp_interval_ms
    stride_ms = cfg.stride * dt
    exposure_ms = (fpb - 1) * dt     # first to last target frame
    blurs, targets = [], []
    for m in range(n_blur):
        t0 = m * stride_ms
        blurs.append(synth_blur_continuous(scene, t0, exposure_ms,
                                           supersample_k))
        targets.append(np.stack([scene.render(t0 + j * dt)
                                 for j in range(fpb)]))
    return _assemble(blurs, targets, cfg.t_grid)


# -- augmentation --------------------------------------------------------------

def _apply_spatial(img, flip_h, flip_v, rot_k, crop):
    out = img
    if crop is not None:
        top, left, size = crop
        out = out[..., top:top + size, left:left + size]
    if flip_h:
        out = out[..., :, ::-1]
    if flip_v:
        out = out[..., ::-1, :]
    if rot_k:
        out = np.rot90(out, rot_k, axes=(-2, -1))
    return np.ascontiguousarray(out)


def augment(triplet, seed, crop_size=None):
    """Seeded flips / 90-degree rotations / crop, identical on all frames."""
    h, w = triplet.cur.shape[-2:]
    rng = np.random.default_rng(seed)
    flip_h = bool(rng.integers(2))
    flip_v = bool(rng.integers(2))
    rot_k = int(rng.integers(4))
    crop = None
    if crop_size is not None:
        if crop_size > h or crop_size > w:
            raise DomainError(
                f"crop {crop_size} exceeds frame extents {(h, w)}")
        top = int(rng.integers(h - crop_size + 1))
        left = int(rng.integers(w - crop_size + 1))
        crop = (top, left, crop_size)

    def f(x):
        return _apply_spatial(x, flip_h, flip_v, rot_k, crop)

    return BlurTriplet(prev=f(triplet.prev), cur=f(triplet.cur),
                       nxt=f(triplet.nxt), targets=f(triplet.targets),
                       t_grid=triplet.t_grid.copy(), index=triplet.index)


# -- on-disk dataset -----------------------------------------------------------

_PNG_PARAMS = [cv2.IMWRITE_PNG_COMPRESSION, 3]


def write_png(path, img, bit16=False):
    """img: [3,H,W] float in [0,1] -> RGB png (stored BGR per cv2)."""
    chw = to_uint16(img) if bit16 else to_uint8(img)
    hwc = chw.transpose(1, 2, 0)[:, :, ::-1]    # RGB -> BGR
    ok = cv2.imwrite(str(path), np.ascontiguousarray(hwc), _PNG_PARAMS)
    if not ok:
        raise IOError(f"failed to write {path}")


def _read_png(path):
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IOError(f"failed to read {path}")
    rgb = raw[:, :, ::-1].transpose(2, 0, 1)
    if raw.dtype == np.uint16:
        return from_uint16(rgb)
    return from_uint8(rgb)


def save_sequence(root, split, seq_id, triplets, cfg, bit16=False):
    """Write one sequence's triplets under root/split/seq_id/."""
    base = os.path.join(root, split, seq_id)
    os.makedirs(os.path.join(base, "blur"), exist_ok=True)
    os.makedirs(os.path.join(base, "sharp"), exist_ok=True)
    fpb = cfg.frames_per_blur
    for tri in triplets:
        m = tri.index
        write_png(os.path.join(base, "blur", f"{m:06d}.png"), tri.cur, bit16)
        for j in range(fpb):
            write_png(os.path.join(base, "sharp", f"{m * fpb + j:06d}.png"),
                       tri.targets[j], bit16)
    meta = {
        "capture": asdict(cfg),
        "t_grid": [float(t) for t in cfg.t_grid],
        "n_blur": len(triplets),
        "bit16": bool(bit16),
    }
    with open(os.path.join(base, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_sequence(root, split, seq_id):
    """Read triplets back; returns (list of BlurTriplet, CaptureConfig)."""
    base = os.path.join(root, split, seq_id)
    with open(os.path.join(base, "meta.json")) as fh:
        meta = json.load(fh)
    cfg = CaptureConfig(**meta["capture"])
    fpb = cfg.frames_per_blur
    n_blur = meta["n_blur"]
    blurs = [_read_png(os.path.join(base, "blur", f"{m:06d}.png"))
             for m in range(n_blur)]
    targets = [np.stack([_read_png(os.path.join(
        base, "sharp", f"{m * fpb + j:06d}.png")) for j in range(fpb)])
        for m in range(n_blur)]
    return _assemble(blurs, targets, np.asarray(meta["t_grid"],
                                                dtype=np.float64)), cfg


def list_sequences(root, split):
    base = os.path.join(root, split)
    if not os.path.isdir(base):
        return []
    return sorted(d for d in os.listdir(base)
                  if os.path.isdir(os.path.join(base, d)))
