"""Two-phase optimization: base training with the dual-end auxiliary head,
then fine-tuning through the ensembling fusion head.

The loss follows one recipe throughout: mean absolute error at the queried
time plus a weighted pair of mean absolute errors at the two exposure ends.
The end frames are predicted by the auxiliary head straight from the shared
features, which carry no time encoding, so the extra supervision anchors
the shared trunk without competing with the renderer.  Setting the dual-end
weight to zero disconnects the auxiliary head entirely, which is the
ablation wiring.
"""

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from blurinterp import tensor as T
from blurinterp.checkpoint import load as ckpt_load
from blurinterp.checkpoint import save as ckpt_save
from blurinterp.errors import ConfigError, DivergenceError, DomainError, \
    ShapeError


# reference budget: base phase twice as long as the fine-tune phase
DEFAULT_BASE_EPOCHS = 800
DEFAULT_TSE_EPOCHS = 400


@dataclass(frozen=True)
class LossConfig:
    """dual_end_weight scales the two exposure-end error terms."""

    dual_end_weight: float = 0.5

    def __post_init__(self):
        if self.dual_end_weight < 0:
            raise ConfigError("dual_end_weight must be >= 0")


@dataclass(frozen=True)
class OptimConfig:
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    eps: float = 1e-8
    grad_clip: float = 0.0        # 0 disables clipping

    def __post_init__(self):
        if self.lr_end > self.lr_start:
            raise ConfigError("lr_end must not exceed lr_start")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")


def cosine_lr(step, total_steps, lr_start, lr_end):
    """Half-cosine decay from lr_start at step 0 to lr_end at total_steps."""
    if step < 0 or step > total_steps:
        raise DomainError(f"step {step} outside [0, {total_steps}]")
    frac = 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
    return lr_end + (lr_start - lr_end) * frac


def sample_t(grid, rng):
    """One time query drawn uniformly from the dataset's discrete grid."""
    grid = np.asarray(grid)
    if grid.size == 0:
        raise DomainError("cannot sample from an empty time grid")
    return float(grid[rng.integers(grid.size)])


def l1(pred, gt):
    """Mean absolute error as a scalar graph node."""
    if pred.shape != gt.shape:
        raise ShapeError(f"L1 operands {pred.shape} vs {gt.shape}")
    return T.tmean(T.tabs(pred - gt))


def total_loss(pred_t, gt_t, pred_0, gt_0, pred_1, gt_1, dual_end_weight):
    """L1 at t plus weighted L1 at both exposure ends."""
    loss_t = l1(pred_t, gt_t)
    if dual_end_weight == 0:
        return loss_t, loss_t, None, None
    loss_0 = l1(pred_0, gt_0)
    loss_1 = l1(pred_1, gt_1)
    total = loss_t + T.Tensor(dual_end_weight) * (loss_0 + loss_1)
    return total, loss_t, loss_0, loss_1


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(self, params, cfg):
        self.params = dict(params)
        self.cfg = cfg
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grad_norm(self):
        sq = 0.0
        for p in self.params.values():
            if p.grad is not None:
                sq += float(np.sum(p.grad.astype(np.float64) ** 2))
        return math.sqrt(sq)

    def step(self, lr):
        cfg = self.cfg
        scale = 1.0
        if cfg.grad_clip > 0:
            norm = self.grad_norm()
            if norm > cfg.grad_clip:
                scale = cfg.grad_clip / norm
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale if scale != 1.0 else p.grad
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            p.data -= (lr * update + lr * cfg.weight_decay
                       * p.data).astype(p.data.dtype)

    def state_arrays(self):
        """Moment buffers and step counter as flat named arrays."""
        out = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        out["opt.t"] = np.asarray(float(self.t), dtype=np.float64)
        return out

    def load_state_arrays(self, arrays):
        for name in self.params:
            self.m[name] = arrays[f"opt.m.{name}"].astype(
                self.m[name].dtype, copy=True)
            self.v[name] = arrays[f"opt.v.{name}"].astype(
                self.v[name].dtype, copy=True)
        self.t = int(arrays["opt.t"])


# -- batching ------------------------------------------------------------------

def _stack_batch(triplets, t_indices):
    """Triplets + per-sample grid indices -> batch arrays."""
    prev = np.stack([tr.prev for tr in triplets])
    cur = np.stack([tr.cur for tr in triplets])
    nxt = np.stack([tr.nxt for tr in triplets])
    gt_t = np.stack([tr.targets[j] for tr, j in zip(triplets, t_indices)])
    gt_0 = np.stack([tr.targets[0] for tr in triplets])
    gt_1 = np.stack([tr.targets[-1] for tr in triplets])
    ts = np.array([tr.t_grid[j] for tr, j in zip(triplets, t_indices)],
                  dtype=np.float64)
    return prev, cur, nxt, ts, gt_t, gt_0, gt_1


def psnr_from_arrays(pred, gt, peak=1.0):
    mse = float(np.mean((pred.astype(np.float64)
                         - gt.astype(np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * math.log10(peak * peak / mse)


def compute_batch_loss(model, triplets, t_indices, loss_cfg, tse=False):
    """Forward pass and loss graph for one batch; returns (total, parts).

    parts is a dict of float diagnostics including train PSNR at t.
    """
    prev, cur, nxt, ts, gt_t, gt_0, gt_1 = _stack_batch(triplets, t_indices)
    p = T.Tensor(prev)
    c = T.Tensor(cur)
    n = T.Tensor(nxt)
    lam = loss_cfg.dual_end_weight
    if tse:
        shared = model.extract_shared(p, c, n)
        shared_rev = model.extract_shared(n, c, p)
        feat_a = model.render_features(shared, ts)
        feat_b = model.render_features(shared_rev, 1.0 - ts)
        fused = T.concat([feat_a, feat_b], axis=1)
        pred_t = model._decode(fused, model.head_tse_w, model.head_tse_b)
        if model.config.global_residual:
            pred_t = pred_t + c
    else:
        shared = model.extract_shared(p, c, n)
        feat = model.render_features(shared, ts)
        pred_t = model._decode(feat, model.head_main_w, model.head_main_b)
        if model.config.global_residual:
            pred_t = pred_t + c
    if lam > 0:
        # the auxiliary head reads the shared features directly, with no
        # time encoding in between, so its gradient anchors the shared
        # trunk at both exposure ends without touching the renderer
        pred_0, pred_1 = model.dual_end(shared)
    else:
        pred_0 = pred_1 = None
    total, lt, l0, l1_ = total_loss(pred_t, T.Tensor(gt_t), pred_0,
                                    T.Tensor(gt_0), pred_1, T.Tensor(gt_1),
                                    lam)
    parts = {
        "loss": float(total.data),
        "loss_t": float(lt.data),
        "loss_0": float(l0.data) if l0 is not None else 0.0,
        "loss_1": float(l1_.data) if l1_ is not None else 0.0,
        "psnr_train": psnr_from_arrays(pred_t.data, gt_t),
    }
    return total, parts


def train_step(model, triplets, t_indices, optim, lr, loss_cfg, tse=False,
               step=0):
    """One optimization step; raises on a non-finite loss."""
    optim.zero_grad()
    total, parts = compute_batch_loss(model, triplets, t_indices, loss_cfg,
                                      tse=tse)
    if not np.isfinite(parts["loss"]):
        raise DivergenceError(
            f"non-finite loss at step {step} (lr {lr:.3e}): "
            f"t={parts['loss_t']:.4g} end0={parts['loss_0']:.4g} "
            f"end1={parts['loss_1']:.4g}")
    total.backward()
    optim.step(lr)
    parts["lr"] = lr
    return parts


# -- driver --------------------------------------------------------------------

LOG_FIELDS = ("step", "lr", "loss", "loss_t", "loss_0", "loss_1",
              "psnr_train")


def fit(model, triplets, steps, optim_cfg=None, loss_cfg=None, batch_size=2,
        seed=0, tse=False, log_path=None, optim=None, start_step=0,
        stop_step=None, on_step=None):
    """Run the training loop over in-memory triplets.

    Returns (history, optim).  Sampling of triplets and time queries is
    driven by one seeded generator, so a fixed seed reproduces the loss
    curve exactly on the same build.  ``steps`` is the total schedule
    budget; an interrupted run resumes with the same ``steps`` and the
    saved ``start_step`` (``stop_step`` ends a segment early).
    """
    optim_cfg = optim_cfg or OptimConfig()
    loss_cfg = loss_cfg or LossConfig()
    if optim is None:
        optim = AdamW(model.named_params(), optim_cfg)
    model.train_mode(True)
    rng = np.random.default_rng(seed)
    # replay the sampler to the resume point so resumed runs stay aligned
    for _ in range(start_step):
        rng.integers(len(triplets), size=batch_size)
        rng.integers(len(triplets[0].t_grid), size=batch_size)
    history = []
    writer = None
    fh = None
    if log_path:
        os.makedirs(os.path.dirname(log_path) or ".", exist_ok=True)
        fresh = start_step == 0 or not os.path.exists(log_path)
        fh = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if fresh:
            writer.writeheader()
    try:
        for step in range(start_step, min(stop_step or steps, steps)):
            idx = rng.integers(len(triplets), size=batch_size)
            tj = rng.integers(len(triplets[0].t_grid), size=batch_size)
            batch = [triplets[i] for i in idx]
            lr = cosine_lr(step, steps, optim_cfg.lr_start, optim_cfg.lr_end)
            parts = train_step(model, batch, list(tj), optim, lr, loss_cfg,
                               tse=tse, step=step)
            parts["step"] = step
            history.append(parts)
            if writer:
                writer.writerow({k: parts[k] for k in LOG_FIELDS})
                fh.flush()
            if on_step:
                on_step(step, parts)
    finally:
        if fh:
            fh.close()
    return history, optim


def tse_finetune(model, base_state, triplets, steps, optim_cfg=None,
                 loss_cfg=None, batch_size=2, seed=0, log_path=None,
                 on_step=None):
    """Fine-tune from a base checkpoint through the fusion head.

    Non-head parameters start bit-identical to the checkpoint; the fusion
    head keeps its fresh initialization.  The auxiliary dual-end head stays
    active, and every parameter remains trainable.
    """
    expect = model.head_tse_w.shape
    got = base_state.get("head.tse.w", np.zeros(expect)).shape
    if tuple(got) != tuple(expect):
        raise ConfigError(
            f"fusion head expects weights {tuple(expect)}, checkpoint has "
            f"{tuple(got)}")
    model.load_state(base_state, strict=False)
    return fit(model, triplets, steps, optim_cfg=optim_cfg,
               loss_cfg=loss_cfg, batch_size=batch_size, seed=seed,
               tse=True, log_path=log_path, on_step=on_step)


# -- train-state serialization --------------------------------------------------

def save_train_state(path, model, optim=None, step=0):
    arrays = dict(model.state_dict())
    if optim is not None:
        arrays.update(optim.state_arrays())
    arrays["train.step"] = np.asarray(float(step), dtype=np.float64)
    ckpt_save(path, arrays)


def load_train_state(path, model, optim=None):
    """Restore model (and optionally optimizer) state; returns the step."""
    arrays = ckpt_load(path)
    model_state = {k: v for k, v in arrays.items()
                   if not k.startswith("opt.") and not k.startswith("train.")}
    model.load_state(model_state)
    if optim is not None and "opt.t" in arrays:
        optim.load_state_arrays(arrays)
    return int(arrays.get("train.step", np.zeros(())))
