"""Evaluation metrics, channel-similarity analysis, and the amortization
benchmark.

The channel-similarity map treats every channel of the shared features as a
random variable sampled over batch and spatial positions, builds linear-
kernel Gram matrices, and normalizes the Hilbert-Schmidt independence
criterion between channel pairs.  For linear kernels on scalar channels
this reduces algebraically to the squared correlation coefficient, which is
what the fast path computes; the tests pin it against the literal
Gram-plus-HSIC composition.
"""

import csv
import math
import time
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from blurinterp import tensor as T
from blurinterp.errors import DomainError, ShapeError


# -- PSNR ------------------------------------------------------------------------

PSNR_CAP_DB = 100.0


def psnr(pred, gt, peak=1.0):
    """10*log10(peak^2 / MSE), capped at 100 dB for identical inputs."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"psnr operands {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred.astype(np.float64)
                         - gt.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(peak * peak / mse), PSNR_CAP_DB)


# -- SSIM ------------------------------------------------------------------------

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _gaussian_kernel():
    half = SSIM_WINDOW // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-0.5 * (xs / SSIM_SIGMA) ** 2)
    g /= g.sum()
    return np.outer(g, g)


_SSIM_KERN = _gaussian_kernel()


def _filter_valid(img):
    win = sliding_window_view(img, (SSIM_WINDOW, SSIM_WINDOW))
    return np.einsum("hwij,ij->hw", win, _SSIM_KERN)


def ssim(pred, gt, peak=1.0):
    """Mean structural similarity over valid window positions and channels.

    Gaussian 11x11 window (sigma 1.5), K1=0.01, K2=0.03.  Inputs are
    [..., H, W]; leading axes are treated as channels.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"ssim operands {pred.shape} vs {gt.shape}")
    h, w = pred.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise DomainError(
            f"images {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} "
            f"window")
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    vals = []
    for x, y in zip(pred.reshape(-1, h, w), gt.reshape(-1, h, w)):
        mx = _filter_valid(x)
        my = _filter_valid(y)
        vx = _filter_valid(x * x) - mx * mx
        vy = _filter_valid(y * y) - my * my
        vxy = _filter_valid(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * vxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


# -- HSIC / CKA --------------------------------------------------------------------

def gram_linear(x):
    """Linear-kernel Gram matrix of samples [n, d] (d may be omitted)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x @ x.T


def hsic(k, l):
    """Biased HSIC estimator trace(KHLH)/(n-1)^2 with H = I - 1/n."""
    k = np.asarray(k, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    if k.shape != l.shape or k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ShapeError(f"Gram matrices must match and be square, got "
                         f"{k.shape} and {l.shape}")
    n = k.shape[0]
    if n < 2:
        raise DomainError("HSIC needs at least 2 samples")
    kc = k - k.mean(axis=0, keepdims=True)
    kc -= kc.mean(axis=1, keepdims=True)
    return float(np.sum(kc * l) / (n - 1) ** 2)


@dataclass
class CKAMap:
    """Channel-by-channel similarity matrix, optionally reordered."""

    matrix: np.ndarray            # [C, C], symmetric, unit diagonal
    order: np.ndarray             # original channel index per row


def _spectral_order(m):
    """Order channels by the Fiedler vector of the similarity graph."""
    d = m.sum(axis=1)
    lap = np.diag(d) - m
    _, vecs = np.linalg.eigh(lap)
    return np.argsort(vecs[:, 1], kind="stable")


def cka_map(features, max_samples=2048, seed=0, reorder=None):
    """Similarity of every channel pair of collected features [B, C, H, W].

    Per channel the sample vector is the flattened batch-by-spatial
    activations, subsampled to max_samples positions for tractability.
    Zero-variance channels get a zeroed row/column and a warning.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 4:
        raise ShapeError(f"expected [B,C,H,W] features, got {feats.shape}")
    b, c, h, w = feats.shape
    x = feats.transpose(1, 0, 2, 3).reshape(c, -1)
    n = x.shape[1]
    if n > max_samples:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(n, size=max_samples, replace=False))
        x = x[:, keep]
    xc = x - x.mean(axis=1, keepdims=True)
    norms = np.sqrt((xc * xc).sum(axis=1))
    dead = norms == 0
    if dead.any():
        warnings.warn(f"{int(dead.sum())} zero-variance channel(s); their "
                      f"similarity rows are zeroed", RuntimeWarning)
    safe = np.where(dead, 1.0, norms)
    unit = xc / safe[:, None]
    m = (unit @ unit.T) ** 2
    m[dead, :] = 0.0
    m[:, dead] = 0.0
    m = np.clip(m, 0.0, 1.0)
    m = (m + m.T) / 2
    order = np.arange(c)
    if reorder == "spectral":
        order = _spectral_order(m)
        m = m[np.ix_(order, order)]
    elif reorder is not None:
        raise DomainError(f"unknown reorder {reorder!r}")
    return CKAMap(matrix=m, order=order)


def collect_shared_features(model, triplets, limit=None):
    """Shared-feature activations over a test set, stacked on batch."""
    model.train_mode(False)
    outs = []
    with T.no_grad():
        for tri in triplets[:limit]:
            p, c, n = (T.Tensor(a[None]) for a in (tri.prev, tri.cur,
                                                   tri.nxt))
            outs.append(model.extract_shared(p, c, n).data)
    return np.concatenate(outs, axis=0)


# -- evaluation --------------------------------------------------------------------

@dataclass
class MetricReport:
    mean_psnr: float
    mean_ssim: float
    per_t: list                   # rows {t, psnr, ssim}
    per_frame: list               # rows {triplet, j, t, psnr, ssim}

    def as_dict(self):
        return {"mean_psnr": self.mean_psnr, "mean_ssim": self.mean_ssim,
                "per_t": self.per_t, "per_frame": self.per_frame}


def evaluate(model, triplets, tse=False, compute_ssim=True):
    """PSNR/SSIM over every triplet and grid time; shared features are
    extracted once per triplet and reused across time queries."""
    model.train_mode(False)
    per_frame = []
    grid = triplets[0].t_grid
    with T.no_grad():
        for tri in triplets:
            p, c, n = (T.Tensor(a[None]) for a in (tri.prev, tri.cur,
                                                   tri.nxt))
            if tse:
                shared_f = model.extract_shared(p, c, n)
                shared_b = model.extract_shared(n, c, p)
            else:
                shared = model.extract_shared(p, c, n)
            for j, t in enumerate(tri.t_grid):
                if tse:
                    fa = model.render_features(shared_f, float(t))
                    fb = model.render_features(shared_b, 1.0 - float(t))
                    fused = T.concat([fa, fb], axis=1)
                    pred = model._decode(fused, model.head_tse_w,
                                         model.head_tse_b)
                    if model.config.global_residual:
                        pred = pred + c
                else:
                    pred = model.render_motion(shared, float(t))
                    if model.config.global_residual:
                        pred = pred + c
                arr = pred.data[0]
                row = {"triplet": tri.index, "j": j, "t": float(t),
                       "psnr": psnr(arr, tri.targets[j])}
                row["ssim"] = ssim(arr, tri.targets[j]) if compute_ssim \
                    else float("nan")
                per_frame.append(row)
    per_t = []
    for j, t in enumerate(grid):
        rows = [r for r in per_frame if r["j"] == j]
        per_t.append({"t": float(t),
                      "psnr": float(np.mean([r["psnr"] for r in rows])),
                      "ssim": float(np.mean([r["ssim"] for r in rows]))})
    return MetricReport(
        mean_psnr=float(np.mean([r["psnr"] for r in per_frame])),
        mean_ssim=float(np.mean([r["ssim"] for r in per_frame])),
        per_t=per_t, per_frame=per_frame)


def time_varying_eval(model, triplets, tse=False):
    """PSNR per grid time averaged over the set (the per-t curve)."""
    return evaluate(model, triplets, tse=tse, compute_ssim=False).per_t


# -- amortization benchmark ----------------------------------------------------------

def _fixed_triplet(size, seed=0):
    rng = np.random.default_rng(seed)
    return [T.Tensor(rng.uniform(0, 1, (1, 3, size, size))
                     .astype(np.float32)) for _ in range(3)]


def _run_queries(model, p, c, n, k):
    """One amortized pass: shared features once, k time queries."""
    shared = model.extract_shared(p, c, n)
    for t in np.linspace(0.0, 1.0, k):
        model.render_motion(shared, float(t))


def bench_amortization(model, k_list, size=64, seed=0, cost="time"):
    """Cost of serving k time queries from one shared extraction.

    cost="time" measures wall-clock seconds (one warmup pass excluded);
    cost="macs" counts multiply-accumulates, which is deterministic.
    Returns rows {k, total, fn_stage, per_query, fn_calls}.
    """
    model.train_mode(False)
    p, c, n = _fixed_triplet(size, seed)
    rows = []
    with T.no_grad():
        _run_queries(model, p, c, n, 1)      # warmup (JIT, caches)
        for k in k_list:
            calls0 = model.fn_calls
            if cost == "time":
                t0 = time.perf_counter()
                shared = model.extract_shared(p, c, n)
                t1 = time.perf_counter()
                for t in np.linspace(0.0, 1.0, k):
                    model.render_motion(shared, float(t))
                t2 = time.perf_counter()
                fn_stage, total = t1 - t0, t2 - t0
            elif cost == "macs":
                with T.count_macs() as macs:
                    shared = model.extract_shared(p, c, n)
                fn_stage = float(sum(macs.values()))
                with T.count_macs() as macs:
                    for t in np.linspace(0.0, 1.0, k):
                        model.render_motion(shared, float(t))
                total = fn_stage + float(sum(macs.values()))
            else:
                raise DomainError(f"unknown cost {cost!r}")
            rows.append({"k": int(k), "total": total, "fn_stage": fn_stage,
                         "per_query": (total - fn_stage) / k,
                         "fn_calls": model.fn_calls - calls0})
    return rows


def fit_affine(ks, totals):
    """Least-squares a + b*k fit; returns (a, b)."""
    b, a = np.polyfit(np.asarray(ks, dtype=np.float64),
                      np.asarray(totals, dtype=np.float64), 1)
    return float(a), float(b)


def sweep_block_split(base_config, splits, k_max=8, size=32, seed=0,
                      cost="macs"):
    """Amortization slope for different (shared, per-query) block splits.

    Every split keeps the total block count fixed; larger shared stages
    shrink the marginal per-query cost b of the a + b*k fit.
    """
    from blurinterp.network import BiT
    rows = []
    for n_blocks, m_blocks in splits:
        cfg = base_config.replaced(n_blocks=n_blocks, m_blocks=m_blocks)
        model = BiT(cfg, seed=seed)
        bench = bench_amortization(model, [1, k_max], size=size, seed=seed,
                                   cost=cost)
        a, b = fit_affine([r["k"] for r in bench],
                          [r["total"] for r in bench])
        rows.append({"n_blocks": n_blocks, "m_blocks": m_blocks,
                     "intercept": a, "slope": b})
    return rows


# -- CSV emission ------------------------------------------------------------------

def write_csv(path, rows, fields):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in fields})


def write_cka_csv(path, cka):
    """Columns: channel (original index, in emitted order) then c0..cN."""
    c = cka.matrix.shape[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channel"] + [f"c{i}" for i in range(c)])
        for i in range(c):
            writer.writerow([int(cka.order[i])]
                            + [f"{v:.6f}" for v in cka.matrix[i]])
