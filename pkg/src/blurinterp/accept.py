"""Self-contained re-verification of the release checklist.

Each check returns a CheckResult; the repro pipeline formats the twelve of
them into a deterministic plain-text report.  Checks that depend on a
training budget (overfit quality, the dual-end ablation direction) honor
whatever budget the caller trained with, so reduced budgets produce honest
FAIL lines rather than weakened thresholds.  Wall-clock quantities are kept
out of the report text so repeated runs are byte-identical.
"""

from dataclasses import dataclass

import numpy as np
from scipy.signal import find_peaks

from blurinterp import attention as A
from blurinterp import network as N
from blurinterp import tensor as T
from blurinterp.analysis import (bench_amortization, cka_map,
                                 collect_shared_features, fit_affine,
                                 sweep_block_split, time_varying_eval)
from blurinterp.data import (build_triplets, frames_needed, make_scene,
                             profile, sequence_from_scene,
                             synth_blur_continuous, synth_blur_discrete)
from blurinterp.training import (LossConfig, OptimConfig, cosine_lr, fit,
                                 total_loss)

OVERFIT_PSNR_DB = 35.0
GRADCHECK_TOL = 1e-4
ATTENTION_TOL = 1e-6
FLOP_RATIO = 1.3125
FLOP_RTOL = 0.05
FIT_RESIDUAL = 0.10
DTS_MARGIN_DB = 0.1


@dataclass
class CheckResult:
    num: int
    name: str
    ok: bool
    detail: str


def _toy_triplets(size=64, seed=0, n_blur=4, speed=1.0, kind="blobs", capture="tiny"):
    cap = profile(capture)
    scene = make_scene(kind, size, seed=seed, speed=speed)
    seq = sequence_from_scene(scene, cap, frames_needed(cap, n_blur))
    return build_triplets(seq, cap)


def default_overfit_data(size=64, seed=0):
    """The 4-triplet synthetic set used by the overfit criteria.

    The adobe240 capture gives an 11-point time grid, so interior
    timestamps dominate the sampled batches, and the doubled scene speed
    keeps the exposure ends hard enough that anchoring them is not
    already implied by fitting the middle.
    """
    return _toy_triplets(size=size, seed=seed, n_blur=4, speed=2.0,
                         capture="adobe240")


# -- 1: gradient correctness ------------------------------------------------------

def check_gradients(seed=0):
    cfg = N.ModelConfig.tiny()
    model = N.BiT(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    frames = [T.Tensor(rng.uniform(0, 1, (1, 3, 16, 16))) for _ in range(3)]
    target = T.Tensor(rng.uniform(0, 1, (1, 3, 16, 16)))

    def loss_value():
        out = model.forward(*frames, 0.3)
        diff = out - target
        return T.tmean(diff * diff)

    loss = loss_value()
    loss.backward()
    names = ["fn.shallow.conv0.w", "fn.rstb0.stb0.attn.p_q", "fm.tenc.w",
             "fn.rstb0.stb1.mlp.w1", "head.main.w"]
    params = model.named_params()
    worst = 0.0
    eps = 1e-5
    for name in names:
        p = params[name]
        idx = np.unravel_index(np.argmax(np.abs(p.grad)), p.shape)
        analytic = float(p.grad[idx])
        with T.no_grad():
            orig = float(p.data[idx])
            p.data[idx] = orig + eps
            hi = float(loss_value().data)
            p.data[idx] = orig - eps
            lo = float(loss_value().data)
            p.data[idx] = orig
        numeric = (hi - lo) / (2 * eps)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric),
                                            1e-12)
        worst = max(worst, rel)
    ok = worst < GRADCHECK_TOL
    return CheckResult(1, "gradient-correctness", ok,
                       f"full-composition spot check max rel err "
                       f"{worst:.2e} (tol {GRADCHECK_TOL:.0e}); per-op "
                       f"checks live in the unit suite")


# -- 2: attention vs enumeration oracle ---------------------------------------------

def _enumerated_attention(x, p, shift):
    """Pairwise-enumerated shifted-window attention, [C,H,W] -> [C,H,W]."""
    c, h, w = x.shape
    m = p.window
    heads, d = p.heads, p.head_dim
    tok = x.reshape(c, h * w).T
    q = (tok @ p.p_q.data).reshape(-1, heads, d)
    k = (tok @ p.p_k.data).reshape(-1, heads, d)
    v = (tok @ p.p_v.data).reshape(-1, heads, d)
    table = p.bias_table.data
    frag = lambda i: (i + shift) // m
    out = np.zeros((h * w, heads, d), dtype=np.float64)
    for pi in range(h):
        for pj in range(w):
            pidx = pi * w + pj
            partners = [qi * w + qj for qi in range(h) for qj in range(w)
                        if frag(qi) == frag(pi) and frag(qj) == frag(pj)]
            for hd in range(heads):
                logits = np.array([
                    float(q[pidx, hd] @ k[qidx, hd]) / np.sqrt(d)
                    + float(table[((pi - qidx // w) + m - 1) * (2 * m - 1)
                                  + (pj - qidx % w) + m - 1, hd])
                    for qidx in partners])
                weights = np.exp(logits - logits.max())
                weights /= weights.sum()
                out[pidx, hd] = weights @ v[partners, hd]
    return (out.reshape(h * w, heads * d) @ p.p_out.data).T.reshape(c, h, w)


def check_attention_oracle(seed=0):
    rng = np.random.default_rng(seed)
    params = A.AttentionParams(6, 2, 4, rng, dtype=np.float64)
    x = rng.standard_normal((1, 6, 8, 8))
    worst = 0.0
    for shift in (0, 2):
        with T.no_grad():
            got = A.shifted_wmsa(T.Tensor(x), params, shift).data[0]
        want = _enumerated_attention(x[0], params, shift)
        worst = max(worst, float(np.abs(got - want).max()))
    ok = worst < ATTENTION_TOL
    return CheckResult(2, "attention-oracle", ok,
                       f"8x8 map, window 4, shifts 0/2: max abs diff "
                       f"{worst:.2e} (tol {ATTENTION_TOL:.0e})")


# -- 3: roundtrips ------------------------------------------------------------------

def check_roundtrips(seed=0):
    rng = np.random.default_rng(seed)
    fails = 0
    for _ in range(100):
        m = int(rng.choice([1, 2, 4]))
        b = int(rng.integers(1, 3))
        c = int(rng.integers(1, 5))
        h = m * int(rng.integers(1, 5))
        w = m * int(rng.integers(1, 5))
        x = rng.standard_normal((b, c, h, w)).astype(np.float32)
        back = A.window_reverse(A.window_partition(T.Tensor(x), m), m,
                                b, h, w)
        fails += not np.array_equal(back.data, x)
    for _ in range(100):
        r = int(rng.integers(1, 5))
        b = int(rng.integers(1, 3))
        c = r * r * int(rng.integers(1, 4))
        h = int(rng.integers(1, 5))
        w = int(rng.integers(1, 5))
        x = rng.standard_normal((b, c, h, w)).astype(np.float32)
        back = T.pixel_unshuffle(T.pixel_shuffle(T.Tensor(x), r), r)
        fails += not np.array_equal(back.data, x)
    return CheckResult(3, "roundtrips", fails == 0,
                       f"window partition + pixel shuffle inverses over "
                       f"100 randomized shapes each: {fails} mismatches")


# -- 4: multi-scale cost ratio --------------------------------------------------------

def check_flop_ratio(seed=0):
    rng = np.random.default_rng(seed)
    p = N.MsRstbParams(24, 3, 4, 3, rng)
    x = T.Tensor(rng.standard_normal((1, 24, 32, 32)).astype(np.float32))
    with T.no_grad():
        with T.count_macs() as ms:
            N.ms_rstb_forward(x, p, scales=3, rescale=2)
        with T.count_macs() as plain:
            A.rstb_forward(x, p.rstb)
    ratio = (ms["attention"] + ms["mlp"]) / (plain["attention"]
                                             + plain["mlp"])
    ok = abs(ratio - FLOP_RATIO) / FLOP_RATIO < FLOP_RTOL
    return CheckResult(4, "flop-ratio", ok,
                       f"multi-scale/plain attention+mlp MACs = {ratio:.4f} "
                       f"(target {FLOP_RATIO}, rtol {FLOP_RTOL})")


# -- 5: amortization structure ---------------------------------------------------------

def check_amortization(model=None, size=32, cost="macs"):
    model = model or N.BiT(N.ModelConfig.tiny(), seed=0)
    rows = bench_amortization(model, [1, 4, 16, 60], size=size, cost=cost)
    a, b = fit_affine([r["k"] for r in rows], [r["total"] for r in rows])
    residual = max(abs(a + b * r["k"] - r["total"]) / r["total"]
                   for r in rows)
    calls_ok = all(r["fn_calls"] == 1 for r in rows)
    sweep = sweep_block_split(N.ModelConfig.tiny(), [(1, 3), (2, 2), (3, 1)],
                              k_max=4, size=16, cost="macs")
    slopes = [r["slope"] for r in sweep]
    sweep_ok = slopes[0] > slopes[1] > slopes[2]
    ok = residual < FIT_RESIDUAL and calls_ok and sweep_ok
    return CheckResult(5, "amortization", ok,
                       f"a+bK fit residual {residual:.4f} (<{FIT_RESIDUAL}),"
                       f" shared stage ran once per K: {calls_ok}, slope "
                       f"falls with bigger shared stage: {sweep_ok}")


# -- 6: overfit quality ------------------------------------------------------------------

def check_overfit(model, triplets):
    curve = time_varying_eval(model, triplets)
    vals = [row["psnr"] for row in curve]
    ok = min(vals) > OVERFIT_PSNR_DB
    pts = " ".join(f"{row['t']:.2f}:{row['psnr']:.2f}" for row in curve)
    return CheckResult(6, "overfit", ok,
                       f"train PSNR per t [{pts}] dB, min {min(vals):.2f} "
                       f"(need >{OVERFIT_PSNR_DB})")


def run_overfit(steps=2000, size=64, seed=0, batch_size=2,
                optim_cfg=None, log_path=None):
    """The criterion's training recipe; returns (model, triplets)."""
    triplets = default_overfit_data(size=size, seed=seed)
    model = N.BiT(N.ModelConfig.tiny(), seed=seed)
    cfg = optim_cfg or OptimConfig(lr_start=1e-3, lr_end=1e-5)
    fit(model, triplets, steps=steps, batch_size=batch_size, seed=seed,
        optim_cfg=cfg, log_path=log_path)
    return model, triplets


# -- 7: dual-end ablation direction ---------------------------------------------------------

def _end_psnr(model, triplets):
    curve = time_varying_eval(model, triplets)
    return 0.5 * (curve[0]["psnr"] + curve[-1]["psnr"])


def check_dts_direction(steps=2000, size=64, seeds=(0, 1, 2), batch_size=2):
    """Re-run the overfit recipe per seed with and without the dual-end
    head and compare exposure-end PSNR."""
    deltas = []
    worst = np.inf
    cfg = OptimConfig(lr_start=1e-3, lr_end=1e-5)
    for seed in seeds:
        triplets = default_overfit_data(size=size, seed=seed)
        scores = {}
        for lam in (0.5, 0.0):
            model = N.BiT(N.ModelConfig.tiny(), seed=seed)
            fit(model, triplets, steps=steps, batch_size=batch_size,
                seed=seed, optim_cfg=cfg,
                loss_cfg=LossConfig(dual_end_weight=lam))
            scores[lam] = _end_psnr(model, triplets)
        deltas.append(scores[0.5] - scores[0.0])
        worst = min(worst, deltas[-1])
    mean_delta = float(np.mean(deltas))
    ok = worst > -DTS_MARGIN_DB and mean_delta > 0
    txt = " ".join(f"{d:+.2f}" for d in deltas)
    return CheckResult(7, "dts-direction", ok,
                       f"end-PSNR deltas (on-off) per seed [{txt}] dB at "
                       f"{steps} steps, mean {mean_delta:+.2f}; need each > "
                       f"-{DTS_MARGIN_DB} and mean > 0")


# -- 8: ensembling branch swap -----------------------------------------------------------

def check_tse_swap(seed=0):
    model = N.BiT(N.ModelConfig.tiny(), seed=seed)
    rng = np.random.default_rng(seed)
    p, c, n = (T.Tensor(rng.uniform(0, 1, (1, 3, 32, 32))
                        .astype(np.float32)) for _ in range(3))
    with T.no_grad():
        a1, b1 = model.tse_branches(p, c, n, 0.25)
        a2, b2 = model.tse_branches(n, c, p, 0.75)
    swap_ok = (np.array_equal(a1.data, b2.data)
               and np.array_equal(b1.data, a2.data))
    chans = model.head_tse_w.shape[1]
    chan_ok = chans == 2 * model.config.channels
    return CheckResult(8, "tse-branch-swap",
                       swap_ok and chan_ok,
                       f"reversed-triplet branches bit-identical: {swap_ok};"
                       f" fusion head input channels {chans} == 2C: "
                       f"{chan_ok}")


# -- 9: loss identities --------------------------------------------------------------------

def check_loss_identities():
    gt = T.Tensor(np.zeros((1, 3, 4, 4)))
    pred = T.Tensor(np.full((1, 3, 4, 4), 0.1))
    total, _, _, _ = total_loss(pred, gt, pred, gt, pred, gt, 0.5)
    case_ok = abs(float(total.data) - 0.2) < 1e-7
    plain, lt, l0, l1_ = total_loss(pred, gt, None, None, None, None, 0.0)
    lam0_ok = (l0 is None and
               abs(float(plain.data) - float(lt.data)) == 0.0)
    ends_ok = (cosine_lr(0, 10, 1e-4, 1e-6) == 1e-4
               and abs(cosine_lr(10, 10, 1e-4, 1e-6) - 1e-6) < 1e-18)
    ok = case_ok and lam0_ok and ends_ok
    return CheckResult(9, "loss-identities", ok,
                       f"constant-error total {float(total.data):.6f} "
                       f"(want 0.200000); weight-0 degenerates to L1: "
                       f"{lam0_ok}; schedule endpoints exact: {ends_ok}")


# -- 10: similarity-map properties ------------------------------------------------------------

def check_cka_properties(model=None, seed=0):
    model = model or N.BiT(N.ModelConfig.tiny(), seed=seed)
    triplets = _toy_triplets(size=64, seed=7, n_blur=8)
    feats = collect_shared_features(model, triplets)
    base = cka_map(feats).matrix
    diag_ok = float(np.abs(np.diag(base) - 1.0).max()) < 1e-9
    sym_ok = float(np.abs(base - base.T).max()) < 1e-12
    mod = feats.copy()
    mod[:, 0] *= 7.0
    mod[:, 1] += 3.0
    inv = float(np.abs(cka_map(mod).matrix - base).max())
    ok = diag_ok and sym_ok and inv < 1e-6
    return CheckResult(10, "cka-properties", ok,
                       f"{feats.shape[0]} triplets: unit diagonal {diag_ok},"
                       f" symmetric {sym_ok}, scale/shift drift {inv:.1e} "
                       f"(<1e-6)")


# -- 11: blur-synthesis oracles ----------------------------------------------------------------

def check_blur_oracles():
    const = np.full((11, 3, 4, 4), 0.37, dtype=np.float64)
    const_ok = float(np.abs(synth_blur_discrete(const, 0, 11)
                            - 0.37).max()) < 1e-12
    ramp = np.stack([np.full((3, 4, 4), m / 10.0) for m in range(11)])
    ramp_ok = float(np.abs(synth_blur_discrete(ramp, 0, 11)
                           - 0.5).max()) < 1e-12

    scene = make_scene("blobs", 16, seed=2, speed=4.0)
    ref = synth_blur_continuous(scene, 0.0, 30.0, 512)
    errs = [float(np.abs(synth_blur_continuous(scene, 0.0, 30.0, k)
                         - ref).max()) for k in (8, 16, 32)]
    conv_ok = all(b < a / 2 + 1e-12 for a, b in zip(errs, errs[1:]))

    dt = 1000.0 / 240.0
    dot = make_scene("dot", 64, seed=5, speed=4.0 / dt)
    frames = np.stack([dot.render(i * dt) for i in range(11)])
    disc = synth_blur_discrete(frames, 0, 11)
    cont = synth_blur_continuous(dot, 0.0, 10 * dt, 256)
    row = int(round(dot.y0))

    def peaks(img):
        line = img[0, row, :].astype(np.float64)
        found, _ = find_peaks(line, prominence=0.05 * (line.max()
                                                       - line.min()))
        return len(found)

    comb, smooth = peaks(disc), peaks(cont)
    peak_ok = comb >= 11 and smooth <= 2
    ok = const_ok and ramp_ok and conv_ok and peak_ok
    return CheckResult(11, "blur-oracles", ok,
                       f"constant {const_ok}, ramp-to-0.5 {ramp_ok}, "
                       f"error halves as k doubles {conv_ok}, dot peaks "
                       f"discrete {comb} vs continuous {smooth}")


# -- 12: determinism ------------------------------------------------------------------------

def check_determinism(seed=0):
    triplets = _toy_triplets(size=16, seed=seed, n_blur=3)
    curves = []
    for _ in range(2):
        model = N.BiT(N.ModelConfig.tiny(), seed=seed)
        hist, _ = fit(model, triplets, steps=5, batch_size=2, seed=seed)
        curves.append([p["loss"] for p in hist])
    ok = curves[0] == curves[1]
    return CheckResult(12, "determinism", ok,
                       f"5-step retrain loss curves identical: {ok}; "
                       f"byte-level check = run the pipeline twice and "
                       f"compare outputs")


# -- report ----------------------------------------------------------------------------------

def run_all(base_model, triplets, dts_steps=2000, dts_seeds=(0, 1, 2),
            dts_size=64, seed=0):
    """Run the twelve checks against pipeline artifacts."""
    return [
        check_gradients(seed),
        check_attention_oracle(seed),
        check_roundtrips(seed),
        check_flop_ratio(seed),
        check_amortization(),
        check_overfit(base_model, triplets),
        check_dts_direction(steps=dts_steps, seeds=dts_seeds,
                            size=dts_size),
        check_tse_swap(seed),
        check_loss_identities(),
        check_cka_properties(base_model),
        check_blur_oracles(),
        check_determinism(seed),
    ]


def format_report(results, profile_name, seed):
    lines = [f"acceptance report  profile={profile_name}  seed={seed}", ""]
    for r in results:
        flag = "PASS" if r.ok else "FAIL"
        lines.append(f"{r.num:2d}. {r.name:<22} {flag}  {r.detail}")
    passed = sum(r.ok for r in results)
    lines.append("")
    lines.append(f"summary: {passed}/{len(results)} passed")
    return "\n".join(lines) + "\n"
