"""Loss, schedule, sampler, AdamW, and the two-phase training loop."""

import math

import numpy as np
import pytest

from blurinterp import tensor as T
from blurinterp.data import build_triplets, frames_needed, make_scene, \
    profile, sequence_from_scene
from blurinterp.errors import ConfigError, DivergenceError, DomainError, \
    ShapeError
from blurinterp.network import BiT, ModelConfig
from blurinterp.training import (
    AdamW, LossConfig, OptimConfig, compute_batch_loss, cosine_lr, fit, l1,
    load_train_state, sample_t, save_train_state, total_loss, train_step,
    tse_finetune, DEFAULT_BASE_EPOCHS, DEFAULT_TSE_EPOCHS,
)


def _tiny_model(seed=0, dtype=np.float32):
    return BiT(ModelConfig.tiny(), seed=seed, dtype=dtype)


def _toy_triplets(n=3, size=16, seed=0, speed=1.0):
    cfg = profile("tiny")
    scene = make_scene("blobs", size, seed=seed, speed=speed)
    seq = sequence_from_scene(scene, cfg, frames_needed(cfg, max(n, 3)))
    return build_triplets(seq, cfg)[:n] if n >= 3 else \
        build_triplets(seq, cfg)[:3]


# -- loss ----------------------------------------------------------------------

def test_total_loss_zero_when_equal():
    x = T.Tensor(np.random.default_rng(0).uniform(0, 1, (2, 3, 4, 4)))
    total, lt, l0, l1_ = total_loss(x, x, x, x, x, x, 0.5)
    assert float(total.data) == 0.0


def test_total_loss_lambda_zero_is_pure_l1():
    rng = np.random.default_rng(1)
    a = T.Tensor(rng.uniform(0, 1, (1, 3, 4, 4)))
    b = T.Tensor(rng.uniform(0, 1, (1, 3, 4, 4)))
    total, lt, l0, l1_ = total_loss(a, b, None, None, None, None, 0.0)
    assert l0 is None and l1_ is None
    np.testing.assert_allclose(float(total.data),
                               np.abs(a.data - b.data).mean(), rtol=1e-6)


def test_total_loss_constant_offset_closed_form():
    # |pred - gt| = 0.1 on all three pairs, weight 0.5 -> 0.1 + 0.5*0.2 = 0.2
    gt = T.Tensor(np.zeros((1, 3, 4, 4)))
    pred = T.Tensor(np.full((1, 3, 4, 4), 0.1))
    total, _, _, _ = total_loss(pred, gt, pred, gt, pred, gt, 0.5)
    np.testing.assert_allclose(float(total.data), 0.2, rtol=1e-6)


def test_total_loss_nonnegative_random():
    rng = np.random.default_rng(2)
    for _ in range(5):
        a = T.Tensor(rng.normal(size=(1, 3, 4, 4)))
        b = T.Tensor(rng.normal(size=(1, 3, 4, 4)))
        total, _, _, _ = total_loss(a, b, a, b, a, b, 0.5)
        assert float(total.data) >= 0.0


def test_l1_shape_mismatch():
    with pytest.raises(ShapeError):
        l1(T.Tensor(np.zeros((1, 3, 4, 4))), T.Tensor(np.zeros((1, 3, 4, 5))))


# -- time sampler ----------------------------------------------------------------

def test_sample_t_singleton():
    rng = np.random.default_rng(0)
    for _ in range(10):
        assert sample_t([0.5], rng) == 0.5


def test_sample_t_uniform_chi_square():
    # frequencies over 10^4 draws from an 11-point grid stay within 4 sigma
    grid = np.arange(11) / 10.0
    rng = np.random.default_rng(3)
    draws = [sample_t(grid, rng) for _ in range(10_000)]
    counts = np.array([draws.count(g) for g in grid])
    expect = 10_000 / 11
    sigma = math.sqrt(10_000 * (1 / 11) * (10 / 11))
    assert np.all(np.abs(counts - expect) < 4 * sigma)


def test_sample_t_seeded_sequence():
    grid = np.arange(11) / 10.0
    r1, r2 = np.random.default_rng(7), np.random.default_rng(7)
    s1 = [sample_t(grid, r1) for _ in range(20)]
    s2 = [sample_t(grid, r2) for _ in range(20)]
    assert s1 == s2


def test_sample_t_empty_grid():
    with pytest.raises(DomainError):
        sample_t([], np.random.default_rng(0))


# -- learning-rate schedule -------------------------------------------------------

def test_cosine_lr_endpoints():
    assert cosine_lr(0, 100, 1e-4, 1e-6) == pytest.approx(1e-4, rel=1e-12)
    assert cosine_lr(100, 100, 1e-4, 1e-6) == pytest.approx(1e-6, rel=1e-9)


def test_cosine_lr_midpoint():
    assert cosine_lr(50, 100, 1e-4, 1e-6) == pytest.approx(5.05e-5, rel=1e-9)


def test_cosine_lr_monotone_nonincreasing():
    lrs = [cosine_lr(s, 200, 1e-4, 1e-6) for s in range(201)]
    assert all(b <= a + 1e-18 for a, b in zip(lrs, lrs[1:]))


def test_cosine_lr_out_of_range():
    with pytest.raises(DomainError):
        cosine_lr(-1, 100, 1e-4, 1e-6)
    with pytest.raises(DomainError):
        cosine_lr(101, 100, 1e-4, 1e-6)


def test_optim_config_validation():
    with pytest.raises(ConfigError):
        OptimConfig(lr_start=1e-6, lr_end=1e-4)
    with pytest.raises(ConfigError):
        LossConfig(dual_end_weight=-0.1)


def test_epoch_budget_ratio():
    assert DEFAULT_BASE_EPOCHS / DEFAULT_TSE_EPOCHS == 2.0


# -- AdamW -----------------------------------------------------------------------

def test_adamw_first_step_closed_form():
    # with p0 = 0: bias-corrected mhat/vhat are g/|g|, so p1 = -lr/(1+eps)
    p = T.Tensor(np.zeros((2, 2)), requires_grad=True)
    p.grad = np.ones((2, 2), dtype=np.float32)
    opt = AdamW({"p": p}, OptimConfig())
    opt.step(1e-3)
    np.testing.assert_allclose(p.data, -1e-3 / (1 + 1e-8), rtol=1e-6)


def test_adamw_decoupled_weight_decay():
    # zero gradient: the only update is the decoupled decay p *= (1 - lr*wd)
    p = T.Tensor(np.full((3,), 2.0), requires_grad=True)
    p.grad = np.zeros(3, dtype=np.float32)
    cfg = OptimConfig(weight_decay=0.1)
    opt = AdamW({"p": p}, cfg)
    opt.step(1e-2)
    np.testing.assert_allclose(p.data, 2.0 * (1 - 1e-2 * 0.1), rtol=1e-6)


def test_adamw_grad_clip_scales_update():
    mk = lambda: T.Tensor(np.zeros((4,)), requires_grad=True)
    a, b = mk(), mk()
    a.grad = np.full(4, 10.0, dtype=np.float32)       # norm 20
    b.grad = np.full(4, 0.5, dtype=np.float32)        # clipped grad of a
    oa = AdamW({"p": a}, OptimConfig(grad_clip=1.0))
    ob = AdamW({"p": b}, OptimConfig())
    oa.step(1e-3)
    ob.step(1e-3)
    np.testing.assert_allclose(a.data, b.data, rtol=1e-5)


def test_adamw_skips_gradless_params():
    p = T.Tensor(np.ones((2,)), requires_grad=True)
    opt = AdamW({"p": p}, OptimConfig())
    opt.step(1e-3)
    np.testing.assert_array_equal(p.data, np.ones(2, dtype=np.float32))


# -- training steps ----------------------------------------------------------------

def test_train_step_reduces_loss_overfit():
    model = _tiny_model(seed=0)
    tris = _toy_triplets(n=3, size=16)
    opt = AdamW(model.named_params(), OptimConfig())
    lcfg = LossConfig()
    losses = []
    for step in range(200):
        parts = train_step(model, [tris[1]], [2], opt, 1e-3, lcfg, step=step)
        losses.append(parts["loss"])
    assert np.mean(losses[-10:]) < np.mean(losses[:10]) * 0.5
    assert losses[199] < losses[9]


def test_gradient_accumulation_equivalence():
    # two half-batches, each backward scaled by 1/2, accumulate to the
    # full-batch gradient (the loss is a mean over batch elements)
    model = _tiny_model(seed=1, dtype=np.float64)
    tris = _toy_triplets(n=4, size=16)
    tj = [0, 1, 2, 3]
    lcfg = LossConfig()

    total, _ = compute_batch_loss(model, tris[:4], tj, lcfg)
    total.backward()
    full = {k: p.grad.copy() for k, p in model.named_params().items()
            if p.grad is not None}
    assert full    # the fusion head is idle in base mode; everything else live

    for p in model.named_params().values():
        p.grad = None
    ha, _ = compute_batch_loss(model, tris[:2], tj[:2], lcfg)
    (T.Tensor(0.5) * ha).backward()
    hb, _ = compute_batch_loss(model, tris[2:4], tj[2:], lcfg)
    (T.Tensor(0.5) * hb).backward()
    accum = {k: p.grad for k, p in model.named_params().items()
             if p.grad is not None}
    assert set(accum) == set(full)
    for k in full:
        np.testing.assert_allclose(accum[k], full[k], rtol=1e-6, atol=1e-12)


def test_dts_ablation_detaches_head():
    model = _tiny_model(seed=2)
    tris = _toy_triplets(n=3, size=16)
    opt = AdamW(model.named_params(), OptimConfig())
    before = model.head_dts_w.data.copy()
    main_before = model.head_main_w.data.copy()
    parts = train_step(model, [tris[0]], [1], opt, 1e-3,
                       LossConfig(dual_end_weight=0.0))
    assert parts["loss_0"] == 0.0 and parts["loss_1"] == 0.0
    assert model.head_dts_w.grad is None
    np.testing.assert_array_equal(model.head_dts_w.data, before)
    assert np.abs(model.head_main_w.data - main_before).max() > 0


def test_dts_active_by_default():
    model = _tiny_model(seed=2)
    tris = _toy_triplets(n=3, size=16)
    opt = AdamW(model.named_params(), OptimConfig())
    before = model.head_dts_w.data.copy()
    parts = train_step(model, [tris[0]], [1], opt, 1e-3, LossConfig())
    assert parts["loss_0"] > 0 and parts["loss_1"] > 0
    assert np.abs(model.head_dts_w.data - before).max() > 0


def test_dts_predictions_skip_time_encoding():
    # the end terms read shared features, so they cannot depend on t
    model = _tiny_model(seed=4)
    tris = _toy_triplets(n=3, size=16)
    _, at_t0 = compute_batch_loss(model, [tris[0]], [0], LossConfig())
    _, at_t2 = compute_batch_loss(model, [tris[0]], [2], LossConfig())
    assert at_t0["loss_0"] == at_t2["loss_0"]
    assert at_t0["loss_1"] == at_t2["loss_1"]
    assert at_t0["loss_t"] != at_t2["loss_t"]


def test_dts_gradient_avoids_renderer():
    # only the queried-time term trains the renderer stage; the end terms
    # stop at the shared trunk
    model = _tiny_model(seed=4, dtype=np.float64)
    tris = _toy_triplets(n=3, size=16)

    def grads(lam):
        for p in model.named_params().values():
            p.grad = None
        total, _ = compute_batch_loss(model, [tris[0]], [1],
                                      LossConfig(dual_end_weight=lam))
        total.backward()
        return {k: p.grad.copy() for k, p in model.named_params().items()
                if p.grad is not None}

    g_plain, g_dts = grads(0.0), grads(0.5)
    renderer = [k for k in g_plain
                if k.startswith(("fm.", "head.main."))]
    assert renderer
    for k in renderer:
        np.testing.assert_array_equal(g_dts[k], g_plain[k])
    trunk = [k for k in g_plain if k.startswith("fn.")]
    assert any(np.abs(g_dts[k] - g_plain[k]).max() > 0 for k in trunk)


def test_dts_terms_match_across_modes():
    # base and ensembling modes share the forward-order shared features,
    # so the end diagnostics agree exactly
    model = _tiny_model(seed=5)
    tris = _toy_triplets(n=3, size=16)
    _, base = compute_batch_loss(model, [tris[1]], [1], LossConfig())
    _, tse = compute_batch_loss(model, [tris[1]], [1], LossConfig(),
                                tse=True)
    assert base["loss_0"] == tse["loss_0"]
    assert base["loss_1"] == tse["loss_1"]


def test_train_step_nan_diagnostic():
    model = _tiny_model(seed=3)
    model.head_main_w.data[0, 0, 0, 0] = np.nan
    tris = _toy_triplets(n=3, size=16)
    opt = AdamW(model.named_params(), OptimConfig())
    with pytest.raises(DivergenceError) as exc:
        train_step(model, [tris[0]], [0], opt, 1e-3, LossConfig(), step=17)
    assert "17" in str(exc.value)


# -- fit loop ---------------------------------------------------------------------

def test_fit_seed_reproducibility():
    tris = _toy_triplets(n=3, size=16)
    h1, _ = fit(_tiny_model(seed=4), tris, steps=4, batch_size=2, seed=11)
    h2, _ = fit(_tiny_model(seed=4), tris, steps=4, batch_size=2, seed=11)
    np.testing.assert_array_equal([p["loss"] for p in h1],
                                  [p["loss"] for p in h2])


def test_fit_writes_csv_log(tmp_path):
    tris = _toy_triplets(n=3, size=16)
    log = tmp_path / "train.csv"
    fit(_tiny_model(seed=5), tris, steps=3, batch_size=1, seed=0,
        log_path=str(log))
    lines = log.read_text().strip().splitlines()
    assert lines[0] == "step,lr,loss,loss_t,loss_0,loss_1,psnr_train"
    assert len(lines) == 4


def test_fit_resume_matches_uninterrupted(tmp_path):
    tris = _toy_triplets(n=3, size=16)
    ref_model = _tiny_model(seed=6)
    ref_hist, _ = fit(ref_model, tris, steps=6, batch_size=2, seed=9)

    model = _tiny_model(seed=6)
    hist_a, opt = fit(model, tris, steps=6, batch_size=2, seed=9,
                      stop_step=3)
    path = str(tmp_path / "state.bitk")
    save_train_state(path, model, opt, step=3)

    model2 = _tiny_model(seed=123)      # different init, fully overwritten
    opt2 = AdamW(model2.named_params(), OptimConfig())
    step = load_train_state(path, model2, opt2)
    assert step == 3
    hist_b, _ = fit(model2, tris, steps=6, batch_size=2, seed=9, optim=opt2,
                    start_step=step)
    got = [p["loss"] for p in hist_a + hist_b]
    ref = [p["loss"] for p in ref_hist]
    np.testing.assert_array_equal(got, ref)


def test_checkpoint_roundtrip_same_loss(tmp_path):
    tris = _toy_triplets(n=3, size=16)
    model = _tiny_model(seed=7)
    fit(model, tris, steps=2, batch_size=1, seed=1)
    path = str(tmp_path / "m.bitk")
    save_train_state(path, model)
    clone = _tiny_model(seed=99)
    load_train_state(path, clone)
    la, _ = compute_batch_loss(model, [tris[0]], [2], LossConfig())
    lb, _ = compute_batch_loss(clone, [tris[0]], [2], LossConfig())
    assert float(la.data) == float(lb.data)


# -- TSE fine-tuning ----------------------------------------------------------------

def test_tse_finetune_starts_from_checkpoint():
    tris = _toy_triplets(n=3, size=16)
    base = _tiny_model(seed=8)
    fit(base, tris, steps=2, batch_size=1, seed=2)
    state = base.state_dict()

    ft = _tiny_model(seed=555)
    tse_finetune(ft, state, tris, steps=0)
    for name, arr in ft.state_dict().items():
        np.testing.assert_array_equal(arr, state[name], err_msg=name)


def test_tse_finetune_trains_fusion_head():
    tris = _toy_triplets(n=3, size=16)
    base = _tiny_model(seed=10)
    fit(base, tris, steps=2, batch_size=1, seed=2)
    state = base.state_dict()

    ft = _tiny_model(seed=10)
    hist, _ = tse_finetune(ft, state, tris, steps=40, batch_size=1, seed=3,
                           optim_cfg=OptimConfig(lr_start=1e-3, lr_end=1e-5))
    assert np.mean([p["loss"] for p in hist[-5:]]) < \
        np.mean([p["loss"] for p in hist[:5]])
    assert np.abs(ft.head_tse_w.data - base.head_tse_w.data).max() > 0


def test_tse_finetune_head_shape_guard():
    tris = _toy_triplets(n=3, size=16)
    base = _tiny_model(seed=11)
    state = base.state_dict()
    state["head.tse.w"] = np.zeros((48, 7, 3, 3), dtype=np.float32)
    with pytest.raises(ConfigError):
        tse_finetune(_tiny_model(seed=11), state, tris, steps=0)


def test_tse_output_differs_from_base_at_init():
    tris = _toy_triplets(n=3, size=16)
    model = _tiny_model(seed=12)
    model.train_mode(False)
    tri = tris[0]
    p, c, n = (T.Tensor(x[None]) for x in (tri.prev, tri.cur, tri.nxt))
    with T.no_grad():
        base_out = model.forward(p, c, n, 0.5)
        tse_out = model.tse_forward(p, c, n, 0.5)
    assert np.abs(base_out.data - tse_out.data).max() > 1e-4
