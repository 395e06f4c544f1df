"""Architecture-level tests: stage contracts, heads, reuse, counts."""

import numpy as np
import pytest

from blurinterp import attention as A
from blurinterp import network as N
from blurinterp import tensor as T
from blurinterp.errors import ConfigError, DomainError, ModeError, ShapeError


def tiny_model(seed=0, dtype=np.float32, **overrides):
    return N.BiT(N.ModelConfig.tiny(**overrides), seed=seed, dtype=dtype)


def frames(rng, b=1, h=16, w=16, dtype=np.float32):
    return [T.Tensor(rng.uniform(0, 1, (b, 3, h, w)).astype(dtype))
            for _ in range(3)]


class TestConfig:
    def test_defaults_match_full_size(self):
        cfg = N.ModelConfig()
        assert (cfg.channels, cfg.heads, cfg.window) == (174, 6, 8)
        assert (cfg.n_blocks, cfg.m_blocks, cfg.scales) == (3, 3, 3)

    def test_tiny_profile(self):
        cfg = N.ModelConfig.tiny()
        assert (cfg.channels, cfg.heads, cfg.window) == (24, 3, 4)
        assert cfg.n_blocks == cfg.m_blocks == 1

    def test_invalid_configs_rejected(self):
        with pytest.raises(ConfigError):
            N.ModelConfig(channels=100, heads=6)   # not divisible
        with pytest.raises(ConfigError):
            N.ModelConfig(channels=172)            # not divisible by 3
        with pytest.raises(ConfigError):
            N.ModelConfig(upscale=2)


class TestShallow:
    def test_downscale_64_to_16(self):
        model = tiny_model()
        x = T.Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32))
        assert model.shallow(x).shape == (1, 8, 16, 16)

    def test_weight_sharing_bit_identical(self):
        model = tiny_model()
        rng = np.random.default_rng(0)
        x = T.Tensor(rng.uniform(0, 1, (1, 3, 16, 16)).astype(np.float32))
        a = model.shallow(x).data
        b = model.shallow(x).data
        assert np.array_equal(a, b)

    def test_zero_input_zero_output(self):
        model = tiny_model()
        x = T.Tensor(np.zeros((1, 3, 16, 16), dtype=np.float32))
        assert np.all(model.shallow(x).data == 0.0)

    def test_indivisible_extent_raises(self):
        model = tiny_model()
        with pytest.raises(ShapeError):
            model.shallow(T.Tensor(np.zeros((1, 3, 18, 16), dtype=np.float32)))


class TestFuseFrames:
    def test_identical_features_repeat(self):
        model = tiny_model()
        f = T.Tensor(np.random.default_rng(1).standard_normal(
            (1, 8, 4, 4)).astype(np.float32))
        fused = model.fuse_frames(f, f, f)
        assert fused.shape == (1, 24, 4, 4)
        np.testing.assert_array_equal(fused.data[:, :8], fused.data[:, 8:16])
        np.testing.assert_array_equal(fused.data[:, :8], fused.data[:, 16:])

    def test_full_config_channel_split(self):
        cfg = N.ModelConfig()
        assert cfg.channels // 3 == 58 and 3 * 58 == 174

    def test_order_sensitivity(self):
        model = tiny_model()
        rng = np.random.default_rng(2)
        a, b, c = [T.Tensor(rng.standard_normal((1, 8, 4, 4)).astype(np.float32))
                   for _ in range(3)]
        fused1 = model.fuse_frames(a, b, c).data
        fused2 = model.fuse_frames(c, b, a).data
        assert not np.array_equal(fused1, fused2)


class TestMsRstb:
    def test_single_scale_is_plain_rstb_plus_fuse(self):
        rng = np.random.default_rng(3)
        p = N.MsRstbParams(6, 3, 2, 1, rng)
        x = T.Tensor(rng.standard_normal((1, 6, 4, 4)).astype(np.float32))
        out = N.ms_rstb_forward(x, p, scales=1, rescale=2)
        manual = x + T.conv2d(A.rstb_forward(x, p.rstb), p.fuse_w, p.fuse_b,
                              padding=1)
        np.testing.assert_allclose(out.data, manual.data, atol=1e-6)

    def test_shape_preserved_full_width(self):
        rng = np.random.default_rng(4)
        p = N.MsRstbParams(174, 6, 8, 3, rng)
        x = T.Tensor(rng.standard_normal((1, 174, 16, 16)).astype(np.float32))
        out = N.ms_rstb_forward(x, p, scales=3, rescale=2)
        assert out.shape == (1, 174, 16, 16)

    def test_zero_extent_scale_raises(self):
        rng = np.random.default_rng(5)
        p = N.MsRstbParams(6, 3, 2, 4, rng)
        x = T.Tensor(rng.standard_normal((1, 6, 4, 4)).astype(np.float32))
        with pytest.raises(ShapeError):
            N.ms_rstb_forward(x, p, scales=4, rescale=2)   # 4/8 -> 0

    def test_flop_ratio_attention_mlp(self):
        # Eq-4-style cost ratio: sum over scales of (1/r^2)^s, S=3, r=2
        rng = np.random.default_rng(6)
        p = N.MsRstbParams(24, 3, 4, 3, rng)
        x = T.Tensor(rng.standard_normal((1, 24, 32, 32)).astype(np.float32))
        with T.no_grad():
            with T.count_macs() as ms:
                N.ms_rstb_forward(x, p, scales=3, rescale=2)
            with T.count_macs() as plain:
                A.rstb_forward(x, p.rstb)
        ratio = ((ms["attention"] + ms["mlp"])
                 / (plain["attention"] + plain["mlp"]))
        assert ratio == pytest.approx(1.3125, rel=0.05)


class TestSharedFeatures:
    def test_extract_called_once_for_many_queries(self):
        model = tiny_model()
        prev, cur, nxt = frames(np.random.default_rng(7))
        with T.no_grad():
            feat = model.extract_shared(prev, cur, nxt)
            for i in range(16):
                model.render_motion(feat, i / 15.0)
        assert model.fn_calls == 1

    def test_output_shape(self):
        model = tiny_model()
        prev, cur, nxt = frames(np.random.default_rng(8), h=32, w=16)
        with T.no_grad():
            feat = model.extract_shared(prev, cur, nxt)
        assert feat.shape == (1, 24, 8, 4)

    def test_next_frame_flows(self):
        model = tiny_model()
        rng = np.random.default_rng(9)
        prev, cur, nxt = frames(rng)
        with T.no_grad():
            f1 = model.extract_shared(prev, cur, nxt).data
            nxt2 = T.Tensor(rng.uniform(0, 1, nxt.shape).astype(np.float32))
            f2 = model.extract_shared(prev, cur, nxt2).data
        assert not np.array_equal(f1, f2)

    def test_reuse_junction_gradients_sum(self):
        # one shared-feature tensor feeding two losses must produce the same
        # trunk gradients as recomputing each loss separately
        model = tiny_model(seed=1)
        prev, cur, nxt = frames(np.random.default_rng(10), h=16, w=16)

        feat = model.extract_shared(prev, cur, nxt)
        loss = T.tsum(model.render_motion(feat, 0.25)) + \
            T.tsum(model.render_motion(feat, 0.75))
        loss.backward()
        joint = model.shallow_w0.grad.copy()

        model.shallow_w0.zero_grad()
        feat = model.extract_shared(prev, cur, nxt)
        T.tsum(model.render_motion(feat, 0.25)).backward()
        feat = model.extract_shared(prev, cur, nxt)
        T.tsum(model.render_motion(feat, 0.75)).backward()
        separate = model.shallow_w0.grad.copy()

        np.testing.assert_allclose(joint, separate, rtol=1e-4, atol=1e-6)


class TestEncodeTime:
    def test_distinct_times_distinct_outputs(self):
        model = tiny_model()
        feat = T.Tensor(np.random.default_rng(11).standard_normal(
            (1, 24, 4, 4)).astype(np.float32))
        with T.no_grad():
            a = model.encode_time(feat, 0.2).data
            b = model.encode_time(feat, 0.8).data
        assert not np.array_equal(a, b)

    def test_shape_preserved(self):
        model = tiny_model()
        feat = T.Tensor(np.zeros((2, 24, 4, 6), dtype=np.float32))
        assert model.encode_time(feat, 0.5).shape == (2, 24, 4, 6)

    def test_affine_in_t(self):
        model = tiny_model(dtype=np.float64)
        feat = T.Tensor(np.random.default_rng(12).standard_normal(
            (1, 24, 4, 4)))
        with T.no_grad():
            mid = model.encode_time(feat, 0.5).data
            ends = 0.5 * (model.encode_time(feat, 0.0).data
                          + model.encode_time(feat, 1.0).data)
        np.testing.assert_allclose(mid, ends, atol=1e-12)

    @pytest.mark.parametrize("t", [-0.1, 1.1, float("nan")])
    def test_out_of_domain_rejected(self, t):
        model = tiny_model()
        feat = T.Tensor(np.zeros((1, 24, 4, 4), dtype=np.float32))
        with pytest.raises(DomainError):
            model.encode_time(feat, t)


class TestRenderMotion:
    def test_full_resolution_output(self):
        model = tiny_model()
        prev, cur, nxt = frames(np.random.default_rng(13), h=32, w=16)
        with T.no_grad():
            out = model.forward(prev, cur, nxt, 0.5)
        assert out.shape == (1, 3, 32, 16)

    def test_deterministic(self):
        model = tiny_model()
        feat = T.Tensor(np.random.default_rng(14).standard_normal(
            (1, 24, 4, 4)).astype(np.float32))
        with T.no_grad():
            a = model.render_motion(feat, 0.3).data
            b = model.render_motion(feat, 0.3).data
        assert np.array_equal(a, b)

    def test_inference_clamps(self):
        model = tiny_model().train_mode(False)
        feat = T.Tensor(100.0 * np.random.default_rng(15).standard_normal(
            (1, 24, 4, 4)).astype(np.float32))
        with T.no_grad():
            out = model.render_motion(feat, 0.5).data
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestDualEnd:
    def test_pair_shapes(self):
        model = tiny_model()
        prev, cur, nxt = frames(np.random.default_rng(16))
        with T.no_grad():
            feat = model.extract_shared(prev, cur, nxt)
            s, e = model.dual_end(feat)
        assert s.shape == (1, 3, 16, 16) and e.shape == (1, 3, 16, 16)

    def test_inference_mode_error(self):
        model = tiny_model().train_mode(False)
        feat = T.Tensor(np.zeros((1, 24, 4, 4), dtype=np.float32))
        with pytest.raises(ModeError):
            model.dual_end(feat)

    def test_excluded_from_inference_export(self):
        model = tiny_model()
        exported = model.export_inference_state()
        assert not any(k.startswith("head.dts.") for k in exported)
        assert "head.main.w" in exported and "fn.shallow.conv0.w" in exported

    def test_gradients_reach_trunk(self):
        model = tiny_model()
        prev, cur, nxt = frames(np.random.default_rng(17), h=16, w=16)
        feat = model.extract_shared(prev, cur, nxt)
        s, e = model.dual_end(feat)
        (T.tsum(T.tabs(s)) + T.tsum(T.tabs(e))).backward()
        assert model.shallow_w0.grad is not None
        assert np.abs(model.shallow_w0.grad).max() > 0


class TestTse:
    def test_branch_swap_bit_identical(self):
        model = tiny_model()
        prev, cur, nxt = frames(np.random.default_rng(18), h=16, w=16)
        t = 0.25   # dyadic so 1-(1-t) reproduces t exactly in floats
        with T.no_grad():
            a1, b1 = model.tse_branches(prev, cur, nxt, t)
            a2, b2 = model.tse_branches(nxt, cur, prev, 1.0 - t)
        assert np.array_equal(a1.data, b2.data)
        assert np.array_equal(b1.data, a2.data)

    def test_palindromic_triplet_symmetric_at_half(self):
        model = tiny_model()
        rng = np.random.default_rng(19)
        prev = T.Tensor(rng.uniform(0, 1, (1, 3, 16, 16)).astype(np.float32))
        cur = T.Tensor(rng.uniform(0, 1, (1, 3, 16, 16)).astype(np.float32))
        with T.no_grad():
            a, b = model.tse_branches(prev, cur, prev, 0.5)
        assert np.array_equal(a.data, b.data)

    def test_fusion_head_input_channels(self):
        model = tiny_model()
        assert model.head_tse_w.shape[1] == 2 * model.config.channels

    def test_tse_forward_shape(self):
        model = tiny_model()
        prev, cur, nxt = frames(np.random.default_rng(20), h=16, w=16)
        with T.no_grad():
            out = model.tse_forward(prev, cur, nxt, 0.5)
        assert out.shape == (1, 3, 16, 16)


def closed_form_param_count(cfg):
    """Symbolic parameter count, derived independently of the model code."""
    c, h, m, rho, s = (cfg.channels, cfg.heads, cfg.window, cfg.mlp_ratio,
                       cfg.scales)
    cf = c // 3
    shallow = cf * 3 * 9 + cf + cf * cf * 9 + cf
    per_stb = (4 * c * c + (2 * m - 1) ** 2 * h + 4 * c
               + 2 * int(rho * c) * c + int(rho * c) + c)
    rstb = 6 * per_stb + 9 * c * c + c
    ms_rstb = rstb + 9 * s * c * c + c
    tenc = c * (c + 1) + c
    up2 = cfg.upscale ** 2
    heads_count = (3 * up2 * c * 9 + 3 * up2          # main
                   + 6 * up2 * c * 9 + 6 * up2        # dual-end
                   + 3 * up2 * 2 * c * 9 + 3 * up2)   # ensemble fusion
    return (shallow + (cfg.n_blocks + cfg.m_blocks) * ms_rstb
            + tenc + heads_count)


class TestParamCount:
    def test_tiny_matches_closed_form(self):
        cfg = N.ModelConfig.tiny()
        assert tiny_model().param_count() == closed_form_param_count(cfg)

    def test_invariant_to_input_size(self):
        model = tiny_model()
        before = model.param_count()
        with T.no_grad():
            model.forward(*frames(np.random.default_rng(21), h=16, w=16), 0.5)
            model.forward(*frames(np.random.default_rng(22), h=32, w=32), 0.5)
        assert model.param_count() == before

    def test_full_config_param_count(self):
        # full config should land in the ~1e7 band
        count = closed_form_param_count(N.ModelConfig())
        assert 5e6 < count < 5e7


class TestStateRoundtrip:
    def test_save_load_bit_exact(self):
        m1 = tiny_model(seed=3)
        m2 = tiny_model(seed=4)
        m2.load_state(m1.state_dict())
        for name, t in m1.named_params().items():
            assert np.array_equal(t.data, m2.named_params()[name].data), name

    def test_strict_mismatch_raises(self):
        m1 = tiny_model()
        state = m1.state_dict()
        state.pop("head.main.w")
        with pytest.raises(ShapeError):
            m1.load_state(state)

    def test_wrong_shape_raises(self):
        m1 = tiny_model()
        state = m1.state_dict()
        state["head.main.w"] = state["head.main.w"][:, :1]
        with pytest.raises(ShapeError):
            m1.load_state(state)


class TestFullModelGradients:
    def test_spot_gradcheck_five_params(self):
        """Perturb five scalars across the network and compare the analytic
        gradient of a scalar loss against central finite differences."""
        model = tiny_model(seed=5, dtype=np.float64)
        rng = np.random.default_rng(23)
        prev, cur, nxt = frames(rng, h=16, w=16, dtype=np.float64)
        target = np.random.default_rng(24).uniform(0, 1, (1, 3, 16, 16))

        def loss_value():
            out = model.forward(prev, cur, nxt, 0.5)
            return T.tmean((out - T.Tensor(target)) ** 2.0)

        loss = loss_value()
        loss.backward()

        picks = [
            "fn.shallow.conv0.w",
            "fn.rstb0.stb0.attn.p_q",
            "fm.tenc.w",
            "fm.rstb0.stb1.mlp.w1",
            "head.main.w",
        ]
        params = model.named_params()
        eps = 1e-5
        for name in picks:
            tensor = params[name]
            # perturb the best-conditioned element: the largest gradient
            idx = np.unravel_index(int(np.abs(tensor.grad).argmax()),
                                   tensor.shape)
            analytic = tensor.grad[idx]
            orig = tensor.data[idx]
            with T.no_grad():
                tensor.data[idx] = orig + eps
                plus = loss_value().item()
                tensor.data[idx] = orig - eps
                minus = loss_value().item()
                tensor.data[idx] = orig
            numeric = (plus - minus) / (2 * eps)
            denom = max(abs(analytic), abs(numeric), 1e-8)
            assert abs(analytic - numeric) / denom < 1e-4, \
                f"{name}{idx}: analytic {analytic} vs numeric {numeric}"
