import logging
import math

import numpy as np
import pytest

import oracles
from convnilm import autodiff as ad
from convnilm.autodiff import Tensor
from convnilm.model import (REFERENCE_PARAM_COUNT, CheckpointError, ModelConfig, _specs, apply_masks,
                            decode, encode, forward, init_params, load_checkpoint, param_count,
                            predict, receptive_field, save_checkpoint, separate)
from convnilm.training import wmse

TOY = dict(n_filters=4, filter_len=8, stride=4, bottleneck=2, hidden=3, kernel=3, blocks=2, repeats=1,
           n_sources=2)


def toy(variant="causal", **kw):
    return ModelConfig.for_variant(variant, **{**TOY, **kw})


class TestFraming:
    def test_frames(self, frozen):
        cfg = ModelConfig()
        assert cfg.n_frames(96) == frozen["frames_t96"] == 3
        assert cfg.n_frames(48) == 1
        with pytest.raises(ValueError):
            cfg.n_frames(47)

    def test_zero_mixture_zero_latent(self):
        cfg = ModelConfig()
        params = init_params(cfg, 0)
        params["encoder.bias"] = Tensor(np.zeros_like(params["encoder.bias"].data))
        z = encode(Tensor(np.zeros((1, 480))), params, cfg)
        assert z.shape == (32, 19)
        assert not z.data.any()

    def test_round_trip_length(self, rng):
        cfg = toy()
        for t in (8, 12, 64, 100):
            out = predict(init_params(cfg, 1), cfg, rng.random(t))
            assert out.shape == (2, t)

    def test_reference_config_shape(self, rng):
        cfg = ModelConfig()
        assert predict(init_params(cfg, 0), cfg, rng.random(4800)).shape == (5, 4800)

    def test_variants(self):
        base, causal, gated = (ModelConfig.for_variant(v) for v in ("base", "causal", "causal-glu"))
        assert _specs(base)["separator.block0.dconv"].padding == "same"
        assert _specs(causal)["separator.block0.dconv"].padding == "causal"
        assert base.norm_mode == "global" and causal.norm_mode == "channel"
        assert ModelConfig.for_variant("causal", causal_norm="cumulative").norm_mode == "cumulative"
        assert gated.glu and "separator.block0.dconv_gate.weight" in init_params(gated)
        assert "separator.block0.dconv_gate.weight" not in init_params(causal)
        assert [c.variant for c in (base, causal, gated)] == ["base", "causal", "causal-glu"]
        with pytest.raises(ValueError):
            ModelConfig.for_variant("noncausal-glu")


class TestMasks:
    def test_non_negative(self):
        rng = np.random.default_rng(5)
        for variant in ("base", "causal", "causal-glu"):
            cfg = toy(variant)
            params = init_params(cfg, 3)
            z = encode(Tensor(rng.normal(size=(1000, 1, 32))), params, cfg)
            assert (separate(z, params, cfg).data >= 0).all()

    def test_sum_is_unconstrained(self, rng):
        cfg = toy("base")
        params = init_params(cfg, 2)
        z = encode(Tensor(rng.normal(size=(20, 1, 32))), params, cfg)
        total = separate(z, params, cfg).data.sum(axis=-3)
        assert np.abs(total - 1.0).max() > 0.1

    def test_causal_masks_ignore_future_frames(self, rng):
        cfg = toy("causal")
        params = init_params(cfg, 4)
        z = rng.normal(size=(1, 4, 20))
        base = separate(Tensor(z), params, cfg).data
        for k in (0, 5, 19):
            z2 = z.copy()
            z2[..., k] += rng.normal(size=4)
            moved = separate(Tensor(z2), params, cfg).data
            np.testing.assert_array_equal(base[..., :k], moved[..., :k])

    def test_apply_identity_zero_indicator(self, rng):
        z = rng.normal(size=(4, 6))
        ones = apply_masks(Tensor(z), Tensor(np.ones((3, 4, 6)))).data
        assert all(np.array_equal(ones[i], z) for i in range(3))
        assert not apply_masks(Tensor(z), Tensor(np.zeros((3, 4, 6)))).data.any()
        m = np.zeros((3, 4, 6))
        m[1, 2, 5] = 1.0
        s = apply_masks(Tensor(z), Tensor(m)).data
        assert np.count_nonzero(s) == 1 and s[1, 2, 5] == z[2, 5]

    def test_apply_shape_mismatch(self):
        with pytest.raises(ValueError):
            apply_masks(Tensor(np.ones((4, 6))), Tensor(np.ones((3, 4, 5))))


class TestDecoder:
    def test_zero_sources(self):
        cfg = toy()
        out = decode(Tensor(np.zeros((2, 4, 5))), init_params(cfg), cfg).data
        assert out.shape == (2, 4 * 4 + 8) and not out.any()

    def test_single_frame(self, rng):
        cfg = toy()
        params = init_params(cfg)
        s = rng.normal(size=(2, 4, 1))
        out = decode(Tensor(s), params, cfg).data
        np.testing.assert_allclose(out, s[..., 0] @ params["decoder.weight"].data, atol=1e-14)

    def test_negative_outputs_not_clamped(self, rng):
        cfg = toy()
        params = init_params(cfg)
        params["decoder.weight"] = Tensor(-np.abs(params["decoder.weight"].data))
        out = decode(Tensor(np.abs(rng.normal(size=(2, 4, 5)))), params, cfg).data
        assert (out < 0).any()


class TestCausality:
    def test_end_to_end_frame_bound(self):
        rng = np.random.default_rng(11)
        for variant in ("causal", "causal-glu"):
            cfg = toy(variant)
            params = init_params(cfg, 8)
            x = rng.random(120)
            base = predict(params, cfg, x)
            for t in rng.integers(0, 120, 10):
                x2 = x.copy()
                x2[t] += 1.0
                moved = predict(params, cfg, x2)
                first = max(0, math.ceil((t - cfg.filter_len + 1) / cfg.stride)) * cfg.stride
                np.testing.assert_array_equal(base[:, :first], moved[:, :first])
                assert not np.array_equal(base, moved)

    def test_naive_slack_is_not_a_bound(self):
        # sample t = L + 1 lies in frame 1, which starts at S < t - (L - S)
        cfg = toy()
        params = init_params(cfg, 8)
        x = np.random.default_rng(0).random(64)
        t = cfg.filter_len + 1
        x2 = x.copy()
        x2[t] += 1.0
        diff = predict(params, cfg, x2) != predict(params, cfg, x)
        assert diff[:, cfg.stride].any()
        assert cfg.stride < t - (cfg.filter_len - cfg.stride)


class TestReceptiveField:
    def test_reference_config(self, frozen):
        rf = receptive_field(ModelConfig())
        assert rf.frames == frozen["rf_frames_reference"] == 29
        assert rf.samples == 28 * 24 + 48
        assert rf.formula_frames_kernel == 128
        assert rf.formula_frames_filter == 64 * 47

    def test_single_layer(self):
        rf = receptive_field(ModelConfig(kernel=2, blocks=1, repeats=1))
        assert rf.formula_frames_kernel == 2
        assert rf.frames == 2

    def test_exact_matches_dependency_walk(self):
        for p, x, r in [(2, 1, 1), (3, 2, 1), (3, 3, 2), (5, 4, 3), (2, 5, 2)]:
            assert receptive_field(ModelConfig(kernel=p, blocks=x, repeats=r)).frames == \
                oracles.dilated_stack_reach(p, x, r)

    def test_measured_reach(self):
        rng = np.random.default_rng(3)
        for _ in range(6):
            cfg = toy("causal", kernel=int(rng.integers(2, 4)), blocks=int(rng.integers(1, 4)),
                      repeats=int(rng.integers(1, 3)))
            params = init_params(cfg, int(rng.integers(100)))
            # keep the mask ReLU active so every dependency is visible
            params["separator.mask.bias"] = Tensor(params["separator.mask.bias"].data + 5.0)
            rf = receptive_field(cfg).frames
            z = rng.normal(size=(1, 4, rf + 20))
            k = 5
            z2 = z.copy()
            z2[..., k] += rng.normal(size=4)
            changed = np.flatnonzero((separate(Tensor(z), params, cfg).data
                                      != separate(Tensor(z2), params, cfg).data).any(axis=(0, 1, 2)))
            reach = changed.max() - k + 1
            assert abs(reach - rf) <= 1

    def test_describe_mentions_both_units(self):
        text = receptive_field(ModelConfig()).describe(period=1.0)
        assert "29 frames" in text and "720 samples" in text and "128 frames" in text


class TestParamCount:
    def test_encoder_term(self):
        assert param_count(ModelConfig()).breakdown["encoder"] == 32 * 48 + 32 == 1568

    def test_reference_config_matches_oracle(self, frozen, caplog):
        with caplog.at_level(logging.INFO, logger="convnilm"):
            counts = param_count(ModelConfig())
        assert counts.breakdown == frozen["params_reference_c5"]
        assert counts.total == frozen["params_reference_c5_total"] == 3990
        assert str(REFERENCE_PARAM_COUNT) in caplog.text
        assert param_count(ModelConfig.for_variant("causal-glu")).total == frozen["params_reference_c5_glu_total"]

    def test_doubling_sources_touches_mask_only(self):
        a, b = param_count(ModelConfig(n_sources=3)), param_count(ModelConfig(n_sources=6))
        diff = {k for k in a.breakdown if a.breakdown[k] != b.breakdown[k]}
        assert diff == {"separator.mask"}

    @pytest.mark.parametrize("variant", ["base", "causal", "causal-glu"])
    def test_matches_initialised_params(self, variant):
        cfg = ModelConfig.for_variant(variant, n_sources=4)
        assert param_count(cfg).total == sum(t.data.size for t in init_params(cfg).values())


class TestCheckpoint:
    @pytest.mark.parametrize("variant", ["base", "causal", "causal-glu"])
    def test_round_trip_bit_identical(self, variant, tmp_path, rng):
        cfg = toy(variant, leaky_slope=0.02)
        params = init_params(cfg, 9)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, cfg, params, {"fold": 2}, {"m.x": np.arange(3.0)})
        ck = load_checkpoint(path)
        assert ck.config == cfg and ck.meta == {"fold": 2}
        assert np.array_equal(ck.extra["m.x"], np.arange(3.0))
        x = rng.random(64)
        assert np.array_equal(predict(params, cfg, x), predict(ck.params, ck.config, x))
        save_checkpoint(tmp_path / "again.ckpt", ck.config, ck.params, ck.meta, ck.extra)
        assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"XXXX" + b"\0" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        cfg = toy()
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, cfg, init_params(cfg))
        path.write_bytes(path.read_bytes()[:-9])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_toy_model_gradient():
    cfg = toy("base")
    rng = np.random.default_rng(21)
    params = init_params(cfg, 0)
    names = sorted(params)
    x = rng.random((1, 1, 64))
    y = rng.random((1, 2, 64))

    def f(*leaves):
        p = dict(zip(names, leaves))
        return wmse(forward(Tensor(x), p, cfg), y)

    assert ad.grad_check(f, [params[n].data for n in names]) < 1e-3
