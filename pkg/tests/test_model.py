import math

import numpy as np
import pytest

from tstgen.errors import ConfigError, DataError, WindowError
from tstgen.model import (ModelConfig, build_masks, count_parameters, encoder_block,
                          forward, init_params, multi_head_attention, parameter_shapes,
                          positional_encoding)
from tstgen.numerics import Tensor
from tstgen.verify import model_checks, tiny_config


@pytest.fixture
def cfg():
    return tiny_config(3)


@pytest.fixture
def params(cfg):
    return init_params(cfg, seed=3)


class TestPositionalEncoding:
    def test_row_zero(self):
        np.testing.assert_array_equal(positional_encoding(1, 4)[0], [0, 1, 0, 1])

    def test_row_one(self):
        # frequencies for d=4: 10000^(0/4) = 1 and 10000^(2/4) = 100
        expected = [math.sin(1), math.cos(1), math.sin(0.01), math.cos(0.01)]
        np.testing.assert_allclose(positional_encoding(2, 4)[1], expected, rtol=1e-14)
        np.testing.assert_allclose(positional_encoding(2, 4)[1], [0.84147, 0.54030, 0.01000, 0.99995],
                                   atol=5e-6)

    @pytest.mark.parametrize("T,d", [(1, 2), (50, 16), (400, 512)])
    def test_bounded(self, T, d):
        assert np.abs(positional_encoding(T, d)).max() <= 1.0

    def test_odd_width_rejected(self):
        with pytest.raises(ConfigError):
            positional_encoding(3, 5)


class TestMasks:
    def test_causal(self):
        allowed = build_masks([3], 3).allowed()[0]
        assert allowed[1].tolist() == [True, True, False]
        assert allowed[2].tolist() == [True, True, True]

    def test_padding_key_forbidden_everywhere(self):
        allowed = build_masks([2], 3).allowed()[0]
        assert not allowed[:, 2].any()

    def test_single_position(self):
        assert build_masks([1], 1).allowed()[0].tolist() == [[True]]

    def test_combined_rule(self):
        m = build_masks([4, 2], 4)
        causal_forbids = ~np.tril(np.ones((4, 4), dtype=bool))
        for b, L in enumerate([4, 2]):
            pad = np.arange(4) >= L
            np.testing.assert_array_equal(m.forbidden()[b, 0], causal_forbids | pad[None, :])

    @pytest.mark.parametrize("lengths", [[0], [4], [2, 5]])
    def test_bad_lengths(self, lengths):
        with pytest.raises(DataError):
            build_masks(lengths, 3)


class TestParameterCount:
    def test_gcut_reference(self):
        assert count_parameters(ModelConfig.gcut_reference()) == 12_635_659

    def test_small_hand_sum(self):
        # 4*(64+8) + 2*(64+8) + 4*8 + (24+8) + (24+3)
        assert count_parameters(ModelConfig(input_dim=3, d_model=8, n_heads=2, n_blocks=1, d_ff=8)) == 523

    def test_projection_and_head_only(self):
        assert count_parameters(ModelConfig(input_dim=1, d_model=4, n_heads=1, n_blocks=0, d_ff=4)) == 13

    @pytest.mark.parametrize("kw", [dict(input_dim=3, d_model=8, n_heads=2, n_blocks=2, d_ff=16),
                                    dict(input_dim=11, d_model=512, n_heads=8, n_blocks=8, d_ff=512)])
    def test_matches_materialized_shapes(self, kw):
        cfg = ModelConfig(**kw)
        assert sum(int(np.prod(s)) for s in parameter_shapes(cfg).values()) == count_parameters(cfg)

    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError):
            ModelConfig(d_model=10, n_heads=3)


class TestInit:
    def test_deterministic(self, cfg):
        a, b = init_params(cfg, 7), init_params(cfg, 7)
        assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)

    def test_layer_norm_gains_and_biases(self, params):
        for name, p in params.items():
            if name.endswith(".gain"):
                assert (p.data == 1).all()
            elif name.endswith(".bias"):
                assert (p.data == 0).all()
            assert np.isfinite(p.data).all()

    def test_glorot_bound_gcut_input(self):
        bound = math.sqrt(6 / (11 + 512))
        assert abs(bound - 0.1071) < 1e-4
        # zero blocks keeps the init cheap; only input.weight is inspected
        params = init_params(ModelConfig(input_dim=11, d_model=512, n_heads=8, n_blocks=0, d_ff=512), 0)
        w = params["input.weight"].data
        assert np.abs(w).max() <= bound
        assert np.abs(w).max() > 0.9 * bound


class TestAttention:
    def test_single_step_is_value_projection(self, cfg, params):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 8)).astype(np.float32))
        out = multi_head_attention(x, params, "blocks.0.attn.", 2, build_masks([1], 1).forbidden())
        p = {k: v.data for k, v in params.items()}
        v = x.data[0] @ p["blocks.0.attn.v.weight"] + p["blocks.0.attn.v.bias"]
        expected = v @ p["blocks.0.attn.o.weight"] + p["blocks.0.attn.o.bias"]
        np.testing.assert_allclose(out.data[0], expected, rtol=1e-5, atol=1e-6)

    def test_identical_values_pass_through(self, cfg, params):
        # with W_v = 0 every value row equals b_v, so each head outputs its slice of b_v
        c = np.linspace(-1, 1, 8).astype(np.float32)
        params["blocks.0.attn.v.weight"].data[:] = 0
        params["blocks.0.attn.v.bias"].data[:] = c
        params["blocks.0.attn.o.weight"].data[:] = np.eye(8, dtype=np.float32)
        x = Tensor(np.random.default_rng(1).normal(size=(2, 5, 8)).astype(np.float32))
        out = multi_head_attention(x, params, "blocks.0.attn.", 2, build_masks([5, 3], 5).forbidden())
        np.testing.assert_allclose(out.data, np.broadcast_to(c, (2, 5, 8)), atol=1e-6)



class TestEncoderBlock:
    def test_shape_preserved(self, cfg, params):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 5, 8)).astype(np.float32))
        out = encoder_block(x, params, 0, cfg, build_masks([5, 5], 5).forbidden())
        assert out.shape == (2, 5, 8)

    def test_causality_probe(self, cfg, params):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 6, 8)).astype(np.float32)
        forbidden = build_masks([6], 6).forbidden()
        base = encoder_block(Tensor(x), params, 0, cfg, forbidden).data
        for t in range(6):
            y = x.copy()
            y[0, t] += 1.0
            out = encoder_block(Tensor(y), params, 0, cfg, forbidden).data
            np.testing.assert_array_equal(out[0, :t], base[0, :t])
            assert not np.array_equal(out[0, t], base[0, t])


class TestForward:
    def test_sigmoid_range(self, cfg, params):
        x = np.random.default_rng(0).normal(scale=50, size=(3, 7, 3))
        out = forward(params, cfg, x).data
        assert ((out > 0) & (out < 1)).all()

    def test_tanh_range(self):
        cfg = ModelConfig(input_dim=3, d_model=8, n_heads=2, n_blocks=1, d_ff=8, max_window=16,
                          output_activation="tanh")
        out = forward(init_params(cfg, 0), cfg, np.random.default_rng(0).normal(scale=50, size=(2, 4, 3))).data
        assert ((out > -1) & (out < 1)).all()

    def test_future_inputs_do_not_leak(self, cfg, params):
        rng = np.random.default_rng(4)
        x = rng.uniform(size=(1, 8, 3)).astype(np.float32)
        base = forward(params, cfg, x).data
        for t in rng.choice(8, size=5, replace=False):
            y = x.copy()
            y[0, t:] = rng.uniform(size=(8 - t, 3))
            np.testing.assert_array_equal(forward(params, cfg, y).data[0, :t], base[0, :t])

    def test_padding_isolation(self, cfg, params):
        rng = np.random.default_rng(5)
        x = rng.uniform(size=(2, 6, 3)).astype(np.float32)
        mask = build_masks([6, 3], 6)
        base = forward(params, cfg, x, mask).data
        x[1, 3:] = rng.normal(scale=100, size=(3, 3))
        out = forward(params, cfg, x, mask).data
        np.testing.assert_array_equal(out[1, :3], base[1, :3])
        np.testing.assert_array_equal(out[0], base[0])

    def test_deterministic_inference(self, cfg, params):
        x = np.random.default_rng(6).uniform(size=(2, 5, 3))
        a = forward(params, cfg, x, mode="infer").data
        b = forward(params, cfg, x, mode="infer").data
        assert a.tobytes() == b.tobytes()

    def test_train_mode_dropout_seeded(self, params):
        cfg = tiny_config(3)
        cfg.dropout_p = 0.3
        x = np.random.default_rng(7).uniform(size=(2, 5, 3))
        a = forward(params, cfg, x, mode="train", rng=np.random.default_rng(1)).data
        b = forward(params, cfg, x, mode="train", rng=np.random.default_rng(1)).data
        c = forward(params, cfg, x, mode="infer").data
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, c)

    def test_window_limit(self, cfg, params):
        with pytest.raises(WindowError):
            forward(params, cfg, np.zeros((1, cfg.max_window + 1, 3)))

    def test_input_width_checked(self, cfg, params):
        with pytest.raises(ConfigError):
            forward(params, cfg, np.zeros((1, 4, 5)))

    def test_attention_block_and_model_gradchecks(self):
        reports = model_checks()
        assert [r.name for r in reports][:2] == ["multi_head_attention", "encoder_block"]
        assert all(r.passed for r in reports), [str(r) for r in reports]
