import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sepmamba import separator as sep
from sepmamba.errors import ConfigError, DataError, NumericalError, ShapeError
from sepmamba.separator import SeparatorConfig

TOY = SeparatorConfig(n_stages=3, base_dim=8, blocks_per_stage=2)
TOY_CAUSAL = SeparatorConfig(n_stages=3, base_dim=4, blocks_per_stage=2, kernel_size=4, n_state=4, causal=True)


def hand_count(d0, d1, K=16, n_src=2, N=16, expand=2, d_conv=3):
    """Toy U-Net with two levels, one block per branch per stage, enumerated layer by layer."""

    def block(d):
        E, R = expand * d, math.ceil(d / 16)
        in_proj = 2 * E * d
        conv = E * d_conv + E
        x_proj = (R + 2 * N) * E
        dt = E * R + E
        a_log, skip_d = E * N, E
        out_proj = d * E
        return in_proj + conv + x_proj + dt + a_log + skip_d + out_proj

    stem = d0 * 1 * K + d0
    enc0 = 2 * block(d0)
    down0 = d1 * d0 * K + d1
    mid = 2 * block(d1)
    up0 = d1 * d0 * K + d0
    skip0 = d0 * d0 + d0
    dec0 = 2 * block(d0)
    head = d0 * n_src * K + n_src
    return stem + enc0 + down0 + mid + up0 + skip0 + dec0 + head


class TestParams:
    def test_small_preset_matches_table(self):
        assert abs(sep.count_params(sep.SEPMAMBA_S) / 7.2e6 - 1) <= 0.10

    def test_medium_preset_matches_table(self):
        assert abs(sep.count_params(sep.SEPMAMBA_M) / 22e6 - 1) <= 0.10

    def test_toy_matches_hand_enumeration(self):
        assert sep.count_params(TOY) == hand_count(8, 16)

    @pytest.mark.parametrize("config", [TOY, TOY_CAUSAL, SeparatorConfig(n_stages=5, base_dim=4, blocks_per_stage=4, norm=True)])
    def test_closed_form_equals_built_weights(self, config):
        assert sep.count_params(config) == sep.build(config).num_params()

    def test_small_preset_built(self):
        assert sep.build(sep.SEPMAMBA_S).num_params() == sep.count_params(sep.SEPMAMBA_S)

    def test_param_shapes_cover_build(self):
        w = sep.build(TOY)
        assert {k: v.shape for k, v in w.items()} == sep.param_shapes(TOY)


class TestMacs:
    def test_small_preset_within_tolerance(self):
        assert abs(sep.count_macs(sep.SEPMAMBA_S) / 1e9 / 12.46 - 1) <= 0.15

    def test_medium_preset_within_tolerance(self):
        assert abs(sep.count_macs(sep.SEPMAMBA_M) / 1e9 / 37.0 - 1) <= 0.15

    def test_stem_is_single_conv_definition(self):
        stem = sep.layer_costs(TOY, 8000)[0]
        assert stem.macs == 1 * 8 * 16 * 4000

    def test_linear_in_duration(self):
        assert sep.count_macs(TOY, 2.0) == 2 * sep.count_macs(TOY, 1.0)

    def test_rejects_nonpositive_duration(self):
        with pytest.raises(ValueError):
            sep.count_macs(TOY, 0.0)

    def test_layer_params_sum_to_total(self):
        assert sum(lc.params for lc in sep.layer_costs(TOY, 800)) == sep.count_params(TOY)


@pytest.fixture(scope="module")
def toy_weights():
    return sep.build(TOY, seed=3)


@pytest.fixture(scope="module")
def causal_weights():
    return sep.build(TOY_CAUSAL, seed=1)


class TestForward:
    @pytest.fixture
    def weights(self, toy_weights):
        return toy_weights

    def test_output_shape_four_seconds(self, weights):
        x = np.random.default_rng(0).standard_normal((1, 32000)).astype(np.float32)
        assert sep.separate(weights, x).shape == (2, 32000)

    def test_zero_input_zero_output(self, weights):
        assert not sep.separate(weights, np.zeros((1, 800), np.float32)).any()

    def test_padding_consistency(self, weights):
        x = np.random.default_rng(1).standard_normal((1, 1001)).astype(np.float32)
        padded = np.pad(x, ((0, 0), (0, 3)))
        assert np.array_equal(sep.separate(weights, x), sep.separate(weights, padded)[:, :1001])

    @settings(max_examples=15, deadline=None)
    @given(st.floats(1e-6, 1.0), st.integers(16, 200), st.integers(0, 2**32 - 1))
    def test_finite_in_finite_out(self, toy_weights, peak, L, seed):
        # full-scale audio domain; the gated blocks grow polynomially beyond it
        x = np.random.default_rng(seed).uniform(-peak, peak, (1, L))
        assert np.all(np.isfinite(sep.separate(toy_weights, x.astype(np.float32))))

    def test_overflow_raises_instead_of_returning_nan(self):
        w = sep.build(sep.SEPMAMBA_S)
        x = 1e3 * np.random.default_rng(0).standard_normal((1, 256)).astype(np.float32)
        with pytest.raises(NumericalError):
            sep.separate(w, x)

    def test_one_dimensional_input_accepted(self, weights):
        x = np.random.default_rng(2).standard_normal(64).astype(np.float32)
        np.testing.assert_array_equal(sep.separate(weights, x), sep.separate(weights, x[None]))

    def test_too_short_input(self, weights):
        with pytest.raises(ShapeError):
            sep.separate(weights, np.zeros((1, 8), np.float32))

    def test_stereo_rejected(self, weights):
        with pytest.raises(ShapeError):
            sep.separate(weights, np.zeros((2, 64), np.float32))

    def test_same_seed_same_bits(self):
        x = np.random.default_rng(5).standard_normal((1, 128)).astype(np.float32)
        assert sep.separate(sep.build(TOY, 9), x).tobytes() == sep.separate(sep.build(TOY, 9), x).tobytes()


class TestLookahead:
    def test_formula(self):
        assert sep.lookahead(TOY_CAUSAL) == 3
        assert sep.lookahead(TOY) is None
        assert sep.lookahead(SeparatorConfig(causal=True)) == 2**3 - 1

    @pytest.mark.parametrize("t,expected", [(0, 3), (3, 3), (4, 7), (10, 11)])
    def test_horizon(self, t, expected):
        assert sep.dependency_horizon(TOY_CAUSAL, t) == expected

    def test_horizon_undefined_for_noncausal(self):
        with pytest.raises(ConfigError):
            sep.dependency_horizon(TOY, 0)

    def test_future_perturbation_beyond_horizon_is_invisible(self):
        w = sep.build(TOY_CAUSAL, precision="f64")
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 64))
        y = sep.separate(w, x)
        for t in (5, 20, 41):
            x2 = x.copy()
            x2[0, sep.dependency_horizon(TOY_CAUSAL, t) + 1 :] = rng.standard_normal(64 - sep.dependency_horizon(TOY_CAUSAL, t) - 1)
            assert np.array_equal(sep.separate(w, x2)[:, : t + 1], y[:, : t + 1])

    def test_noncausal_sees_far_future(self):
        cfg = SeparatorConfig(n_stages=3, base_dim=4, blocks_per_stage=2, kernel_size=4, n_state=4)
        w = sep.build(cfg, precision="f64")
        x = np.random.default_rng(0).standard_normal((1, 64))
        x2 = x.copy()
        x2[0, 63] += 1.0
        assert np.abs(sep.separate(w, x2)[:, 0] - sep.separate(w, x)[:, 0]).max() > 0


class TestStreaming:
    @pytest.fixture
    def weights(self, causal_weights):
        return causal_weights

    def test_two_halves_match_batch(self, weights):
        x = np.random.default_rng(0).standard_normal(200).astype(np.float32)
        batch = sep.separate(weights, x)
        a, st_ = sep.forward_streaming(weights, x[:100])
        b, _ = sep.forward_streaming(weights, x[100:], st_)
        assert np.max(np.abs(np.concatenate([a, b], axis=1) - batch)) < 1e-5

    @pytest.mark.parametrize("chunk", [4, 8, 36])
    def test_chunk_sizes(self, weights, chunk):
        x = np.random.default_rng(chunk).standard_normal(144).astype(np.float32)
        batch = sep.separate(weights, x)
        outs, state = [], None
        for lo in range(0, 144, chunk):
            y, state = sep.forward_streaming(weights, x[lo : lo + chunk], state)
            outs.append(y)
        assert np.max(np.abs(np.concatenate(outs, axis=1) - batch)) < 1e-5

    def test_zero_frame_zero_output(self, weights):
        y, _ = sep.forward_streaming(weights, np.zeros(16, np.float32))
        assert not y.any()

    def test_carry_round_trip_is_exact(self, weights):
        rng = np.random.default_rng(4)
        x1, x2 = rng.standard_normal(32).astype(np.float32), rng.standard_normal(32).astype(np.float32)
        _, state = sep.forward_streaming(weights, x1)
        direct, _ = sep.forward_streaming(weights, x2, state)
        restored = sep.StreamState.from_bytes(state.to_bytes())
        again, _ = sep.forward_streaming(weights, x2, restored)
        assert direct.tobytes() == again.tobytes()

    def test_carry_not_mutated(self, weights):
        _, state = sep.forward_streaming(weights, np.ones(8, np.float32))
        blob = state.to_bytes()
        sep.forward_streaming(weights, np.ones(8, np.float32), state)
        assert state.to_bytes() == blob

    def test_noncausal_rejected(self):
        with pytest.raises(ConfigError):
            sep.forward_streaming(sep.build(TOY), np.zeros(8, np.float32))

    def test_foreign_state_rejected(self, weights):
        other = sep.build(SeparatorConfig(n_stages=3, base_dim=4, blocks_per_stage=2, kernel_size=6, n_state=4, causal=True))
        _, state = sep.forward_streaming(other, np.zeros(8, np.float32))
        with pytest.raises(ConfigError):
            sep.forward_streaming(weights, np.zeros(8, np.float32), state)

    def test_partial_frame_rejected(self, weights):
        with pytest.raises(ShapeError):
            sep.forward_streaming(weights, np.zeros(6, np.float32))

    def test_corrupt_state_blob(self):
        with pytest.raises(DataError):
            sep.StreamState.from_bytes(b"not a state")


class TestConfig:
    def test_round_trip(self):
        assert SeparatorConfig.from_dict(TOY_CAUSAL.to_dict()) == TOY_CAUSAL

    def test_string_values_coerced(self):
        cfg = SeparatorConfig.from_dict({"base_dim": "8", "causal": "yes"})
        assert cfg.base_dim == 8 and cfg.causal is True

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="dim_base"):
            SeparatorConfig.from_dict({"dim_base": 8})

    @pytest.mark.parametrize("kw", [{"n_stages": 4}, {"blocks_per_stage": 3}, {"kernel_size": 2}, {"base_dim": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            SeparatorConfig(**kw)
