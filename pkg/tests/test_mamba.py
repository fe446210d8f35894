import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import grad_error, numeric_grad
from sepmamba import numerics as nx
from sepmamba.errors import ConfigError, ShapeError
from sepmamba.mamba import (
    BambaStackConfig,
    MambaBlockConfig,
    bamba_forward,
    init_bamba,
    init_block,
    mamba_block_forward,
    mamba_block_step,
)


def tensors(block):
    return {k: nx.Tensor(v, requires_grad=True) for k, v in block.items()}


def stack_tensors(arrs):
    return {b: [tensors(w) for w in ws] for b, ws in arrs.items()}


@pytest.fixture
def cfg():
    return MambaBlockConfig(d_model=4, expand=2, n_state=3, d_conv=3)


class TestBlock:
    def test_zero_out_proj_is_identity(self, cfg, rng, f64):
        w = tensors(init_block(cfg, rng, np.float64, zero_out=True))
        x = rng.standard_normal((4, 20))
        assert np.array_equal(mamba_block_forward(cfg, w, x).data, x)

    @pytest.mark.parametrize("L", [1, 2, 7, 33])
    def test_shape_preserved(self, cfg, rng, L):
        w = tensors(init_block(cfg, rng))
        assert mamba_block_forward(cfg, w, rng.standard_normal((4, L)).astype(np.float32)).shape == (4, L)

    def test_causal_probe(self, cfg, rng, f64):
        w = tensors(init_block(cfg, rng, np.float64))
        x = rng.standard_normal((4, 40))
        y = mamba_block_forward(cfg, w, x).data
        for t in (0, 10, 38):
            x2 = x.copy()
            x2[:, t + 1 :] += rng.standard_normal((4, 39 - t))
            y2 = mamba_block_forward(cfg, w, x2).data
            assert np.array_equal(y[:, : t + 1], y2[:, : t + 1])

    def test_centered_conv_sees_future(self, rng, f64):
        cfg = MambaBlockConfig(d_model=4, n_state=3, d_conv=3, causal_conv=False)
        w = tensors(init_block(cfg, rng, np.float64))
        x = rng.standard_normal((4, 20))
        x2 = x.copy()
        x2[:, 11] += 1.0
        assert np.abs(mamba_block_forward(cfg, w, x).data[:, 10] - mamba_block_forward(cfg, w, x2).data[:, 10]).max() > 0

    def test_wrong_input_width(self, cfg, rng):
        with pytest.raises(ConfigError):
            mamba_block_forward(cfg, tensors(init_block(cfg, rng)), np.zeros((5, 8), np.float32))

    def test_missing_weight(self, cfg, rng):
        w = tensors(init_block(cfg, rng))
        del w["D"]
        with pytest.raises(ConfigError, match="D"):
            mamba_block_forward(cfg, w, np.zeros((4, 8), np.float32))

    @settings(max_examples=40, deadline=None)
    @given(
        st.integers(1, 64),
        st.integers(1, 3),
        st.sampled_from([4, 8, 16, 32]),
        st.integers(1, 4),
        st.booleans(),
        st.booleans(),
    )
    def test_param_count_closed_form(self, d, expand, n_state, d_conv, use_d, norm):
        cfg = MambaBlockConfig(d, expand, n_state, d_conv, use_d=use_d, norm=norm)
        w = init_block(cfg, np.random.default_rng(0))
        assert cfg.count_params() == sum(v.size for v in w.values())

    @pytest.mark.parametrize("norm", [False, True])
    def test_chunked_step_matches_full(self, rng, f64, norm):
        cfg = MambaBlockConfig(d_model=4, n_state=3, d_conv=4, norm=norm)
        w = tensors(init_block(cfg, rng, np.float64))
        x = rng.standard_normal((4, 30))
        with nx.no_grad():
            full = mamba_block_forward(cfg, w, x).data
        state = {}
        parts = [mamba_block_step(cfg, w, x[:, a:b], state) for a, b in ((0, 1), (1, 9), (9, 30))]
        np.testing.assert_allclose(np.concatenate(parts, axis=1), full, rtol=0, atol=1e-12)

    def test_block_grads(self, rng, f64):
        cfg = MambaBlockConfig(d_model=3, n_state=2, d_conv=2, norm=True)
        arrs = init_block(cfg, rng, np.float64)
        x = rng.standard_normal((3, 9))
        c = rng.standard_normal((3, 9))
        w = tensors(arrs)
        xt = nx.Tensor(x.copy(), requires_grad=True)
        nx.backward(nx.tsum(mamba_block_forward(cfg, w, xt) * c))

        def f():
            with nx.no_grad():
                return float(np.sum(mamba_block_forward(cfg, {k: nx.Tensor(v) for k, v in arrs.items()}, x).data * c))

        for k, t in w.items():
            assert grad_error(t.grad, numeric_grad(f, arrs[k])) < 1e-6, k
        assert grad_error(xt.grad, numeric_grad(f, x)) < 1e-6


class TestBamba:
    def _stack(self, rng, bidirectional=True, recombine=False, causal_conv=True):
        block = MambaBlockConfig(d_model=4, n_state=3, d_conv=3, causal_conv=causal_conv)
        cfg = BambaStackConfig(2, block, bidirectional=bidirectional, recombine_per_block=recombine)
        return cfg, stack_tensors(init_bamba(cfg, rng, np.float64))

    def test_matches_explicit_composition(self, rng, f64):
        cfg, w = self._stack(rng)
        x = rng.standard_normal((4, 25))
        a = x
        for blk in w["fwd"]:
            a = mamba_block_forward(cfg.block, blk, a)
        b = x[:, ::-1].copy()
        for blk in w["bwd"]:
            b = mamba_block_forward(cfg.block, blk, b)
        expected = a.data + b.data[:, ::-1]
        np.testing.assert_allclose(bamba_forward(cfg, w, x).data, expected, rtol=1e-14, atol=1e-14)

    def test_causal_variant_does_not_reverse(self, rng, f64):
        cfg, w = self._stack(rng, bidirectional=False)
        x = rng.standard_normal((4, 25))
        a, b = x, x
        for blk in w["fwd"]:
            a = mamba_block_forward(cfg.block, blk, a)
        for blk in w["bwd"]:
            b = mamba_block_forward(cfg.block, blk, b)
        np.testing.assert_allclose(bamba_forward(cfg, w, x).data, a.data + b.data, rtol=1e-14, atol=1e-14)

    @pytest.mark.parametrize("recombine", [False, True])
    def test_tied_weights_time_reversal_symmetry(self, rng, f64, recombine):
        cfg, w = self._stack(rng, recombine=recombine, causal_conv=False)
        w["bwd"] = w["fwd"]
        x = rng.standard_normal((4, 30))
        lhs = bamba_forward(cfg, w, x[:, ::-1].copy()).data
        rhs = bamba_forward(cfg, w, x).data[:, ::-1]
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)

    def test_bidirectional_sees_both_ways(self, rng, f64):
        cfg, w = self._stack(rng)
        x = rng.standard_normal((4, 40))
        y = bamba_forward(cfg, w, x).data
        x2 = x.copy()
        x2[:, 39] += 1.0
        assert np.abs(bamba_forward(cfg, w, x2).data[:, 0] - y[:, 0]).max() > 0
        x3 = x.copy()
        x3[:, 0] += 1.0
        assert np.abs(bamba_forward(cfg, w, x3).data[:, 39] - y[:, 39]).max() > 0

    def test_causal_stack_probe(self, rng, f64):
        cfg, w = self._stack(rng, bidirectional=False)
        x = rng.standard_normal((4, 40))
        y = bamba_forward(cfg, w, x).data
        x2 = x.copy()
        x2[:, 21:] = 0.0
        assert np.array_equal(bamba_forward(cfg, w, x2).data[:, :21], y[:, :21])

    def test_branch_length_mismatch(self, rng):
        cfg, w = self._stack(rng)
        w["bwd"] = w["bwd"][:1]
        with pytest.raises(ShapeError):
            bamba_forward(cfg, w, np.zeros((4, 8)))

    def test_stack_param_count(self, rng):
        cfg, w = self._stack(rng)
        assert cfg.count_params() == sum(t.size for ws in w.values() for blk in ws for t in blk.values())
