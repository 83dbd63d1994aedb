"""The composed layer: reductions to plain normalization, conditional start,
statistics flow and the layer-class wrapper."""

import numpy as np
import pytest

from spngan import spn
from spngan.layers import SelfPixelNorm


class TestReductions:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_identity_at_init_equals_plain_normalization(self, dtype):
        rng = np.random.default_rng(0)
        params, stats = spn.init_spn_params(6, rng=rng, dtype=dtype)
        x = (rng.standard_normal((4, 8, 8, 6)) * 3).astype(dtype)
        y, _, _ = spn.spn_forward(x, params, stats, train=True)
        xhat, _, _ = spn.channelwise_normalize(x, stats.main, train=True)
        # gamma == 1 and beta == 0 exactly at init, so this is bitwise
        np.testing.assert_array_equal(y, xhat)

    def test_constant_mask_k1_is_a_per_channel_affine(self):
        rng = np.random.default_rng(1)
        params, stats = spn.init_spn_params(5, kernel_size=1, rng=rng,
                                            dtype=np.float64)
        params.proj_w[...] = 0.0
        params.norm_shift[...] = rng.standard_normal(5)
        for name in ("k_gamma_fg", "k_gamma_bg", "k_beta_fg", "k_beta_bg"):
            getattr(params, name)[...] = rng.standard_normal((1, 1, 5))
        x = rng.standard_normal((3, 6, 6, 5))
        y, _, _ = spn.spn_forward(x, params, stats, train=True)
        # zero projection: the mask is sigmoid(shift) per channel, constant
        # over space, so gamma/beta collapse to per-channel scalars
        m = spn.sigmoid(params.norm_shift)
        gamma = m * params.k_gamma_fg[0, 0] + (1 - m) * params.k_gamma_bg[0, 0]
        beta = m * params.k_beta_fg[0, 0] + (1 - m) * params.k_beta_bg[0, 0]
        xhat, _, _ = spn.channelwise_normalize(x, stats.main, train=True)
        np.testing.assert_allclose(y, gamma * xhat + beta, rtol=1e-10, atol=1e-10)

    def test_conditional_layer_starts_as_unconditional(self):
        rng = np.random.default_rng(2)
        pc, sc = spn.init_spn_params(4, rng=rng, num_classes=3, emb_dim=6,
                                     z_dim=5, dtype=np.float64)
        pu = spn.SpnParams(pc.proj_w, pc.proj_b, np.ones(4), np.zeros(4),
                           pc.k_gamma_fg, pc.k_gamma_bg, pc.k_beta_fg,
                           pc.k_beta_bg)
        su = spn.SpnStats(sc.main, sc.mask)
        x = rng.standard_normal((2, 6, 6, 4))
        cond = np.array([2, 0])
        z = rng.standard_normal((2, 5))
        yc, _, _ = spn.cspn_forward(x, cond, z, pc, sc, train=True)
        yu, _, _ = spn.spn_forward(x, pu, su, train=True)
        np.testing.assert_array_equal(yc, yu)


class TestStatisticsFlow:
    def test_both_sites_update_and_eval_is_deterministic(self):
        rng = np.random.default_rng(3)
        params, stats = spn.init_spn_params(4, rng=rng, dtype=np.float64)
        x = rng.standard_normal((2, 5, 5, 4))
        _, stats1, _ = spn.spn_forward(x, params, stats, train=True)
        assert stats1.main.initialized and stats1.mask.initialized
        assert not stats.main.initialized
        y1, s_a, _ = spn.spn_forward(x, params, stats1, train=False)
        y2, s_b, _ = spn.spn_forward(x, params, stats1, train=False)
        np.testing.assert_array_equal(y1, y2)
        assert s_a.main is stats1.main and s_b.mask is stats1.mask

    def test_eval_without_training_raises(self):
        rng = np.random.default_rng(4)
        params, stats = spn.init_spn_params(4, rng=rng, dtype=np.float64)
        with pytest.raises(RuntimeError, match="uninitialized"):
            spn.spn_forward(rng.standard_normal((1, 4, 4, 4)), params, stats,
                            train=False)


class TestArgumentContract:
    def test_unconditional_rejects_cond_and_z(self):
        rng = np.random.default_rng(5)
        params, stats = spn.init_spn_params(4, rng=rng, dtype=np.float64)
        x = rng.standard_normal((2, 4, 4, 4))
        with pytest.raises(ValueError):
            spn.spn_forward(x, params, stats, cond=np.array([0, 1]))
        with pytest.raises(ValueError):
            spn.spn_forward(x, params, stats, z=rng.standard_normal((2, 5)))

    def test_cspn_requires_conditional_params_and_inputs(self):
        rng = np.random.default_rng(6)
        pu, su = spn.init_spn_params(4, rng=rng, dtype=np.float64)
        x = rng.standard_normal((2, 4, 4, 4))
        with pytest.raises(ValueError, match="conditional"):
            spn.cspn_forward(x, np.array([0, 1]), None, pu, su)
        pc, stc = spn.init_spn_params(4, rng=rng, num_classes=3, emb_dim=4,
                                      z_dim=5, dtype=np.float64)
        with pytest.raises(ValueError, match="cond"):
            spn.cspn_forward(x, None, rng.standard_normal((2, 5)), pc, stc)
        with pytest.raises(ValueError, match="z is required"):
            spn.cspn_forward(x, np.array([0, 1]), None, pc, stc)


class TestMaskRangeInvariant:
    def test_random_forwards_stay_in_open_interval(self):
        rng = np.random.default_rng(7)
        for trial in range(25):
            c = int(rng.integers(2, 9))
            params, stats = spn.init_spn_params(c, rng=rng, dtype=np.float32)
            for name in params.field_names():
                arr = getattr(params, name)
                arr += (0.3 * rng.standard_normal(arr.shape)).astype(np.float32)
            x = (rng.standard_normal((2, 6, 6, c)) *
                 rng.uniform(0.1, 10)).astype(np.float32)
            _, _, cache = spn.spn_forward(x, params, stats, train=True)
            m = cache[3][4]
            minv = spn.invert_mask(m)
            assert m.min() > 0 and m.max() < 1
            assert ((m + minv) == 1.0).all()


class TestLayerWrapper:
    def test_forward_matches_functional_core(self):
        rng = np.random.default_rng(8)
        layer = SelfPixelNorm(4, np.random.default_rng(42), dtype=np.float64)
        params, stats = spn.init_spn_params(4, rng=np.random.default_rng(42),
                                            dtype=np.float64)
        x = rng.standard_normal((2, 5, 5, 4))
        y_layer = layer.forward(x, train=True)
        y_fn, _, _ = spn.spn_forward(x, params, stats, train=True)
        np.testing.assert_array_equal(y_layer, y_fn)

    def test_gradients_accumulate_into_parameters(self):
        rng = np.random.default_rng(9)
        layer = SelfPixelNorm(4, rng, dtype=np.float64)
        x = rng.standard_normal((2, 5, 5, 4))
        y = layer.forward(x, train=True)
        layer.zero_grad()
        dx = layer.backward(np.ones_like(y))
        assert dx.shape == x.shape
        grads = {n: p.grad.copy() for n, p in layer.named_parameters()}
        assert any(np.abs(g).max() > 0 for g in grads.values())
        layer.backward(np.ones_like(y))
        for n, p in layer.named_parameters():
            np.testing.assert_allclose(p.grad, 2 * grads[n], rtol=1e-12)

    def test_mask_capture(self):
        rng = np.random.default_rng(10)
        layer = SelfPixelNorm(4, rng)
        x = rng.standard_normal((2, 5, 5, 4)).astype(np.float32)
        layer.forward(x, train=True)
        assert layer.last_mask is None
        layer.capture_mask = True
        layer.forward(x, train=True)
        assert layer.last_mask.shape == (2, 5, 5, 4)

    def test_buffer_roundtrip(self):
        rng = np.random.default_rng(11)
        layer = SelfPixelNorm(4, rng, dtype=np.float64)
        x = rng.standard_normal((3, 5, 5, 4))
        layer.forward(x, train=True)
        flat = dict(layer.named_buffers())
        assert "main_mean" in flat and "mask_var" in flat
        layer2 = SelfPixelNorm(4, np.random.default_rng(99), dtype=np.float64)
        for n, p in layer2.named_parameters():
            p.data[...] = dict(layer.named_parameters())[n].data
        layer2.load_buffers({k: v.copy() for k, v in flat.items()})
        y1 = layer.forward(x, train=False)
        y2 = layer2.forward(x, train=False)
        np.testing.assert_array_equal(y1, y2)
