"""Stripe attention invariants: stochasticity of every weight matrix,
the two closed-form fixed points, batching, and workspace accounting."""

import numpy as np
import pytest

from mcms.mssa import (
    POOL_SCALES, MssaParams, descriptors, mssa_forward, stripe_weights,
    workspace_elements,
)
from mcms.tensor import Tensor, grad_check, grad_check_params


class TestRowStochastic:
    def test_stripe_matrices_rows_sum_to_one(self, rng):
        p = MssaParams(16, rng, np.float64)
        x = Tensor(rng.standard_normal((1, 16, 16, 16)))
        a, *pooled = descriptors(x, p)
        for m, s in zip(pooled, POOL_SCALES):
            sw = stripe_weights(a, m, s)
            np.testing.assert_allclose(sw.sx.data.sum(axis=1), 1.0, atol=1e-8)
            np.testing.assert_allclose(sw.sy.data.sum(axis=1), 1.0, atol=1e-8)
            hw = 16 * 16
            assert sw.sx.shape == (hw, hw // (s * s))
            assert sw.sy.shape == (hw // (s * s), hw)


class TestFixedPoints:
    def test_zero_maps_to_zero(self, rng):
        p = MssaParams(8, rng, np.float64)
        out = mssa_forward(Tensor(np.zeros((1, 8, 16, 16))), p)
        assert np.abs(out.data).max() == 0.0

    def test_constant_doubles(self, rng):
        # row-stochastic F applied to a channelwise-constant map returns
        # the same constants, and the residual then doubles them
        p = MssaParams(8, rng, np.float32)
        const = rng.uniform(-1, 1, (1, 8, 1, 1)).astype(np.float32)
        x = np.broadcast_to(const, (1, 8, 16, 16)).copy()
        out = mssa_forward(Tensor(x), p).data
        np.testing.assert_allclose(out, 2.0 * x, atol=1e-6)

    def test_output_shape(self, rng):
        p = MssaParams(16, rng)
        x = Tensor(rng.standard_normal((2, 16, 24, 16)).astype(np.float32))
        assert mssa_forward(x, p).shape == (2, 16, 24, 16)


class TestBatching:
    def test_batch_equals_per_sample(self, rng):
        p = MssaParams(8, rng, np.float64)
        xs = rng.standard_normal((3, 8, 16, 16))
        batched = mssa_forward(Tensor(xs), p).data
        for i in range(3):
            single = mssa_forward(Tensor(xs[i:i + 1]), p).data
            np.testing.assert_allclose(batched[i:i + 1], single, atol=1e-12)


class TestValidation:
    def test_rejects_indivisible_channels(self, rng):
        with pytest.raises(ValueError):
            MssaParams(12, rng)

    def test_rejects_indivisible_spatial(self, rng):
        p = MssaParams(8, rng)
        with pytest.raises(ValueError):
            mssa_forward(Tensor(rng.standard_normal((1, 8, 12, 16)).astype(np.float32)), p)

    def test_rejects_wrong_channels(self, rng):
        p = MssaParams(8, rng)
        with pytest.raises(ValueError):
            mssa_forward(Tensor(rng.standard_normal((1, 16, 16, 16)).astype(np.float32)), p)


class TestWorkspace:
    def test_accounting(self):
        c, h, w = 16, 16, 24
        hw = h * w
        ws = workspace_elements(c, h, w)
        assert ws["r"] == c * hw
        assert ws["f"] == hw * hw
        for s in POOL_SCALES:
            assert ws[f"sx{s}"] == hw * (hw // (s * s))
            assert ws[f"sy{s}"] == (hw // (s * s)) * hw
        # fused map dominates memory at any pooling scale
        assert ws["f"] >= max(v for k, v in ws.items() if k != "f")


class TestGradients:
    def test_input_gradient(self, rng):
        p = MssaParams(8, rng, np.float64)
        x = Tensor(rng.standard_normal((1, 8, 8, 8)), requires_grad=True)
        assert grad_check(lambda z: mssa_forward(z, p).abs().mean(), x,
                          max_coords=24) < 1e-4

    def test_projection_gradient(self, rng):
        p = MssaParams(8, rng, np.float64)
        x = Tensor(rng.standard_normal((1, 8, 8, 8)))
        err = grad_check_params(lambda: mssa_forward(x, p).abs().mean(),
                                [p.proj_w, p.proj_b], coords_per_tensor=4)
        assert err < 1e-4
