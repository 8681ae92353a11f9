"""Units for the tensor core: forward semantics against numpy, every
operator's backward against central differences, and the graph plumbing
(no_grad, broadcasting, accumulation)."""

import numpy as np
import pytest

from mcms.tensor import (
    Tensor, activation, avgpool2d, chunk, concat, conv2d, depthwise_conv2d,
    grad_check, grad_check_params, matmul, no_grad, pad_reflect, softmax_rows,
    transpose, upsample2x, zero_grads,
)


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


class TestBasics:
    def test_float32_coercion(self):
        t = Tensor(np.arange(6).reshape(2, 3))
        assert t.dtype == np.float32

    def test_float64_preserved(self, rng):
        t = Tensor(rng.standard_normal((2, 2)))
        assert t.dtype == np.float64

    def test_backward_needs_scalar(self, rng):
        t = _t(rng, 3, 4)
        with pytest.raises(ValueError, match="scalar"):
            (t * 2.0).backward()

    def test_backward_needs_grad(self, rng):
        t = Tensor(rng.standard_normal((2, 2)))
        with pytest.raises(ValueError, match="requires no gradient"):
            t.sum().backward()

    def test_no_grad_suppresses_graph(self, rng):
        t = _t(rng, 3)
        with no_grad():
            out = (t * t).sum()
        assert not out.requires_grad

    def test_grad_accumulates_over_reuse(self, rng):
        t = _t(rng, 4)
        (t + t).sum().backward()
        np.testing.assert_allclose(t.grad, 2.0 * np.ones(4))

    def test_zero_grads(self, rng):
        t = _t(rng, 4)
        t.sum().backward()
        zero_grads([t])
        assert t.grad is None

    def test_broadcast_add_backward(self, rng):
        a = _t(rng, 2, 3)
        b = _t(rng, 3)
        (a + b).sum().backward()
        np.testing.assert_allclose(b.grad, 2.0 * np.ones(3))

    def test_arithmetic_matches_numpy(self, rng):
        x = rng.standard_normal((3, 4))
        y = rng.standard_normal((3, 4))
        np.testing.assert_allclose((Tensor(x) * Tensor(y) + Tensor(x)).data, x * y + x)
        np.testing.assert_allclose((Tensor(x) / Tensor(np.abs(y) + 1)).data, x / (np.abs(y) + 1))
        np.testing.assert_allclose((2.0 - Tensor(x)).data, 2.0 - x)
        np.testing.assert_allclose((1.0 / Tensor(np.abs(x) + 1)).data, 1.0 / (np.abs(x) + 1))

    def test_reductions_match_numpy(self, rng):
        x = rng.standard_normal((2, 3, 4))
        np.testing.assert_allclose(Tensor(x).mean(axis=1, keepdims=True).data,
                                   x.mean(axis=1, keepdims=True))
        np.testing.assert_allclose(Tensor(x).sum(axis=(0, 2)).data, x.sum(axis=(0, 2)))


class TestGradients:
    def test_elementwise_chain(self, rng):
        t = _t(rng, 5, 3)
        c = rng.standard_normal((5, 3))
        err = grad_check(lambda z: ((z * Tensor(c) - z / 3.0 + 1.5).abs()).mean(), t)
        assert err < 1e-6

    def test_sqrt(self, rng):
        t = Tensor(rng.uniform(0.5, 2.0, (4, 4)), requires_grad=True)
        assert grad_check(lambda z: z.sqrt().sum(), t) < 1e-6

    def test_mean_axis(self, rng):
        t = _t(rng, 3, 4, 5)
        c = rng.standard_normal((3, 1, 5))
        err = grad_check(lambda z: (z.mean(axis=1, keepdims=True) * Tensor(c)).sum(), t)
        assert err < 1e-6

    def test_matmul(self, rng):
        a = _t(rng, 4, 6)
        b = _t(rng, 6, 3)
        c = rng.standard_normal((4, 3))
        assert grad_check(lambda z: (matmul(z, b) * Tensor(c)).sum(), a) < 1e-6
        assert grad_check(lambda z: (matmul(a, z) * Tensor(c)).sum(), b) < 1e-6

    def test_softmax_rows(self, rng):
        t = _t(rng, 5, 7)
        c = rng.standard_normal((5, 7))
        assert grad_check(lambda z: (softmax_rows(z) * Tensor(c)).sum(), t) < 1e-6

    def test_softmax_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            softmax_rows(Tensor(np.array([[1.0, np.nan]])))

    def test_concat_chunk(self, rng):
        t = _t(rng, 2, 8, 3, 3)
        c = rng.standard_normal((2, 8, 3, 3))

        def f(z):
            parts = chunk(z, 4)
            return (concat(parts[::-1]) * Tensor(c)).sum()

        assert grad_check(f, t) < 1e-6

    def test_conv2d(self, rng):
        x = _t(rng, 2, 3, 6, 7)
        w = _t(rng, 4, 3, 3, 3, scale=0.3)
        b = _t(rng, 4, scale=0.1)
        assert grad_check(lambda z: conv2d(z, w, b).abs().mean(), x) < 1e-6
        assert grad_check(lambda z: conv2d(x, z, b).abs().mean(), w) < 1e-6
        assert grad_check(lambda z: conv2d(x, w, z).abs().mean(), b) < 1e-6

    def test_conv2d_stride2(self, rng):
        x = _t(rng, 1, 2, 8, 8)
        w = _t(rng, 3, 2, 3, 3, scale=0.3)
        assert grad_check(lambda z: conv2d(z, w, None, stride=2).abs().mean(), x) < 1e-6
        assert grad_check(lambda z: conv2d(x, z, None, stride=2).abs().mean(), w) < 1e-6

    def test_depthwise(self, rng):
        x = _t(rng, 2, 4, 6, 6)
        w = _t(rng, 4, 1, 3, 3, scale=0.3)
        assert grad_check(lambda z: depthwise_conv2d(z, w, None).abs().mean(), x) < 1e-6
        assert grad_check(lambda z: depthwise_conv2d(x, z, None).abs().mean(), w) < 1e-6

    def test_pad_reflect_symmetric(self, rng):
        x = _t(rng, 2, 3, 5, 6)
        c = rng.standard_normal((2, 3, 9, 8))
        assert grad_check(lambda z: (pad_reflect(z, 2, 1) * Tensor(c)).mean(), x) < 1e-6

    def test_pad_reflect_asymmetric(self, rng):
        x = _t(rng, 2, 3, 5, 6)
        c = rng.standard_normal((2, 3, 8, 9))
        err = grad_check(lambda z: (pad_reflect(z, (1, 2), (0, 3)) * Tensor(c)).mean(), x)
        assert err < 1e-6

    def test_avgpool(self, rng):
        x = _t(rng, 2, 3, 8, 8)
        c = rng.standard_normal((2, 3, 4, 4))
        assert grad_check(lambda z: (avgpool2d(z, 2) * Tensor(c)).sum(), x) < 1e-6

    def test_upsample2x(self, rng):
        x = _t(rng, 2, 3, 4, 5)
        c = rng.standard_normal((2, 3, 8, 10))
        assert grad_check(lambda z: (upsample2x(z) * Tensor(c)).sum(), x) < 1e-6

    def test_activation(self, rng):
        x = _t(rng, 3, 4)
        assert grad_check(lambda z: activation(z).sum(), x) < 1e-6

    def test_grad_check_params_multi_leaf(self, rng):
        a = _t(rng, 3, 3)
        b = _t(rng, 3)
        c = rng.standard_normal((3, 3))

        def f():
            return ((a + b) * Tensor(c)).abs().mean()

        assert grad_check_params(f, [a, b]) < 1e-6


class TestForwardSemantics:
    def test_conv2d_matches_direct_sum(self, rng):
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), None, padding="valid").data
        # cross-correlation by summation at one arbitrary output position
        expect = np.sum(x[0, :, 1:4, 2:5] * w[1])
        np.testing.assert_allclose(out[0, 1, 1, 2], expect, rtol=1e-12)

    def test_conv2d_same_reflect_shape(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 7, 9)))
        w = Tensor(rng.standard_normal((4, 3, 5, 5)))
        assert conv2d(x, w, None).shape == (2, 4, 7, 9)

    def test_conv2d_rejects_even_kernel(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 4, 4)))
        w = Tensor(rng.standard_normal((1, 1, 2, 2)))
        with pytest.raises(ValueError):
            conv2d(x, w, None)

    def test_conv2d_rejects_bad_stride(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 5, 4)))
        w = Tensor(rng.standard_normal((1, 1, 3, 3)))
        with pytest.raises(ValueError):
            conv2d(x, w, None, stride=2)

    def test_depthwise_matches_grouped_sum(self, rng):
        x = rng.standard_normal((1, 3, 5, 5))
        w = rng.standard_normal((3, 1, 3, 3))
        out = depthwise_conv2d(Tensor(x), Tensor(w), None).data
        pad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="reflect")
        expect = np.sum(pad[0, 2, 2:5, 1:4] * w[2, 0])
        np.testing.assert_allclose(out[0, 2, 2, 1], expect, rtol=1e-12)

    def test_upsample2x_frozen_example(self):
        x = Tensor(np.array([[[[1.0, 3.0]]]]))
        out = upsample2x(x).data
        np.testing.assert_allclose(out[0, 0, 0], [1.0, 1.5, 2.5, 3.0])
        assert out.shape == (1, 1, 2, 4)

    def test_avgpool_constant(self):
        x = Tensor(np.full((1, 1, 4, 4), 5.0))
        np.testing.assert_allclose(avgpool2d(x, 4).data, [[[[5.0]]]])

    def test_softmax_rows_sum_to_one(self, rng):
        out = softmax_rows(Tensor(rng.standard_normal((6, 9)) * 4)).data
        np.testing.assert_allclose(out.sum(axis=1), np.ones(6), atol=1e-12)

    def test_transpose(self, rng):
        x = rng.standard_normal((3, 5))
        np.testing.assert_array_equal(transpose(Tensor(x)).data, x.T)

    def test_activation_fixed_points(self):
        out = activation(Tensor(np.array([0.0, 50.0, -50.0]))).data
        half_ln2 = 0.5 * np.log(2.0)
        assert abs(out[0]) < 1e-12                    # f(0) = 0
        assert abs(out[1] - (50.0 - half_ln2)) < 1e-8  # unit slope, -ln2/2 offset
        assert abs(out[2] - (-half_ln2)) < 1e-8        # saturates at -ln2/2

    def test_activation_monotone(self):
        xs = np.linspace(-6, 6, 401)
        ys = activation(Tensor(xs)).data
        assert np.all(np.diff(ys) > 0)
