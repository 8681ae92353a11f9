"""Grouped feature fusion against its closed-form Dirac oracle.

With every convolution set to the identity (Dirac taps), the cascade
telescopes into prefix sums of the summed input's channel groups plus
the summed input itself.  That expected value is computed here from
first principles, independent of the module.
"""

import numpy as np
import pytest

from mcms.gff import GffParams, gff_forward
from mcms.tensor import Tensor, grad_check_params


def _dirac(p: GffParams) -> None:
    p.shared_w.data[:] = 0.0
    p.shared_b.data[:] = 0.0
    for c in range(p.channels):
        p.shared_w.data[c, c, 1, 1] = 1.0
    for w, b in p.group:
        w.data[:] = 0.0
        b.data[:] = 0.0
        k = w.data.shape[2]
        for c in range(w.data.shape[0]):
            w.data[c, c, k // 2, k // 2] = 1.0


def _prefix_oracle(i1: np.ndarray, i2: np.ndarray) -> np.ndarray:
    m = i1 + i2
    parts = np.split(m, 4, axis=1)
    sums = np.concatenate(np.cumsum(parts, axis=0), axis=1)
    return sums + m


class TestDiracOracle:
    def test_matches_prefix_sums(self, rng):
        p = GffParams(8, rng, np.float64)
        _dirac(p)
        for _ in range(50):
            i1 = rng.standard_normal((1, 8, 7, 9))
            i2 = rng.standard_normal((1, 8, 7, 9))
            out = gff_forward(Tensor(i1), Tensor(i2), p).data
            np.testing.assert_allclose(out, _prefix_oracle(i1, i2), atol=1e-12)

    def test_batched(self, rng):
        p = GffParams(8, rng, np.float64)
        _dirac(p)
        i1 = rng.standard_normal((3, 8, 6, 6))
        i2 = rng.standard_normal((3, 8, 6, 6))
        out = gff_forward(Tensor(i1), Tensor(i2), p).data
        np.testing.assert_allclose(out, _prefix_oracle(i1, i2), atol=1e-12)


class TestProperties:
    def test_input_order_symmetry(self, rng):
        p = GffParams(16, rng, np.float64)
        i1 = Tensor(rng.standard_normal((2, 16, 8, 8)))
        i2 = Tensor(rng.standard_normal((2, 16, 8, 8)))
        a = gff_forward(i1, i2, p).data
        b = gff_forward(i2, i1, p).data
        np.testing.assert_array_equal(a, b)

    def test_shape_preserved(self, rng):
        p = GffParams(8, rng)
        x = Tensor(rng.standard_normal((2, 8, 12, 10)).astype(np.float32))
        assert gff_forward(x, x, p).shape == (2, 8, 12, 10)

    def test_rejects_indivisible_channels(self, rng):
        with pytest.raises(ValueError):
            GffParams(6, rng)

    def test_kernel_sizes(self, rng):
        p = GffParams(8, rng)
        assert [w.data.shape[2] for w, _ in p.group] == [1, 3, 5, 7]

    def test_param_names_unique(self, rng):
        p = GffParams(8, rng)
        names = [n for n, _ in p.named_params("gff")]
        assert len(names) == len(set(names)) == 10

    def test_gradients_reach_all_params(self, rng):
        p = GffParams(8, rng, np.float64)
        i1 = Tensor(rng.standard_normal((1, 8, 8, 8)))
        i2 = Tensor(rng.standard_normal((1, 8, 8, 8)))
        tensors = [t for _, t in p.named_params("g")]
        err = grad_check_params(lambda: gff_forward(i1, i2, p).abs().mean(), tensors)
        assert err < 1e-5
