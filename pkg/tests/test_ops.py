import numpy as np
import pytest

from mose import ops
from mose.numerics import Rng

from conftest import finite_diff_grad


def _scalarize(y, dy):
    return float((y * dy).sum())


class TestLinear:
    def test_grads(self):
        rng = Rng(0)
        x = rng.child("x").normal((3, 5))
        w = rng.child("w").normal((5, 4))
        b = rng.child("b").normal((4,))
        dy = rng.child("dy").normal((3, 4))
        y, cache = ops.linear_forward(x, w, b)
        dx, dw, db = ops.linear_backward(dy, cache)
        np.testing.assert_allclose(
            dx, finite_diff_grad(lambda: _scalarize(ops.linear_forward(x, w, b)[0], dy), x), atol=1e-8)
        np.testing.assert_allclose(
            dw, finite_diff_grad(lambda: _scalarize(ops.linear_forward(x, w, b)[0], dy), w), atol=1e-8)
        np.testing.assert_allclose(
            db, finite_diff_grad(lambda: _scalarize(ops.linear_forward(x, w, b)[0], dy), b), atol=1e-8)


class TestConv2d:
    @pytest.mark.parametrize("pad", [0, 1])
    def test_grads(self, pad):
        rng = Rng(1)
        x = rng.child("x").normal((2, 3, 6, 7))
        w = rng.child("w").normal((4, 3, 3, 3))
        b = rng.child("b").normal((4,))
        y, cache = ops.conv2d_forward(x, w, b, pad=pad)
        dy = rng.child("dy").normal(y.shape)
        dx, dw, db = ops.conv2d_backward(dy, cache)
        np.testing.assert_allclose(
            dx, finite_diff_grad(lambda: _scalarize(ops.conv2d_forward(x, w, b, pad)[0], dy), x), atol=1e-7)
        np.testing.assert_allclose(
            dw, finite_diff_grad(lambda: _scalarize(ops.conv2d_forward(x, w, b, pad)[0], dy), w), atol=1e-7)
        np.testing.assert_allclose(
            db, finite_diff_grad(lambda: _scalarize(ops.conv2d_forward(x, w, b, pad)[0], dy), b), atol=1e-7)

    def test_identity_kernel(self):
        x = Rng(2).normal((1, 2, 5, 5))
        w = np.zeros((2, 2, 3, 3))
        w[0, 0, 1, 1] = 1.0
        w[1, 1, 1, 1] = 1.0
        y, _ = ops.conv2d_forward(x, w, None, pad=1)
        np.testing.assert_allclose(y, x, atol=1e-12)


class TestNormsAndActivations:
    def test_layernorm_grads(self):
        rng = Rng(3)
        x = rng.child("x").normal((4, 7))
        g = rng.child("g").normal((7,))
        b = rng.child("b").normal((7,))
        y, cache = ops.layernorm_forward(x, g, b)
        dy = rng.child("dy").normal(y.shape)
        dx, dg, db = ops.layernorm_backward(dy, cache)
        np.testing.assert_allclose(
            dx, finite_diff_grad(lambda: _scalarize(ops.layernorm_forward(x, g, b)[0], dy), x), atol=1e-7)
        np.testing.assert_allclose(
            dg, finite_diff_grad(lambda: _scalarize(ops.layernorm_forward(x, g, b)[0], dy), g), atol=1e-7)
        np.testing.assert_allclose(
            db, finite_diff_grad(lambda: _scalarize(ops.layernorm_forward(x, g, b)[0], dy), b), atol=1e-7)

    @pytest.mark.parametrize("fwd,bwd", [
        (ops.gelu_forward, ops.gelu_backward),
        (ops.softmax_forward, ops.softmax_backward),
        (ops.l2norm_forward, ops.l2norm_backward),
    ])
    def test_unary_grads(self, fwd, bwd):
        rng = Rng(4)
        x = rng.child("x").normal((3, 6))
        y, cache = fwd(x)
        dy = rng.child("dy").normal(y.shape)
        dx = bwd(dy, cache)
        np.testing.assert_allclose(
            dx, finite_diff_grad(lambda: _scalarize(fwd(x)[0], dy), x), atol=1e-7)

    def test_softmax_rows_sum_to_one(self):
        x = Rng(5).normal((10, 9)) * 10
        y, _ = ops.softmax_forward(x)
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)

    def test_gelu_matches_definition(self):
        from scipy.stats import norm
        x = np.linspace(-4, 4, 33)
        y, _ = ops.gelu_forward(x)
        np.testing.assert_allclose(y, x * norm.cdf(x), atol=1e-12)


class TestPixelShuffle:
    def test_rearrangement_example(self):
        x = np.arange(4, dtype=np.float64).reshape(1, 4, 1, 1)
        y = ops.pixel_shuffle(x, 2)
        assert y.shape == (1, 1, 2, 2)
        np.testing.assert_array_equal(y[0, 0], [[0, 1], [2, 3]])

    def test_multiset_preserved_and_inverse(self):
        x = Rng(6).normal((2, 18, 3, 5))
        y = ops.pixel_shuffle(x, 3)
        assert sorted(y.ravel()) == sorted(x.ravel())
        np.testing.assert_array_equal(ops.pixel_unshuffle(y, 3), x)


class TestPadCrop:
    def test_reflect_pad_values(self):
        x = np.arange(4, dtype=np.float64)[None, None, None, :]  # row 0..3
        y, _ = ops.pad_br_reflect(x, 0, 3)
        np.testing.assert_array_equal(y[0, 0, 0], [0, 1, 2, 3, 2, 1, 0])

    def test_pad_single_pixel_axis(self):
        x = np.ones((1, 1, 1, 1))
        y, _ = ops.pad_br_reflect(x, 7, 7)
        assert y.shape == (1, 1, 8, 8)
        assert np.all(y == 1.0)

    def test_pad_backward_is_adjoint(self):
        rng = Rng(7)
        x = rng.child("x").normal((2, 3, 5, 6))
        y, cache = ops.pad_br_reflect(x, 3, 2)
        dy = rng.child("dy").normal(y.shape)
        dx = ops.pad_br_reflect_backward(dy, cache)
        np.testing.assert_allclose(
            dx, finite_diff_grad(lambda: _scalarize(ops.pad_br_reflect(x, 3, 2)[0], dy), x), atol=1e-7)

    def test_crop_backward_zero_fills(self):
        dy = np.ones((1, 2, 2, 3))
        dx = ops.crop_br_backward(dy, 4, 5)
        assert dx.shape == (1, 2, 4, 5)
        assert dx.sum() == dy.sum()
        assert np.all(dx[..., 2:, :] == 0) and np.all(dx[..., :, 3:] == 0)
