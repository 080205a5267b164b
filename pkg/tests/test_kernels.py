"""The compiled kernels and the numpy fallback must agree."""
import numpy as np
import pytest

from sinuscl import kernels
from sinuscl import _fallback

compiled = pytest.importorskip("sinuscl._kernels")


def _cols_shape(x_shape, k, stride, padding):
    B, C, D, H, W = x_shape
    o = [(n + 2 * padding - k) // stride + 1 for n in (D, H, W)]
    return (B * o[0] * o[1] * o[2], C * k ** 3)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1), (2, 2, 3)])
def test_im2col_backends_agree(dtype, stride, padding, k):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 7, 6, 5)).astype(dtype)
    shape = _cols_shape(x.shape, k, stride, padding)
    a, b = np.empty(shape, dtype), np.empty(shape, dtype)
    compiled.im2col3d(x, a, k, k, k, stride, padding)
    _fallback.im2col3d(x, b, k, k, k, stride, padding)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (2, 0)])
def test_col2im_backends_agree_and_are_adjoint(stride, padding):
    rng = np.random.default_rng(1)
    shape_x = (2, 2, 6, 5, 7)
    shape = _cols_shape(shape_x, 3, stride, padding)
    cols = rng.normal(size=shape)
    a, b = np.zeros(shape_x), np.zeros(shape_x)
    compiled.col2im3d(cols, a, 3, 3, 3, stride, padding)
    _fallback.col2im3d(cols, b, 3, 3, 3, stride, padding)
    np.testing.assert_allclose(a, b, atol=1e-12)
    # <im2col(x), c> == <x, col2im(c)>
    x = rng.normal(size=shape_x)
    xc = np.empty(shape)
    compiled.im2col3d(x, xc, 3, 3, 3, stride, padding)
    assert np.isclose(np.sum(xc * cols), np.sum(x * a), rtol=1e-12)


def test_affine_sampler_backends_agree():
    rng = np.random.default_rng(2)
    vol = rng.normal(size=(9, 8, 10))
    mat = np.hstack([np.eye(3) * 0.9 + rng.normal(scale=0.05, size=(3, 3)), rng.normal(size=(3, 1))])
    a, b = np.empty((9, 8, 10)), np.empty((9, 8, 10))
    compiled.affine_sample3d(vol, mat, a, -1.0, 1e-6)
    _fallback.affine_sample3d(vol, mat, b, -1.0, 1e-6)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_identity_affine_is_exact():
    vol = np.random.default_rng(3).normal(size=(5, 6, 7))
    out = np.empty_like(vol)
    kernels.affine_sample3d(vol, np.hstack([np.eye(3), np.zeros((3, 1))]), out, 0.0)
    np.testing.assert_array_equal(out, vol)


def test_get_backend():
    assert kernels.get_backend("python") is _fallback
    assert kernels.get_backend("compiled") is compiled
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")
