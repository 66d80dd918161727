import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_conv2d, naive_im2col
from wastecnn.errors import ShapeError
from wastecnn.tensor import col2im, conv_out_extent, elementwise, im2col, matmul, tensor_new


def test_tensor_new_fill_and_data():
    np.testing.assert_array_equal(tensor_new([2, 2], fill=0), [[0, 0], [0, 0]])
    v = tensor_new([3], data=[1, 2, 3])
    assert v.dtype == np.float64
    np.testing.assert_array_equal(v, [1, 2, 3])


def test_tensor_new_length_mismatch():
    with pytest.raises(ShapeError, match="expected 4 values, got 3"):
        tensor_new([2, 2], data=[1, 2, 3])


@pytest.mark.parametrize("shape", [[0, 2], [1, 2, 3, 4, 5], []])
def test_tensor_new_rejects_bad_shapes(shape):
    with pytest.raises(ShapeError):
        tensor_new(shape, fill=1.0)


def test_matmul_examples():
    a = np.array([[1.0, 2], [3, 4]])
    b = np.array([[5.0, 6], [7, 8]])
    np.testing.assert_array_equal(matmul(np.eye(2), b), b)
    np.testing.assert_array_equal(matmul(a, np.zeros((2, 2))), np.zeros((2, 2)))
    np.testing.assert_array_equal(matmul(a, b), [[19, 22], [43, 50]])
    with pytest.raises(ShapeError):
        matmul(a, np.ones((3, 2)))


def test_matmul_identity_exact(rng):
    a = rng.standard_normal((5, 7))
    assert np.array_equal(matmul(np.eye(5), a), a)
    assert np.array_equal(matmul(a, np.eye(7)), a)


def test_matmul_bit_reproducible(rng):
    a, b = rng.standard_normal((40, 30)), rng.standard_normal((30, 20))
    assert matmul(a, b).tobytes() == matmul(a.copy(), b.copy()).tobytes()


def test_elementwise():
    np.testing.assert_array_equal(elementwise("add", np.array([1.0, 2]), np.array([3.0, 4])), [4, 6])
    np.testing.assert_array_equal(elementwise("scale", np.array([1.0, 2]), 0), [0, 0])
    np.testing.assert_array_equal(elementwise("mul", np.array([2.0, 3]), np.array([4.0, 5])), [8, 15])
    np.testing.assert_array_equal(elementwise("sub", np.array([2.0, 3]), np.array([4.0, 5])), [-2, -2])
    with pytest.raises(ShapeError):
        elementwise("add", np.ones(2), np.ones(3))


@pytest.mark.parametrize("args,expected", [((224, 3, 1, 1), 224), ((224, 2, 2, 0), 112),
                                           ((5, 5, 1, 0), 1), ((224, 7, 2, 3), 112),
                                           ((112, 3, 2, 1), 56)])
def test_conv_out_extent(args, expected):
    assert conv_out_extent(*args) == expected


def test_conv_out_extent_kernel_too_large():
    with pytest.raises(ShapeError, match="kernel larger than padded input"):
        conv_out_extent(2, 5, 1, 1)


def test_im2col_examples():
    x = np.array([1.0, 2, 3, 4]).reshape(1, 1, 2, 2)
    np.testing.assert_array_equal(im2col(x, 1, 1, 0), [[1], [2], [3], [4]])
    np.testing.assert_array_equal(im2col(x, 2, 1, 0), [[1, 2, 3, 4]])
    x3 = np.arange(9.0).reshape(1, 1, 3, 3)
    cols = im2col(x3, 2, 1, 0)
    assert cols.shape == (4, 4)
    np.testing.assert_array_equal(cols, naive_im2col(x3, 2, 1, 0))


def test_col2im_counts_patch_multiplicity():
    x = np.zeros((1, 1, 3, 3))
    counts = col2im(np.ones_like(im2col(x, 2, 1, 0)), x.shape, 2, 1, 0)
    np.testing.assert_array_equal(counts[0, 0], [[1, 2, 1], [2, 4, 2], [1, 2, 1]])


geometries = st.tuples(
    st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3),
    st.integers(1, 2), st.integers(0, 2), st.integers(3, 7), st.integers(3, 7))


@settings(max_examples=30, deadline=None)
@given(geometries, st.integers(0, 2 ** 32 - 1))
def test_im2col_matches_reference_and_adjoint(geom, seed):
    b, c, oc, k, s, p, h, w = geom
    if h + 2 * p < k or w + 2 * p < k:
        return
    r = np.random.default_rng(seed)
    x = r.standard_normal((b, c, h, w))
    cols = im2col(x, k, s, p)
    np.testing.assert_array_equal(cols, naive_im2col(x, k, s, p))
    # <im2col(x), g> == <x, col2im(g)>
    g = r.standard_normal(cols.shape)
    lhs = float((cols * g).sum())
    rhs = float((x * col2im(g, x.shape, k, s, p)).sum())
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))
    # lowering + matmul equals the direct loop convolution
    weight = r.standard_normal((oc, c, k, k))
    out = (cols @ weight.reshape(oc, -1).T).reshape(b, -1, oc)
    ref = naive_conv2d(x, weight, None, s, p).reshape(b, oc, -1).transpose(0, 2, 1)
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_kernels_pure(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    assert im2col(x, 3, 1, 1).tobytes() == im2col(x, 3, 1, 1).tobytes()
