import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qnet import tensor as T
from qnet.errors import DimensionError

from oracles import conv2d_loops, depthwise_loops, matmul_loops, rel_err


def test_conv_identity_kernel():
    x = np.ones((1, 3, 3, 1), np.float32)
    y = T.conv2d(x, np.ones((1, 1, 1, 1), np.float32), stride=1, padding="valid")
    assert y.shape == (1, 3, 3, 1) and np.all(y == 1)


def test_conv_same_stride2_shape():
    x = np.zeros((1, 224, 224, 3), np.float32)
    assert T.conv2d(x, np.zeros((3, 3, 3, 32), np.float32), stride=2, padding="same").shape == (1, 112, 112, 32)


def test_conv_matches_loops(rng):
    x = rng.standard_normal((1, 5, 5, 2)).astype(np.float32)
    k = rng.standard_normal((3, 3, 2, 4)).astype(np.float32)
    assert rel_err(T.conv2d(x, k, padding="valid"), conv2d_loops(x, k)) <= 1e-5


@pytest.mark.parametrize("stride,padding,size", [(1, "same", 6), (2, "same", 7), (2, "valid", 7), (3, "same", 8)])
def test_conv_padding_variants(rng, stride, padding, size):
    x = rng.standard_normal((2, size, size + 1, 3)).astype(np.float32)
    k = rng.standard_normal((3, 2, 3, 5)).astype(np.float32)
    b = rng.standard_normal(5).astype(np.float32)
    got = T.conv2d(x, k, b, stride=stride, padding=padding)
    assert rel_err(got, conv2d_loops(x, k, b, stride, padding)) <= 1e-5


def test_pointwise_fast_path_with_stride(rng):
    x = rng.standard_normal((1, 7, 7, 4)).astype(np.float32)
    k = rng.standard_normal((1, 1, 4, 3)).astype(np.float32)
    assert rel_err(T.conv2d(x, k, stride=2, padding="same"), conv2d_loops(x, k, None, 2, "same")) <= 1e-5


def test_conv_errors():
    with pytest.raises(DimensionError, match=r"\(1, 4, 4, 2\).*\(3, 3, 3, 1\)"):
        T.conv2d(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 3, 1)))
    with pytest.raises(DimensionError):
        T.conv2d(np.zeros((1, 2, 2, 1)), np.zeros((3, 3, 1, 1)), padding="valid")


def test_depthwise_center_of_ones():
    y = T.depthwise_conv2d(np.ones((1, 3, 3, 2), np.float32), np.ones((3, 3, 2, 1), np.float32))
    assert np.all(y[0, 1, 1] == 9)
    assert y[0, 0, 0, 0] == 4


def test_depthwise_matches_loops(rng):
    x = rng.standard_normal((1, 7, 7, 3)).astype(np.float32)
    k = rng.standard_normal((3, 3, 3, 1)).astype(np.float32)
    got = T.depthwise_conv2d(x, k, stride=2, padding="same")
    assert rel_err(got, depthwise_loops(x, k, None, 2, "same")) <= 1e-5


def test_depthwise_equals_conv_single_channel(rng):
    # integer values keep every partial sum exact, so summation order cannot matter
    x = rng.integers(-8, 8, (2, 6, 6, 1)).astype(np.float32)
    k = rng.integers(-4, 4, (3, 3, 1, 1)).astype(np.float32)
    np.testing.assert_array_equal(T.depthwise_conv2d(x, k), T.conv2d(x, k))


def test_dense_examples(rng):
    x = rng.standard_normal((2, 3)).astype(np.float32)
    np.testing.assert_array_equal(T.dense(x, np.eye(3, dtype=np.float32), np.zeros(3, np.float32)), x)
    y = T.dense(np.array([[1, 2]], np.float32), np.eye(2, dtype=np.float32), np.array([10, 20], np.float32))
    np.testing.assert_array_equal(y, [[11, 22]])
    a = rng.standard_normal((4, 8)).astype(np.float32)
    b = rng.standard_normal((8, 5)).astype(np.float32)
    assert rel_err(T.dense(a, b), matmul_loops(a, b)) <= 1e-6
    with pytest.raises(DimensionError):
        T.dense(a, b.T)


def test_batchnorm_examples(rng):
    x = rng.standard_normal((1, 2, 2, 3)).astype(np.float32)
    one, zero = np.ones(3), np.zeros(3)
    np.testing.assert_array_equal(T.batch_norm_inference(x, T.BatchNormParams(zero, one, one, zero, 0.0)), x)
    p = T.BatchNormParams(np.array([2.0]), np.array([4.0]), np.array([3.0]), np.array([1.0]), 0.0)
    assert T.batch_norm_inference(np.full((1, 1, 1, 1), 4.0, np.float32), p).item() == pytest.approx(4.0)
    with pytest.raises(DimensionError):
        T.BatchNormParams(zero, one, np.ones(2), zero)


def test_batchnorm_matches_scalar_loop(rng):
    x = rng.standard_normal((2, 3, 3, 4)).astype(np.float32)
    mean, var = rng.standard_normal(4), rng.uniform(0.1, 2, 4)
    gamma, beta = rng.standard_normal(4), rng.standard_normal(4)
    y = T.batch_norm_inference(x, T.BatchNormParams(mean, var, gamma, beta, 1e-3))
    ref = np.empty_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        c = idx[-1]
        ref[idx] = gamma[c] * (x[idx] - mean[c]) / math.sqrt(var[c] + 1e-3) + beta[c]
    assert rel_err(y, ref) <= 1e-6


def test_activations():
    np.testing.assert_array_equal(T.activation(np.array([-1, 0, 2.5], np.float32), "relu"), [0, 0, 2.5])
    assert T.activation(np.array([7.2], np.float32), "relu6")[0] == 6.0
    np.testing.assert_allclose(T.softmax(np.zeros((1, 3), np.float32)), [[1 / 3] * 3], rtol=1e-7)
    big = T.softmax(np.array([[1000.0, 0.0]], np.float32))
    assert np.isfinite(big).all()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_is_distribution(vals):
    p = T.softmax(np.array([vals], np.float64))
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-12


def test_pool_examples(rng):
    x = np.array([1, 2, 3, 4], np.float32).reshape(1, 2, 2, 1)
    assert T.pool(x, "global_avg")[0, 0] == 2.5
    assert T.pool(x, "max", 2, 2)[0, 0, 0, 0] == 4
    r = rng.standard_normal((1, 6, 6, 3)).astype(np.float32)
    ref = [sum(float(r[0, i, j, c]) for i in range(6) for j in range(6)) / 36 for c in range(3)]
    assert rel_err(T.pool(r, "global_avg")[0], ref) <= 1e-6
    with pytest.raises(DimensionError):
        T.pool(x, "max", 3)


def test_maxpool_same_ignores_padding():
    x = -np.ones((1, 3, 3, 1), np.float32)
    y = T.pool(x, "max", 3, 2, padding="same")
    assert y.shape == (1, 2, 2, 1) and np.all(y == -1)


def test_residual_add():
    a = np.array([[1.0, 2.0]], np.float32)
    np.testing.assert_array_equal(T.residual_add(a, np.zeros_like(a)), a)
    np.testing.assert_array_equal(T.residual_add(a, np.array([[3.0, 4.0]], np.float32)), [[4, 6]])
    with pytest.raises(DimensionError):
        T.residual_add(a, np.zeros((1, 3)))


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 9), k=st.integers(1, 4), s=st.integers(1, 3))
def test_same_output_size_is_ceil(h, k, s):
    assert T.conv_output_size(h, k, s, "same") == math.ceil(h / s)
    top, bottom = T.same_pads(h, k, s)
    assert bottom - top in (0, 1)
