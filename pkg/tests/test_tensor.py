import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from v2ifuse.errors import ConfigurationError, ContractError, DimensionError, TrainingError
from v2ifuse.tensor import (Parameter, Tensor, backward, bce_with_logits, bilinear_sample, concat, conv2d,
                            gaussian_filter2d, gaussian_kernel, linear, log, matmul, maxpool2d, mean, no_grad,
                            relu, reshape, sgd_step, sigmoid, smooth_l1, softmax, transpose, tsum, zero_grad)


# ---------------------------------------------------------------- examples

def test_linear_example():
    out = linear(np.array([[1.0, 1.0]]), np.array([[2.0], [3.0]]), np.array([1.0]))
    assert out.data.tolist() == [[6.0]]


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(1, 3\).*\(2, 1\)"):
        linear(np.ones((1, 3)), np.ones((2, 1)))


def test_softmax_example():
    out = softmax(np.array([0.0, math.log(3.0)]))
    np.testing.assert_allclose(out.data, [0.25, 0.75], rtol=0, atol=1e-15)


def test_softmax_is_shift_invariant_for_large_inputs():
    out = softmax(np.array([1000.0, 1000.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5])


def test_maxpool_example():
    out = maxpool2d(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2, 2)
    assert out.data.ravel().tolist() == [4.0]


def test_maxpool_gradient_goes_to_argmax():
    x = Parameter(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    backward(tsum(maxpool2d(x, 2, 2)))
    assert x.grad.ravel().tolist() == [0.0, 0.0, 0.0, 1.0]


def test_bilinear_midpoint_is_corner_mean():
    F = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    out = bilinear_sample(F, np.array([[0.5, 0.5]]))
    assert out.data[0, 0] == pytest.approx(2.5)


def test_bilinear_far_outside_is_zero():
    F = np.random.default_rng(0).normal(size=(3, 4, 4))
    out = bilinear_sample(F, np.array([[-10.0, -10.0]]))
    assert np.all(out.data == 0.0)


def test_bilinear_integer_points_hit_cells():
    F = np.arange(12.0).reshape(1, 3, 4)
    out = bilinear_sample(F, np.array([[2.0, 1.0], [0.0, 2.0]]))
    assert out.data.ravel().tolist() == [6.0, 8.0]


def test_sgd_example():
    p = Parameter(np.array([1.0]))
    p.grad = np.array([2.0])
    sgd_step([p], 0.1)
    assert p.data[0] == pytest.approx(0.8)
    assert p.grad[0] == 0.0


def test_sgd_rejects_non_finite_gradient():
    p = Parameter(np.array([1.0]), name="w")
    p.grad = np.array([np.nan])
    with pytest.raises(TrainingError, match="w"):
        sgd_step([p], 0.1)


def test_sgd_leaves_frozen_params():
    p = Parameter(np.array([1.0]), trainable=False)
    p.grad = np.array([5.0])
    sgd_step([p], 0.1)
    assert p.data[0] == 1.0


def test_backward_of_sum_wx():
    x = np.array([1.0, -2.0, 3.0])
    W = Parameter(np.zeros((3, 2)))
    backward(tsum(matmul(Tensor(x[None]), W)))
    np.testing.assert_array_equal(W.grad, np.repeat(x[:, None], 2, axis=1))


def test_unused_parameter_has_zero_grad():
    a, b = Parameter(np.ones(2)), Parameter(np.ones(2))
    backward(tsum(a * 2.0))
    assert np.all(b.grad == 0.0)


def test_backward_requires_scalar():
    a = Parameter(np.ones(2))
    with pytest.raises(ContractError):
        backward(a * 2.0)


def test_shared_subexpression_accumulates():
    a = Parameter(np.array([3.0]))
    y = a * a + a
    backward(tsum(y))
    assert a.grad[0] == pytest.approx(7.0)


def test_no_grad_records_nothing():
    a = Parameter(np.ones(3))
    with no_grad():
        y = a * 2.0
    assert not y.requires_grad and y._parents == ()
    assert (a * 2.0).requires_grad


def test_zero_grad():
    p = Parameter(np.ones(2))
    p.grad = np.ones(2)
    zero_grad([p])
    assert np.all(p.grad == 0)


def test_gaussian_kernel_sums_to_one_and_rejects_even_size():
    k = gaussian_kernel(1.0, 5)
    assert k.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(k, k.T)
    with pytest.raises(ConfigurationError):
        gaussian_kernel(1.0, 4)


def test_gaussian_sigma_zero_is_identity():
    x = np.random.default_rng(1).normal(size=(2, 5, 5))
    np.testing.assert_array_equal(gaussian_filter2d(x, 0.0, 3).data, x)


def test_gaussian_filter_spreads_an_impulse():
    x = np.zeros((1, 5, 5))
    x[0, 2, 2] = 1.0
    out = gaussian_filter2d(x, 1.0, 3).data[0]
    np.testing.assert_allclose(out[1:4, 1:4], gaussian_kernel(1.0, 3))


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 6, 5))
    W = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = conv2d(x, W, b, stride=1, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 6, 5))
    for o in range(3):
        for i in range(6):
            for j in range(5):
                ref[o, i, j] = np.sum(xp[:, i:i + 3, j:j + 3] * W[o]) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv2d_shape_errors():
    with pytest.raises(DimensionError):
        conv2d(np.ones((2, 4, 4)), np.ones((1, 3, 3, 3)))


def test_bce_empty_scene_is_log2():
    out = mean(bce_with_logits(np.zeros(10), np.zeros(10), pos_weight=20.0))
    assert out.data == pytest.approx(math.log(2.0))


def test_bce_is_stable_for_extreme_logits():
    out = bce_with_logits(np.array([-800.0, 800.0]), np.array([0.0, 1.0]))
    assert np.all(np.isfinite(out.data)) and np.all(out.data < 1e-12)


def test_smooth_l1_piecewise():
    out = smooth_l1(np.array([0.5, -2.0])).data
    np.testing.assert_allclose(out, [0.125, 1.5])


def test_sigmoid_and_log_roundtrip():
    x = np.array([-3.0, 0.0, 2.0])
    np.testing.assert_allclose(log(sigmoid(x)).data, -np.log1p(np.exp(-x)))


def test_reshape_transpose_concat_shapes():
    x = Tensor(np.arange(6.0))
    y = transpose(reshape(x, (2, 3)), (1, 0))
    assert y.shape == (3, 2)
    assert concat([y, y], axis=1).shape == (3, 4)


def test_relu_gradient_is_zero_below_zero():
    x = Parameter(np.array([-1.0, 2.0]))
    backward(tsum(relu(x)))
    assert x.grad.tolist() == [0.0, 1.0]


# -------------------------------------------------------------- properties

@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(x):
    p = softmax(x).data
    assert p.sum() == pytest.approx(1.0)
    assert np.all(p >= 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 3))
def test_maxpool_matches_brute_force(h2, w2, c):
    rng = np.random.default_rng(h2 * 100 + w2 * 10 + c)
    x = rng.normal(size=(c, 2 * h2, 2 * w2))
    out = maxpool2d(x, 2, 2).data
    ref = np.array([[[x[k, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max() for j in range(w2)] for i in range(h2)]
                    for k in range(c)])
    np.testing.assert_array_equal(out, ref)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 6), st.floats(-3, 6))
def test_bilinear_matches_scalar_formula(px, py):
    F = np.random.default_rng(3).normal(size=(1, 4, 5))

    def at(r, c):
        return F[0, r, c] if 0 <= r < 4 and 0 <= c < 5 else 0.0

    x0, y0 = math.floor(px), math.floor(py)
    fx, fy = px - x0, py - y0
    ref = ((1 - fx) * (1 - fy) * at(y0, x0) + fx * (1 - fy) * at(y0, x0 + 1)
           + (1 - fx) * fy * at(y0 + 1, x0) + fx * fy * at(y0 + 1, x0 + 1))
    out = bilinear_sample(F, np.array([[px, py]])).data[0, 0]
    assert out == pytest.approx(ref, abs=1e-12)
