"""Kernel evaluation, matrix assembly, and hyperparameter derivative tests."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpsgd import (
    HyperParams,
    KernelSpec,
    MultiKernel,
    eval_kernel,
    kernel_matrix,
    kernel_matrix_grad,
    marginal_covariance,
    sym_eigenvalues,
)
from gpsgd.kernels import KernelFamily, base_lengthscale_grad, cross_kernel_matrix

RNG = np.random.default_rng(1234)


def test_rbf_zero_distance_is_one():
    spec = KernelSpec.rbf(0.5)
    assert eval_kernel(spec, [0.3], [0.3]) == 1.0


def test_rbf_closed_form_value():
    # exp(-0.25 / (2 * 0.25)) = exp(-0.5)
    spec = KernelSpec.rbf(0.5)
    assert eval_kernel(spec, [0.0], [0.5]) == pytest.approx(math.exp(-0.5), rel=1e-12)


def test_matern_half_closed_form():
    # order 1/2 reduces to exp(-r/h)
    spec = KernelSpec.matern(0.5, 1.0)
    assert eval_kernel(spec, [0.0], [1.0]) == pytest.approx(math.exp(-1.0), rel=1e-12)


def test_matern_three_half_and_five_half_closed_forms():
    r, h = 0.7, 1.3
    k32 = eval_kernel(KernelSpec.matern(1.5, h), [0.0], [r])
    u = math.sqrt(3) * r / h
    assert k32 == pytest.approx((1 + u) * math.exp(-u), rel=1e-12)
    k52 = eval_kernel(KernelSpec.matern(2.5, h), [0.0], [r])
    u = math.sqrt(5) * r / h
    assert k52 == pytest.approx((1 + u + u * u / 3) * math.exp(-u), rel=1e-12)


def test_eval_kernel_rejects_bad_input():
    spec = KernelSpec.rbf((0.5, 0.5))
    with pytest.raises(ValueError):
        eval_kernel(spec, [0.0], [0.0, 1.0])
    with pytest.raises(ValueError):
        eval_kernel(spec, [np.nan, 0.0], [0.0, 0.0])


def test_spec_validation():
    with pytest.raises(ValueError):
        KernelSpec.rbf(0.0)
    with pytest.raises(ValueError):
        KernelSpec.matern(1.0, 1.0)  # only half-integer orders have closed forms
    with pytest.raises(ValueError):
        KernelSpec(KernelFamily.MATERN, (1.0, 1.0), 0.5)
    with pytest.raises(ValueError):
        KernelSpec(KernelFamily.RBF, (1.0,), 0.5)


def test_spec_config_round_trip():
    for spec in [KernelSpec.rbf((0.5, 2.0)), KernelSpec.matern(1.5, 0.8)]:
        assert KernelSpec.from_config(spec.to_config()) == spec
    with pytest.raises(ValueError):
        KernelSpec.from_config({"family": "rbf", "lengthscales": [1.0], "bogus": 1})


@given(
    st.sampled_from([KernelFamily.RBF, KernelFamily.MATERN]),
    st.floats(0.1, 5.0),
    st.lists(st.floats(-10, 10), min_size=1, max_size=4),
    st.lists(st.floats(-10, 10), min_size=1, max_size=4),
)
@settings(max_examples=80, deadline=None)
def test_eval_kernel_symmetric_and_in_range(family, scale, xs, ys):
    dim = min(len(xs), len(ys))
    x, y = np.array(xs[:dim]), np.array(ys[:dim])
    if family == KernelFamily.RBF:
        spec = KernelSpec.rbf((scale,) * dim)
    else:
        spec = KernelSpec.matern(1.5, scale)
    k_xy = eval_kernel(spec, x, y)
    assert k_xy == eval_kernel(spec, y, x)
    # strictly positive in exact arithmetic; extreme distances may underflow
    assert 0.0 <= k_xy <= 1.0
    if np.linalg.norm(x - y) < 10 * scale:
        assert k_xy > 0.0


@pytest.mark.parametrize("spec", [KernelSpec.rbf(0.7), KernelSpec.matern(2.5, 0.7)])
def test_eval_kernel_monotone_in_distance(spec):
    distances = np.linspace(0.0, 5.0, 40)
    values = [eval_kernel(spec, [0.0], [d]) for d in distances]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_kernel_matrix_single_point():
    assert np.array_equal(kernel_matrix(KernelSpec.rbf(0.5), np.array([[3.0]])), [[1.0]])


def test_kernel_matrix_two_points_closed_form():
    K = kernel_matrix(KernelSpec.rbf(0.5), np.array([[0.0], [0.5]]))
    e = math.exp(-0.5)
    assert np.allclose(K, [[1.0, e], [e, 1.0]], rtol=1e-12)


@pytest.mark.parametrize("spec", [KernelSpec.rbf((0.5, 1.5)), KernelSpec.matern(1.5, 1.0)])
def test_kernel_matrix_matches_brute_force(spec):
    X = RNG.normal(size=(7, 2))
    K = kernel_matrix(spec, X)
    for i in range(7):
        for j in range(7):
            assert K[i, j] == pytest.approx(eval_kernel(spec, X[i], X[j]), abs=1e-14)


def test_kernel_matrix_exactly_symmetric_unit_diagonal():
    X = RNG.normal(size=(40, 3)) * 5
    K = kernel_matrix(KernelSpec.rbf((0.5, 1.0, 2.0)), X)
    assert np.max(np.abs(K - K.T)) == 0.0
    assert np.all(np.diag(K) == 1.0)


def test_kernel_matrix_positive_semidefinite():
    for n in (16, 64, 256):
        X = RNG.normal(size=(n, 2)) * 3
        K = kernel_matrix(KernelSpec.rbf((0.8, 0.8)), X)
        lam = sym_eigenvalues(K).values
        assert lam.min() >= -1e-10 * n


def test_cross_kernel_matrix_consistent():
    spec = KernelSpec.rbf((0.5, 1.0))
    X = RNG.normal(size=(6, 2))
    assert np.allclose(cross_kernel_matrix(spec, X, X), kernel_matrix(spec, X), atol=1e-14)


def test_marginal_covariance_scalar():
    mk = MultiKernel.single(KernelSpec.rbf(0.5))
    K = marginal_covariance(mk, HyperParams((4.0,), 1.0), np.array([[0.0]]))
    assert np.allclose(K, [[5.0]], rtol=1e-12)


def test_marginal_covariance_noise_only_limit():
    mk = MultiKernel.single(KernelSpec.rbf(0.5))
    X = RNG.normal(size=(12, 1))
    K = marginal_covariance(mk, HyperParams((1e-12,), 2.5), X)
    assert np.max(np.abs(K - 2.5 * np.eye(12))) < 1e-11


def test_marginal_covariance_two_kernels_brute_force():
    specs = (KernelSpec.rbf(0.5), KernelSpec.rbf(2.0))
    mk = MultiKernel(specs)
    theta = HyperParams((1.5, 0.5), 0.25)
    X = RNG.normal(size=(9, 1))
    expected = (
        1.5 * kernel_matrix(specs[0], X)
        + 0.5 * kernel_matrix(specs[1], X)
        + 0.25 * np.eye(9)
    )
    assert np.allclose(marginal_covariance(mk, theta, X), expected, atol=1e-14)


def test_marginal_covariance_dimension_mismatch():
    mk = MultiKernel.single(KernelSpec.rbf(0.5))
    with pytest.raises(ValueError):
        marginal_covariance(mk, HyperParams((1.0, 1.0), 0.5), np.array([[0.0]]))


def test_noise_shifts_every_eigenvalue():
    mk = MultiKernel((KernelSpec.rbf(0.6), KernelSpec.matern(1.5, 1.0)))
    X = RNG.normal(size=(48, 1)) * 2
    base = HyperParams((2.0, 1.0), 1e-12)
    shifted = HyperParams((2.0, 1.0), 0.75)
    lam_base = sym_eigenvalues(marginal_covariance(mk, base, X)).values
    lam_shift = sym_eigenvalues(marginal_covariance(mk, shifted, X)).values
    assert np.allclose(lam_shift, lam_base - 1e-12 + 0.75, atol=1e-9)


def test_kernel_matrix_grad_variance_slots():
    specs = (KernelSpec.rbf(0.5), KernelSpec.rbf(2.0))
    mk = MultiKernel(specs)
    theta = HyperParams((1.5, 0.5), 0.25)
    X = RNG.normal(size=(8, 1))
    # d/dtheta_l is the base kernel matrix; d/dnoise is the identity
    assert np.array_equal(kernel_matrix_grad(mk, theta, X, 0), kernel_matrix(specs[0], X))
    assert np.array_equal(kernel_matrix_grad(mk, theta, X, 1), kernel_matrix(specs[1], X))
    assert np.array_equal(kernel_matrix_grad(mk, theta, X, 2), np.eye(8))
    with pytest.raises(ValueError):
        kernel_matrix_grad(mk, theta, X, 3)   # no lengthscale slots in theta


def central_difference_matrix(fn, value, h):
    return (fn(value + h) - fn(value - h)) / (2.0 * h)


def test_base_lengthscale_grad_matches_finite_difference():
    X = RNG.normal(size=(6, 2)) * 2
    for dim in (0, 1):
        grad = base_lengthscale_grad(KernelSpec.rbf((0.8, 1.3)), X, dim)
        def matrix_at(l):
            ls = [0.8, 1.3]
            ls[dim] = l
            return kernel_matrix(KernelSpec.rbf(tuple(ls)), X)
        fd = central_difference_matrix(matrix_at, [0.8, 1.3][dim], 1e-6)
        assert np.max(np.abs(grad - fd)) / np.max(np.abs(fd)) < 1e-5


def test_matern_scale_grad_matches_finite_difference():
    X = RNG.normal(size=(6, 2))
    for order in (0.5, 1.5, 2.5):
        grad = base_lengthscale_grad(KernelSpec.matern(order, 0.9), X, 0)
        fd = central_difference_matrix(
            lambda h: kernel_matrix(KernelSpec.matern(order, h), X), 0.9, 1e-6
        )
        assert np.max(np.abs(grad - fd)) <= 1e-5 * max(1.0, np.max(np.abs(fd)))


def test_kernel_matrix_grad_lengthscale_slot_scales_with_signal_variance():
    spec = KernelSpec.rbf((0.8, 1.3))
    mk = MultiKernel.single(spec)
    X = RNG.normal(size=(6, 2))
    theta = HyperParams((1.0,), 0.3, lengthscales=(0.8, 1.3))
    # with unit signal variance the slot equals the base-matrix derivative
    assert np.allclose(
        kernel_matrix_grad(mk, theta, X, 2), base_lengthscale_grad(spec, X, 0), atol=1e-14
    )
    scaled = HyperParams((2.5,), 0.3, lengthscales=(0.8, 1.3))
    assert np.allclose(
        kernel_matrix_grad(mk, scaled, X, 3),
        2.5 * base_lengthscale_grad(spec, X, 1),
        atol=1e-14,
    )


def test_hyperparams_vector_round_trip():
    theta = HyperParams((1.0, 2.0), 0.5, lengthscales=(0.7, 0.9, 1.1))
    back = HyperParams.from_vector(theta.to_vector(), 2, True)
    assert back == theta
    with pytest.raises(ValueError):
        HyperParams((1.0,), 0.0)
    with pytest.raises(ValueError):
        HyperParams((-1.0,), 1.0)
