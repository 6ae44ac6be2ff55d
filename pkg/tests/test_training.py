"""Loss, gradient, and optimizer-loop tests."""

import math

import numpy as np
import pytest

from gpsgd import (
    FitDivergedError,
    Gaussian,
    HyperParams,
    KernelSpec,
    Minibatch,
    MultiKernel,
    SamplingScheme,
    ScalingMode,
    ScalingPolicy,
    SGDConfig,
    adam_fit,
    full_gradient,
    nll_loss,
    sgd_fit,
    simulate_gp,
    stochastic_gradient,
)
from gpsgd.kernels import marginal_covariance
from gpsgd.training import ADAM_EPS, LOG_2PI

MK = MultiKernel.single(KernelSpec.rbf(0.5))
RNG = np.random.default_rng(2024)


def fd_gradient(theta, kernels, X, y):
    """Central finite differences of nll_loss in every parameter slot."""
    vec = theta.to_vector()
    has_ls = theta.lengthscales is not None
    grad = np.empty(vec.shape[0])
    for l in range(vec.shape[0]):
        h = 1e-5 * max(1.0, abs(vec[l]))
        up, down = vec.copy(), vec.copy()
        up[l] += h
        down[l] -= h
        f_up = nll_loss(HyperParams.from_vector(up, theta.n_kernels, has_ls), kernels, X, y)
        f_dn = nll_loss(HyperParams.from_vector(down, theta.n_kernels, has_ls), kernels, X, y)
        grad[l] = (f_up - f_dn) / (2 * h)
    return grad


def test_nll_scalar_closed_forms():
    X = np.array([[0.0]])
    y = np.array([0.0])
    # K = 1: loss = (1/2) log 2pi
    assert nll_loss(HyperParams((0.5,), 0.5), MK, X, y) == pytest.approx(LOG_2PI / 2, rel=1e-14)
    # K = e: loss = (1/2)(1 + log 2pi)
    theta = HyperParams((math.e - 0.5,), 0.5)
    assert nll_loss(theta, MK, X, y) == pytest.approx((1 + LOG_2PI) / 2, rel=1e-14)


def test_nll_matches_explicit_inverse():
    ds = simulate_gp(MK, HyperParams((4.0,), 1.0), 20, Gaussian(5.0), 1, seed=3)
    theta = HyperParams((2.0,), 0.7)
    K = marginal_covariance(MK, theta, ds.X)
    brute = (
        ds.y @ np.linalg.inv(K) @ ds.y + np.log(np.linalg.det(K)) + 20 * LOG_2PI
    ) / 40
    assert nll_loss(theta, MK, ds.X, ds.y) == pytest.approx(brute, rel=1e-10)


def test_full_gradient_scalar_closed_form():
    X = np.array([[0.0]])
    y = np.array([2.0])
    grad = full_gradient(HyperParams((1.0,), 1.0), MK, X, y)
    assert grad == pytest.approx([-0.25, -0.25], rel=1e-12)


def test_full_gradient_positive_at_zero_response():
    ds = simulate_gp(MK, HyperParams((4.0,), 1.0), 15, Gaussian(5.0), 1, seed=4)
    grad = full_gradient(HyperParams((2.0,), 1.5), MK, ds.X, np.zeros(15))
    assert np.all(grad > 0)


def test_full_gradient_matches_finite_differences():
    ds = simulate_gp(MK, HyperParams((4.0,), 1.0), 30, Gaussian(5.0), 1, seed=5)
    theta = HyperParams((3.0,), 0.8)
    grad = full_gradient(theta, MK, ds.X, ds.y)
    fd = fd_gradient(theta, MK, ds.X, ds.y)
    assert np.max(np.abs(grad - fd) / np.abs(fd)) < 1e-5


def test_gradient_with_lengthscales_matches_finite_differences():
    kernels = MultiKernel((KernelSpec.rbf((0.6, 1.2)), KernelSpec.matern(1.5, 0.9)))
    true_theta = HyperParams((2.0, 1.0), 0.5)
    ds = simulate_gp(kernels, true_theta, 25, Gaussian(2.0), 2, seed=6)
    theta = HyperParams((1.5, 0.8), 0.6, lengthscales=(0.7, 1.0, 1.1))
    grad = full_gradient(theta, kernels, ds.X, ds.y)
    fd = fd_gradient(theta, kernels, ds.X, ds.y)
    assert grad.shape == (6,)
    assert np.max(np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-12)) < 1e-5


def test_stochastic_gradient_full_batch_reduces_to_full_gradient():
    ds = simulate_gp(MK, HyperParams((4.0,), 1.0), 60, Gaussian(5.0), 1, seed=7)
    theta = HyperParams((2.5,), 1.2)
    batch = Minibatch(tuple(range(60)), SamplingScheme.UNIFORM)
    sg = stochastic_gradient(theta, MK, batch, ds.X, ds.y, ScalingPolicy.linear(1))
    fg = full_gradient(theta, MK, ds.X, ds.y)
    assert np.max(np.abs(sg - fg)) < 1e-12


def test_stochastic_gradient_single_point_closed_form():
    X = np.array([[0.0]])
    y = np.array([2.0])
    batch = Minibatch((0,), SamplingScheme.UNIFORM)
    sg = stochastic_gradient(HyperParams((1.0,), 1.0), MK, batch, X, y)
    assert sg == pytest.approx([-0.25, -0.25], rel=1e-12)


def test_log_scaling_is_a_constant_rescale_of_linear():
    ds = simulate_gp(MK, HyperParams((4.0,), 1.0), 128, Gaussian(5.0), 1, seed=8)
    theta = HyperParams((2.0,), 1.5)
    batch = Minibatch(tuple(range(128)), SamplingScheme.UNIFORM)
    linear = stochastic_gradient(theta, MK, batch, ds.X, ds.y, ScalingPolicy.linear(1))
    logscaled = stochastic_gradient(
        theta, MK, batch, ds.X, ds.y, ScalingPolicy.log_signal(1, tau=3.0)
    )
    # signal slot rescales by m / (tau log m); noise slot unchanged
    assert logscaled[0] == pytest.approx(linear[0] * 128 / (3 * math.log(128)), rel=1e-12)
    assert logscaled[1] == linear[1]


def test_scaling_policy_validation():
    with pytest.raises(ValueError):
        ScalingPolicy.log_signal(1).divisors(2, 1, 0)   # log scaling needs m >= 3
    with pytest.raises(ValueError):
        ScalingPolicy((ScalingMode.LINEAR,), tau=-1.0)
    with pytest.raises(ValueError):
        ScalingPolicy.linear(2).divisors(8, 1, 0)       # slot-count mismatch


def test_loss_scale_covariance():
    # y -> 2y with theta -> 4*theta shifts the loss by exactly log 2
    ds = simulate_gp(MK, HyperParams((4.0,), 1.0), 25, Gaussian(5.0), 1, seed=9)
    theta = HyperParams((2.0,), 1.0)
    scaled = HyperParams((8.0,), 4.0)
    base = nll_loss(theta, MK, ds.X, ds.y)
    moved = nll_loss(scaled, MK, ds.X, 2.0 * ds.y)
    assert moved - base == pytest.approx(math.log(2.0), abs=1e-10)


def _dataset(n=96, seed=10):
    return simulate_gp(MK, HyperParams((4.0,), 1.0), n, Gaussian(5.0), 1, seed=seed)


def test_sgd_zero_iterations():
    trace = sgd_fit(_dataset(), MK, SGDConfig(m=16, iterations=0, alpha1=1.0, seed=0),
                    HyperParams((2.0,), 2.0))
    assert trace.iterations == 0
    assert len(trace.records) == 1
    assert np.array_equal(trace.records[0].theta, [2.0, 2.0])


def test_sgd_fixed_point_of_zero_gradient():
    # one point with y^2 = theta_1 + theta_2 makes every slot's gradient zero
    theta0 = HyperParams((1.5,), 0.5)
    ds_fixture = simulate_gp(MK, theta0, 1, Gaussian(1.0), 1, seed=0)
    fixed = np.sqrt(1.5 + 0.5)
    X, y = ds_fixture.X, np.array([fixed])
    from gpsgd.data import Dataset
    ds = Dataset(X=X, y=y)
    trace = sgd_fit(ds, MK, SGDConfig(m=1, iterations=5, alpha1=2.0, seed=1), theta0)
    assert np.max(np.abs(trace.theta_history() - [1.5, 0.5])) < 1e-14


def test_sgd_trace_contract():
    config = SGDConfig(m=16, epochs=2, alpha1=1.5, seed=12)
    trace = sgd_fit(_dataset(), MK, config, HyperParams((3.0,), 2.0))
    assert trace.iterations == 2 * math.ceil(96 / 16)
    assert len(trace.records) == trace.iterations + 1
    # exact diminishing step law
    for rec in trace.records[1:]:
        assert rec.step_size * rec.iteration == 1.5
    assert trace.records[0].step_size == 0.0


def test_sgd_deterministic_given_seed():
    config = SGDConfig(m=8, epochs=2, alpha1=1.0, seed=13,
                       scheme=SamplingScheme.NEARBY)
    a = sgd_fit(_dataset(), MK, config, HyperParams((3.0,), 2.0))
    b = sgd_fit(_dataset(), MK, config, HyperParams((3.0,), 2.0))
    assert np.array_equal(a.theta_history(), b.theta_history())
    c = sgd_fit(_dataset(), MK, SGDConfig(m=8, epochs=2, alpha1=1.0, seed=14,
                                          scheme=SamplingScheme.NEARBY),
                HyperParams((3.0,), 2.0))
    assert not np.array_equal(a.theta_history(), c.theta_history())


def test_sgd_diverges_without_clamp():
    # a huge step drives a variance negative; the error names the iteration
    ds = _dataset(n=32, seed=15)
    config = SGDConfig(m=32, iterations=3, alpha1=1e4, seed=16)
    with pytest.raises(FitDivergedError, match="iteration 1"):
        sgd_fit(ds, MK, config, HyperParams((8.0,), 4.0))


def test_sgd_clamp_counts_events():
    ds = _dataset(n=32, seed=15)
    config = SGDConfig(m=32, iterations=3, alpha1=1e4, seed=16, clamp=(1e-4, 1e4))
    trace = sgd_fit(ds, MK, config, HyperParams((8.0,), 4.0))
    assert trace.clamp_events > 0
    assert np.all(trace.theta_history() >= 1e-4)


def test_sgd_clip_bounds_gradient_norm():
    ds = _dataset(n=32, seed=15)
    clip = 0.05
    config = SGDConfig(m=32, iterations=4, alpha1=1.0, seed=17, clip=clip)
    trace = sgd_fit(ds, MK, config, HyperParams((8.0,), 4.0))
    assert trace.clip_events > 0
    for rec in trace.records[1:]:
        assert np.linalg.norm(rec.gradient) <= clip + 1e-12


def test_sgd_grad_norm_recording():
    config = SGDConfig(m=16, iterations=4, alpha1=1.0, seed=18, grad_norm_every=2)
    trace = sgd_fit(_dataset(), MK, config, HyperParams((3.0,), 2.0))
    recorded = [rec.iteration for rec in trace.records if rec.grad_norm_sq is not None]
    assert recorded == [0, 2, 4]


def test_config_validation():
    with pytest.raises(ValueError):
        SGDConfig(m=0, iterations=1)
    with pytest.raises(ValueError):
        SGDConfig(m=4, iterations=1, epochs=1)
    with pytest.raises(ValueError):
        SGDConfig(m=4)
    with pytest.raises(ValueError):
        SGDConfig(m=4, iterations=1, alpha1=0.0)
    with pytest.raises(ValueError):
        SGDConfig(m=4, iterations=1, clamp=(2.0, 1.0))


def test_adam_single_step_closed_form():
    ds = _dataset(n=8, seed=19)
    config = SGDConfig(m=8, iterations=1, learning_rate=0.1, seed=20)
    trace = adam_fit(ds, MK, config, HyperParams((2.0,), 2.0))
    grad = trace.records[1].gradient
    # fresh-state bias correction cancels: step = lr * g / (|g| + eps)
    expected = np.array([2.0, 2.0]) - 0.1 * grad / (np.abs(grad) + ADAM_EPS)
    assert np.max(np.abs(trace.records[1].theta - expected)) < 1e-14


def test_adam_keeps_lengthscales_frozen_by_default():
    theta0 = HyperParams((2.0,), 1.0, lengthscales=(0.5,))
    config = SGDConfig(m=16, iterations=10, learning_rate=0.05, seed=21)
    trace = adam_fit(_dataset(), MK, config, theta0, learn_lengthscales=False)
    history = trace.theta_history()
    assert np.all(history[:, 2] == 0.5)
    assert history[0, 0] != history[-1, 0]


def test_adam_learns_lengthscale_direction():
    # data generated at lengthscale 0.5; optimization starts at 2.0
    true_kernels = MultiKernel.single(KernelSpec.rbf(0.5))
    ds = simulate_gp(true_kernels, HyperParams((4.0,), 1.0), 400, Gaussian(5.0), 1, seed=9)
    start = MultiKernel.single(KernelSpec.rbf(2.0))
    config = SGDConfig(m=16, epochs=40, learning_rate=0.02, seed=10)
    trace = adam_fit(ds, start, config, HyperParams((2.0,), 2.0), learn_lengthscales=True)
    learned = trace.final_theta.lengthscales[0]
    assert abs(learned - 0.5) < abs(2.0 - 0.5)


def test_adam_positivity_floor():
    ds = _dataset(n=32, seed=22)
    config = SGDConfig(m=32, iterations=50, learning_rate=0.5, seed=23)
    trace = adam_fit(ds, MK, config, HyperParams((0.01,), 0.01))
    assert np.all(trace.theta_history() > 0)


def test_trace_csv_format(tmp_path):
    config = SGDConfig(m=16, iterations=3, alpha1=2.0, seed=24, grad_norm_every=3)
    trace = sgd_fit(_dataset(), MK, config, HyperParams((3.0,), 2.0))
    path = tmp_path / "trace.csv"
    trace.to_csv(path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "iter,alpha,theta_1,theta_2,grad_norm_sq,elapsed_ms"
    assert len(lines) == 5
    first = lines[1].split(",")
    assert first[0] == "0" and first[1] == "0.0"
    assert float(first[2]) == 3.0
    # full precision round trip
    assert float(lines[4].split(",")[2]) == trace.records[3].theta[0]

    bare = tmp_path / "bare.csv"
    trace.to_csv(bare, include_timing=False)
    assert bare.read_text().split("\n")[0] == "iter,alpha,theta_1,theta_2,grad_norm_sq"
