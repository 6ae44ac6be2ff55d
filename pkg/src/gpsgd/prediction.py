"""Posterior predictive mean and variance from learned hyperparameters.

    mean(x*) = k(X, x*)^T K^-1 y
    var(x*)  = k(x*, x*) - k(X, x*)^T K^-1 k(X, x*)

with k(., .) = sum_l theta_l k_l(., .) and K the marginal covariance of the
training responses (noise included). Three strategies: exact Cholesky,
conjugate gradient for large n, and a nearest-neighbor-truncated variant that
conditions each test point on its n_neighbors closest training points.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .kernels import HyperParams, MultiKernel, cross_kernel_matrix, effective_kernels, marginal_covariance
from .linalg import cg_solve, cholesky, solve
from .sampling import SpatialIndex

EXACT_SIZE_LIMIT = 10_000


class PredictStrategy(str, Enum):
    EXACT = "exact"
    CG = "cg"
    NEAREST = "nearest"


class CGConvergenceError(Exception):
    """CG failed to reach the requested tolerance; message carries the
    residual actually achieved."""


@dataclass(frozen=True)
class PredictionResult:
    mean: np.ndarray
    variance: np.ndarray
    strategy: PredictStrategy
    cross_covariance: np.ndarray | None = None
    cg_iterations: list[int] | None = None


def _prepare(theta, kernels, X_train, X_test):
    X_train = np.asarray(X_train, dtype=np.float64)
    X_test = np.asarray(X_test, dtype=np.float64)
    if X_train.ndim == 1:
        X_train = X_train[:, None]
    if X_test.ndim == 1:
        X_test = X_test[:, None] if X_train.shape[1] == 1 else X_test[None, :]
    eff = effective_kernels(kernels, theta)
    k_star = np.zeros((X_train.shape[0], X_test.shape[0]))
    for variance, spec in zip(theta.signal_variances, eff.components):
        k_star += variance * cross_kernel_matrix(spec, X_train, X_test)
    prior_var = float(sum(theta.signal_variances))  # unit-diagonal kernels
    return X_train, X_test, eff, k_star, prior_var


def predict(
    theta: HyperParams,
    kernels: MultiKernel,
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_test: np.ndarray,
    strategy: PredictStrategy | None = None,
    cg_tol: float = 1e-6,
    cg_max_iter: int = 1000,
    return_cov: bool = False,
) -> PredictionResult:
    """Predictive mean and variance at the test inputs.

    With no explicit strategy, Cholesky is used below 10^4 training points
    and CG above. Exact and CG agree within a small multiple of cg_tol.
    """
    y_train = np.asarray(y_train, dtype=np.float64)
    X_train, X_test, eff, k_star, prior_var = _prepare(theta, kernels, X_train, X_test)
    n = X_train.shape[0]
    if strategy is None:
        strategy = PredictStrategy.EXACT if n < EXACT_SIZE_LIMIT else PredictStrategy.CG
    K = marginal_covariance(kernels, theta, X_train)

    if strategy == PredictStrategy.EXACT:
        factor = cholesky(K)
        alpha = solve(factor, y_train)
        V = solve(factor, k_star)
        iterations = None
    elif strategy == PredictStrategy.CG:
        matvec = lambda v: K @ v
        iterations = []
        res = cg_solve(matvec, y_train, tol=cg_tol, max_iter=cg_max_iter)
        _require_converged(res)
        alpha = res.x
        iterations.append(res.iterations)
        V = np.empty_like(k_star)
        for j in range(k_star.shape[1]):
            col = cg_solve(matvec, k_star[:, j], tol=cg_tol, max_iter=cg_max_iter)
            _require_converged(col)
            V[:, j] = col.x
            iterations.append(col.iterations)
    else:
        raise ValueError("use predict_nn for nearest-neighbor prediction")

    mean = k_star.T @ alpha
    variance = np.maximum(prior_var - np.einsum("ij,ij->j", k_star, V), 0.0)
    cross = None
    if return_cov:
        prior_cov = np.zeros((X_test.shape[0], X_test.shape[0]))
        for variance_l, spec in zip(theta.signal_variances, eff.components):
            prior_cov += variance_l * cross_kernel_matrix(spec, X_test, X_test)
        cross = prior_cov - k_star.T @ V
    return PredictionResult(
        mean=mean, variance=variance, strategy=strategy,
        cross_covariance=cross, cg_iterations=iterations,
    )


def _require_converged(result) -> None:
    if not result.converged:
        raise CGConvergenceError(
            f"CG stopped after {result.iterations} iterations at relative "
            f"residual {result.residual:.3e}"
        )


def predict_nn(
    theta: HyperParams,
    kernels: MultiKernel,
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_test: np.ndarray,
    n_neighbors: int,
    index: SpatialIndex,
) -> PredictionResult:
    """Prediction conditioning each test point on only its n_neighbors
    nearest training points."""
    X_train = np.asarray(X_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)
    if X_train.ndim == 1:
        X_train = X_train[:, None]
    X_test = np.asarray(X_test, dtype=np.float64)
    if X_test.ndim == 1:
        X_test = X_test[:, None] if X_train.shape[1] == 1 else X_test[None, :]
    n = X_train.shape[0]
    if not 1 <= n_neighbors <= n:
        raise ValueError(f"n_neighbors must be in [1, {n}], got {n_neighbors}")
    if index.n != n:
        raise ValueError(f"index covers {index.n} points, expected {n}")

    mean = np.empty(X_test.shape[0])
    variance = np.empty(X_test.shape[0])
    for t in range(X_test.shape[0]):
        neighbors = index.query(X_test[t], n_neighbors)
        local = predict(
            theta, kernels, X_train[neighbors], y_train[neighbors], X_test[t:t + 1],
            strategy=PredictStrategy.EXACT,
        )
        mean[t] = local.mean[0]
        variance[t] = local.variance[0]
    return PredictionResult(mean=mean, variance=variance, strategy=PredictStrategy.NEAREST)


def rmse(predicted: np.ndarray, truth: np.ndarray) -> float:
    """Root mean squared difference between paired vectors."""
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predicted.shape != truth.shape:
        raise ValueError(f"length mismatch: {predicted.shape} vs {truth.shape}")
    return float(np.sqrt(np.mean((predicted - truth) ** 2)))
