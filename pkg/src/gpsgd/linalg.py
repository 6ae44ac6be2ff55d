"""Dense symmetric linear algebra: Cholesky, solves, log-determinant,
eigenvalues, and a conjugate-gradient solver.

Everything here operates on plain float64 numpy arrays. Factorizations are
deterministic; no randomized methods.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg


class NotPositiveDefiniteError(Exception):
    """Raised when a matrix required to be positive definite is not.

    For marginal covariance matrices this signals hyperparameters outside the
    valid region (e.g. a non-positive noise variance) or a corrupted kernel
    matrix, rather than something a jitter should paper over.
    """


class CGBreakdownError(Exception):
    """Conjugate gradient hit a direction of non-positive curvature,
    which means the operator is not positive definite."""


DEFAULT_EIG_SIZE_CAP = 4096


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor L with K = L L^T."""

    lower: np.ndarray

    @property
    def n(self) -> int:
        return self.lower.shape[0]


@dataclass(frozen=True)
class EigenSpectrum:
    """Real eigenvalues of a symmetric matrix, sorted descending."""

    values: np.ndarray

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class CGResult:
    x: np.ndarray
    iterations: int
    converged: bool
    residual: float


def cholesky(K: np.ndarray) -> CholeskyFactor:
    """Factor a symmetric positive definite matrix as K = L L^T.

    Raises NotPositiveDefiniteError if any pivot is non-positive.
    """
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {K.shape}")
    try:
        lower = np.linalg.cholesky(K)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(
            f"Cholesky failed for {K.shape[0]}x{K.shape[0]} matrix: {exc}"
        ) from None
    return CholeskyFactor(lower=lower)


def solve(factor: CholeskyFactor, b: np.ndarray) -> np.ndarray:
    """Solve K x = b given the Cholesky factor of K.

    Accepts a vector or a matrix of right-hand sides; returns the same shape.
    """
    b = np.asarray(b, dtype=np.float64)
    n = factor.n
    if b.shape[0] != n:
        raise ValueError(f"right-hand side has leading dimension {b.shape[0]}, expected {n}")
    z = scipy.linalg.solve_triangular(factor.lower, b, lower=True)
    return scipy.linalg.solve_triangular(factor.lower, z, lower=True, trans="T")


def log_det(factor: CholeskyFactor) -> float:
    """log |K| = 2 * sum(log L_ii)."""
    return float(2.0 * np.sum(np.log(np.diag(factor.lower))))


def sym_eigenvalues(K: np.ndarray, max_size: int = DEFAULT_EIG_SIZE_CAP) -> EigenSpectrum:
    """All eigenvalues of a symmetric matrix, descending.

    Only eigenvalues are computed (no vectors). Matrices above `max_size`
    are rejected to keep the dense solve bounded.
    """
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {K.shape}")
    if K.shape[0] > max_size:
        raise ValueError(f"matrix size {K.shape[0]} exceeds eigenvalue cap {max_size}")
    values = np.linalg.eigvalsh(K)
    return EigenSpectrum(values=values[::-1].copy())


def cg_solve(
    matvec: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    tol: float = 1e-6,
    max_iter: int = 1000,
    precond: Callable[[np.ndarray], np.ndarray] | None = None,
) -> CGResult:
    """(Preconditioned) conjugate gradient for a symmetric PD operator.

    Stops when ||A x - b||_2 / ||b||_2 <= tol or after `max_iter` iterations;
    the result reports which happened. Raises CGBreakdownError on a direction
    of non-positive curvature.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    b = np.asarray(b, dtype=np.float64)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return CGResult(x=np.zeros_like(b), iterations=0, converged=True, residual=0.0)

    x = np.zeros_like(b)
    r = b.copy()
    z = precond(r) if precond is not None else r
    p = z.copy()
    rz = float(r @ z)

    iterations = 0
    residual = 1.0
    for _ in range(max_iter):
        Ap = matvec(p)
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            raise CGBreakdownError(
                f"non-positive curvature p^T A p = {pAp:g} at iteration {iterations + 1}"
            )
        alpha = rz / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        iterations += 1
        residual = float(np.linalg.norm(r)) / b_norm
        if residual <= tol:
            return CGResult(x=x, iterations=iterations, converged=True, residual=residual)
        z = precond(r) if precond is not None else r
        rz_next = float(r @ z)
        p = z + (rz_next / rz) * p
        rz = rz_next

    return CGResult(x=x, iterations=iterations, converged=False, residual=residual)


def two_sided_solve(factor: CholeskyFactor, D: np.ndarray) -> np.ndarray:
    """L^-1 D L^-T for symmetric D, via two triangular solve passes.

    Its trace equals tr(K^-1 D) without ever forming K^-1.
    """
    A = scipy.linalg.solve_triangular(factor.lower, D, lower=True)
    return scipy.linalg.solve_triangular(factor.lower, A.T, lower=True)


def jacobi_preconditioner(diagonal: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """Diagonal (Jacobi) preconditioner from the operator's diagonal."""
    diagonal = np.asarray(diagonal, dtype=np.float64)
    if np.any(diagonal <= 0):
        raise ValueError("Jacobi preconditioner requires a strictly positive diagonal")
    inv = 1.0 / diagonal
    return lambda v: inv * v
