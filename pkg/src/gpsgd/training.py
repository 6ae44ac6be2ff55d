"""Loss, gradients, and the minibatch optimizers.

The training loss is the scaled negative log marginal likelihood
    loss(theta) = (1/2n) [y^T K^-1 y + log|K| + n log 2pi]
whose gradient entries are
    (1/2n) tr[K^-1 (I - y y^T K^-1) dK/dtheta_l].

The minibatch stochastic gradient evaluates the same trace on the principal
submatrix indexed by the batch, dividing slot l by 2*s_l(m) instead of 2n.
With s_l(m) = m for every slot and the batch equal to the full index set it
reduces to the full gradient exactly.

Two optimizers are provided: plain SGD with diminishing step sizes
alpha_k = alpha_1 / k, and Adam with a constant learning rate for joint
variance + lengthscale estimation.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .data import Dataset
from .kernels import (
    HyperParams,
    MultiKernel,
    kernel_matrix_grad,
    marginal_covariance,
    param_names,
)
from .linalg import NotPositiveDefiniteError, cholesky, log_det, solve, two_sided_solve
from .sampling import Minibatch, SamplingScheme, SpatialIndex, build_index, draw_minibatch
from .seeds import iteration_rng

LOG_2PI = math.log(2.0 * math.pi)

# Iterate bounds applied when clamping is requested without explicit bounds,
# and the positivity floor Adam always applies.
DEFAULT_CLAMP_BOUNDS = (1e-4, 1e4)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ScalingMode(str, Enum):
    LINEAR = "linear"       # s_l(m) = m
    LOG_SCALED = "log"      # s_l(m) = tau * log(m)


@dataclass(frozen=True)
class ScalingPolicy:
    """Per-slot stochastic-gradient divisors s_l(m).

    Signal-variance slots may be Linear or LogScaled; the noise slot and any
    lengthscale slots are always Linear. LogScaled slots require m >= 3.
    """

    signal_modes: tuple[ScalingMode, ...]
    tau: float = 3.0

    def __post_init__(self):
        if len(self.signal_modes) < 1:
            raise ValueError("at least one signal slot is required")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    @classmethod
    def linear(cls, n_kernels: int) -> "ScalingPolicy":
        return cls((ScalingMode.LINEAR,) * n_kernels)

    @classmethod
    def log_signal(cls, n_kernels: int, tau: float = 3.0) -> "ScalingPolicy":
        return cls((ScalingMode.LOG_SCALED,) * n_kernels, tau=tau)

    @property
    def has_log(self) -> bool:
        return ScalingMode.LOG_SCALED in self.signal_modes

    def divisors(self, m: int, n_kernels: int, n_lengthscales: int) -> np.ndarray:
        if len(self.signal_modes) != n_kernels:
            raise ValueError(
                f"{len(self.signal_modes)} scaling modes for {n_kernels} signal slots"
            )
        if self.has_log and m < 3:
            raise ValueError("log-scaled slots require minibatch size m >= 3")
        out = np.full(n_kernels + 1 + n_lengthscales, float(m))
        for l, mode in enumerate(self.signal_modes):
            if mode == ScalingMode.LOG_SCALED:
                out[l] = self.tau * math.log(m)
        return out


@dataclass(frozen=True)
class SGDConfig:
    """Optimizer run configuration.

    Exactly one of `iterations` or `epochs` must be set; an epoch is
    ceil(n / m) iterations. `alpha1` is the SGD initial step (alpha_k =
    alpha1 / k); `learning_rate` is the Adam step. `clamp` bounds iterates to
    [theta_min, theta_max]; `clip` rescales stochastic gradients with norm
    above G. Both are off by default.
    """

    m: int
    iterations: int | None = None
    epochs: int | None = None
    alpha1: float = 1.0
    learning_rate: float = 0.01
    scheme: SamplingScheme = SamplingScheme.UNIFORM
    scaling: ScalingPolicy | None = None
    clamp: tuple[float, float] | None = None
    clip: float | None = None
    seed: int = 0
    grad_norm_every: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("minibatch size m must be at least 1")
        if (self.iterations is None) == (self.epochs is None):
            raise ValueError("set exactly one of iterations or epochs")
        if self.iterations is not None and self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.epochs is not None and self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.alpha1 <= 0:
            raise ValueError("alpha1 must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.clamp is not None and not self.clamp[0] < self.clamp[1]:
            raise ValueError("clamp bounds must satisfy theta_min < theta_max")
        if self.clip is not None and self.clip <= 0:
            raise ValueError("clip threshold must be positive")
        if self.grad_norm_every < 0:
            raise ValueError("grad_norm_every must be nonnegative")

    def resolve_iterations(self, n: int) -> int:
        if self.iterations is not None:
            return self.iterations
        return self.epochs * math.ceil(n / self.m)


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    theta: np.ndarray
    step_size: float
    gradient: np.ndarray | None
    grad_norm_sq: float | None
    elapsed: float


@dataclass
class FitTrace:
    """Per-iteration optimizer history, including the starting point."""

    records: list[TraceRecord]
    param_names: list[str]
    n_kernels: int
    has_lengthscales: bool
    clamp_events: int = 0
    clip_events: int = 0

    @property
    def iterations(self) -> int:
        return len(self.records) - 1

    @property
    def final_theta(self) -> HyperParams:
        return HyperParams.from_vector(
            self.records[-1].theta, self.n_kernels, self.has_lengthscales
        )

    def theta_history(self) -> np.ndarray:
        return np.vstack([rec.theta for rec in self.records])

    def to_csv(self, path: str | Path, include_timing: bool = True) -> None:
        """One row per iteration, full-precision floats.

        `include_timing=False` drops the wall-clock column so reruns with the
        same seed produce byte-identical files.
        """
        path = Path(path)
        has_grad_norm = any(rec.grad_norm_sq is not None for rec in self.records)
        header = ["iter", "alpha"] + list(self.param_names)
        if has_grad_norm:
            header.append("grad_norm_sq")
        if include_timing:
            header.append("elapsed_ms")
        lines = [",".join(header)]
        for rec in self.records:
            row = [str(rec.iteration), repr(float(rec.step_size))]
            row += [repr(float(v)) for v in rec.theta]
            if has_grad_norm:
                row.append("" if rec.grad_norm_sq is None else repr(float(rec.grad_norm_sq)))
            if include_timing:
                row.append(repr(rec.elapsed * 1000.0))
            lines.append(",".join(row))
        path.write_text("\n".join(lines) + "\n")


class FitDivergedError(Exception):
    """An optimizer run failed partway; `.trace` holds the history so far."""

    def __init__(self, message: str, trace: FitTrace):
        super().__init__(message)
        self.trace = trace


def nll_loss(theta: HyperParams, kernels: MultiKernel, X: np.ndarray, y: np.ndarray) -> float:
    """Scaled negative log marginal likelihood of y given X."""
    y = np.asarray(y, dtype=np.float64)
    K = marginal_covariance(kernels, theta, X)
    factor = cholesky(K)
    alpha = solve(factor, y)
    n = y.shape[0]
    return float((y @ alpha + log_det(factor) + n * LOG_2PI) / (2.0 * n))


def _gradient_core(
    theta: HyperParams,
    kernels: MultiKernel,
    X: np.ndarray,
    y: np.ndarray,
    divisors: np.ndarray,
) -> np.ndarray:
    """Gradient slots (tr[K^-1 dK] - (K^-1 y)^T dK (K^-1 y)) / (2 s_l), from
    one Cholesky of the covariance."""
    K = marginal_covariance(kernels, theta, X)
    factor = cholesky(K)
    alpha = solve(factor, y)
    grad = np.empty(theta.n_params)
    for l in range(theta.n_params):
        D = kernel_matrix_grad(kernels, theta, X, l)
        trace_term = float(np.trace(two_sided_solve(factor, D)))
        quad_term = float(alpha @ (D @ alpha))
        grad[l] = (trace_term - quad_term) / (2.0 * divisors[l])
    return grad


def full_gradient(
    theta: HyperParams, kernels: MultiKernel, X: np.ndarray, y: np.ndarray
) -> np.ndarray:
    """Gradient of nll_loss over the full dataset, one entry per parameter
    slot (signal variances, noise, then lengthscales when present)."""
    y = np.asarray(y, dtype=np.float64)
    divisors = np.full(theta.n_params, float(y.shape[0]))
    return _gradient_core(theta, kernels, X, y, divisors)


def stochastic_gradient(
    theta: HyperParams,
    kernels: MultiKernel,
    batch: Minibatch,
    X: np.ndarray,
    y: np.ndarray,
    scaling: ScalingPolicy | None = None,
) -> np.ndarray:
    """Minibatch gradient estimate with per-slot scaling s_l(m)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    idx = np.asarray(batch.indices, dtype=np.intp)
    if idx.min() < 0 or idx.max() >= y.shape[0]:
        raise ValueError("batch indices out of range")
    if scaling is None:
        scaling = ScalingPolicy.linear(theta.n_kernels)
    n_ls = 0 if theta.lengthscales is None else len(theta.lengthscales)
    divisors = scaling.divisors(batch.size, theta.n_kernels, n_ls)
    X2 = X[idx] if X.ndim == 2 else X[idx, None]
    return _gradient_core(theta, kernels, X2, y[idx], divisors)


def _record(
    k: int,
    theta_vec: np.ndarray,
    step: float,
    grad: np.ndarray | None,
    grad_norm_sq: float | None,
    start: float,
) -> TraceRecord:
    return TraceRecord(
        iteration=k,
        theta=theta_vec.copy(),
        step_size=step,
        gradient=None if grad is None else grad.copy(),
        grad_norm_sq=grad_norm_sq,
        elapsed=time.perf_counter() - start,
    )


class _FitLoop:
    """Shared bookkeeping for both optimizers: batch drawing, clipping,
    clamping, trace recording, and failure wrapping."""

    def __init__(
        self,
        dataset: Dataset,
        kernels: MultiKernel,
        config: SGDConfig,
        theta0: HyperParams,
    ):
        self.X = dataset.X
        self.y = dataset.y
        self.n = dataset.n
        self.kernels = kernels
        self.config = config
        self.scaling = config.scaling or ScalingPolicy.linear(kernels.n_kernels)
        self.iterations = config.resolve_iterations(self.n)
        self.n_kernels = kernels.n_kernels
        self.has_lengthscales = theta0.lengthscales is not None
        self.index: SpatialIndex | None = (
            build_index(self.X) if config.scheme == SamplingScheme.NEARBY else None
        )
        self.start = time.perf_counter()
        self.records: list[TraceRecord] = []
        self.clamp_events = 0
        self.clip_events = 0
        # Fail fast on inconsistent scaling before iterating.
        self.scaling.divisors(config.m, self.n_kernels,
                              0 if not self.has_lengthscales else len(theta0.lengthscales))

    def trace(self) -> FitTrace:
        names = param_names(self.kernels, HyperParams.from_vector(
            self.records[0].theta, self.n_kernels, self.has_lengthscales))
        return FitTrace(
            records=self.records,
            param_names=names,
            n_kernels=self.n_kernels,
            has_lengthscales=self.has_lengthscales,
            clamp_events=self.clamp_events,
            clip_events=self.clip_events,
        )

    def theta_of(self, vec: np.ndarray) -> HyperParams:
        return HyperParams.from_vector(vec, self.n_kernels, self.has_lengthscales)

    def batch_gradient(self, k: int, theta_vec: np.ndarray) -> np.ndarray:
        rng = iteration_rng(self.config.seed, k)
        batch = draw_minibatch(self.config.scheme, self.n, self.config.m, rng, self.index)
        try:
            grad = stochastic_gradient(
                self.theta_of(theta_vec), self.kernels, batch, self.X, self.y, self.scaling
            )
        except NotPositiveDefiniteError as exc:
            raise FitDivergedError(
                f"covariance not positive definite at iteration {k}: {exc}", self.trace()
            ) from exc
        if self.config.clip is not None:
            norm = float(np.linalg.norm(grad))
            if norm > self.config.clip:
                grad = grad * (self.config.clip / norm)
                self.clip_events += 1
        return grad

    def enforce_bounds(self, k: int, theta_vec: np.ndarray, lower_floor: float | None) -> np.ndarray:
        if self.config.clamp is not None:
            lo, hi = self.config.clamp
        elif lower_floor is not None:
            lo, hi = lower_floor, np.inf
        else:
            if np.any(theta_vec <= 0):
                bad = int(np.argmax(theta_vec <= 0))
                raise FitDivergedError(
                    f"parameter slot {bad} left (0, inf) at iteration {k}; "
                    "enable clamping or reduce the step size",
                    self.trace(),
                )
            return theta_vec
        clamped = np.clip(theta_vec, lo, hi)
        self.clamp_events += int(np.sum(clamped != theta_vec))
        return clamped

    def grad_norm_sq(self, k: int, theta_vec: np.ndarray) -> float | None:
        every = self.config.grad_norm_every
        if every <= 0 or not (k % every == 0 or k == self.iterations):
            return None
        g = full_gradient(self.theta_of(theta_vec), self.kernels, self.X, self.y)
        return float(g @ g)


def sgd_fit(
    dataset: Dataset,
    kernels: MultiKernel,
    config: SGDConfig,
    theta0: HyperParams,
) -> FitTrace:
    """Minibatch SGD with diminishing step sizes alpha_k = alpha1 / k.

    Deterministic given (seed, config, data): the batch at iteration k is a
    pure function of the seed and k.
    """
    loop = _FitLoop(dataset, kernels, config, theta0)
    theta_vec = theta0.to_vector()
    loop.records.append(
        _record(0, theta_vec, 0.0, None, loop.grad_norm_sq(0, theta_vec), loop.start)
    )
    for k in range(1, loop.iterations + 1):
        grad = loop.batch_gradient(k, theta_vec)
        alpha_k = config.alpha1 / k
        theta_vec = theta_vec - alpha_k * grad
        theta_vec = loop.enforce_bounds(k, theta_vec, lower_floor=None)
        loop.records.append(
            _record(k, theta_vec, alpha_k, grad, loop.grad_norm_sq(k, theta_vec), loop.start)
        )
    return loop.trace()


def adam_fit(
    dataset: Dataset,
    kernels: MultiKernel,
    config: SGDConfig,
    theta0: HyperParams,
    learn_lengthscales: bool = False,
) -> FitTrace:
    """Adam on the minibatch gradients with a constant learning rate.

    With `learn_lengthscales` the lengthscale slots are optimized alongside
    the variances; otherwise any lengthscale slots in theta0 stay untouched.
    Positivity is maintained by clamping below at theta_min (the configured
    clamp bound, or its default).
    """
    if learn_lengthscales and theta0.lengthscales is None:
        theta0 = HyperParams(
            theta0.signal_variances, theta0.noise_variance, kernels.flat_lengthscales()
        )
    loop = _FitLoop(dataset, kernels, config, theta0)
    theta_vec = theta0.to_vector()
    n_var = kernels.n_kernels + 1
    active = np.zeros(theta_vec.shape[0], dtype=bool)
    active[:n_var] = True
    if learn_lengthscales:
        active[n_var:] = True

    m_state = np.zeros_like(theta_vec)
    v_state = np.zeros_like(theta_vec)
    floor = DEFAULT_CLAMP_BOUNDS[0]
    loop.records.append(
        _record(0, theta_vec, 0.0, None, loop.grad_norm_sq(0, theta_vec), loop.start)
    )
    for k in range(1, loop.iterations + 1):
        grad = loop.batch_gradient(k, theta_vec)
        grad = np.where(active, grad, 0.0)
        m_state = ADAM_BETA1 * m_state + (1.0 - ADAM_BETA1) * grad
        v_state = ADAM_BETA2 * v_state + (1.0 - ADAM_BETA2) * grad**2
        m_hat = m_state / (1.0 - ADAM_BETA1**k)
        v_hat = v_state / (1.0 - ADAM_BETA2**k)
        step = config.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        theta_vec = theta_vec - np.where(active, step, 0.0)
        theta_vec = loop.enforce_bounds(k, theta_vec, lower_floor=floor)
        loop.records.append(
            _record(k, theta_vec, config.learning_rate, grad,
                    loop.grad_norm_sq(k, theta_vec), loop.start)
        )
    return loop.trace()
