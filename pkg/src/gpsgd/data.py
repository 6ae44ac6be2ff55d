"""Synthetic data generation, CSV I/O, splitting, and normalization.

Datasets are an n x D input matrix plus an n response vector. CSV files use
a `x1,...,xD,y` header with the response in the last column; floats are
written with shortest round-trip formatting so load(save(ds)) is bit exact.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .kernels import HyperParams, MultiKernel, marginal_covariance
from .linalg import NotPositiveDefiniteError, cholesky
from .seeds import component_rng


@dataclass(frozen=True)
class Gaussian:
    """Coordinates drawn i.i.d. from N(0, sd^2)."""

    sd: float

    def sample(self, rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
        return rng.normal(0.0, self.sd, size=(n, dim))

    def describe(self) -> dict:
        return {"kind": "gaussian", "sd": self.sd}


@dataclass(frozen=True)
class Uniform:
    """Coordinates drawn i.i.d. from Uniform(low, high)."""

    low: float
    high: float

    def sample(self, rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
        return rng.uniform(self.low, self.high, size=(n, dim))

    def describe(self) -> dict:
        return {"kind": "uniform", "low": self.low, "high": self.high}


InputDist = Gaussian | Uniform


@dataclass(frozen=True)
class NormalizationMeta:
    """Training-set statistics used to standardize inputs and response.

    Standard deviations use the n-1 divisor.
    """

    x_mean: np.ndarray
    x_sd: np.ndarray
    y_mean: float
    y_sd: float


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    provenance: dict | None = None
    normalization: NormalizationMeta | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise ValueError(f"inconsistent shapes X {X.shape}, y {y.shape}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite entries")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    def subset(self, indices: np.ndarray) -> "Dataset":
        return replace(self, X=self.X[indices], y=self.y[indices])


def simulate_gp(
    kernels: MultiKernel,
    theta_true: HyperParams,
    n: int,
    input_dist: InputDist,
    input_dim: int,
    seed: int,
) -> Dataset:
    """Draw X from the input distribution and y ~ N(0, K(theta_true))."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = component_rng(seed, "simulate-gp")
    X = input_dist.sample(rng, n, input_dim)
    K = marginal_covariance(kernels, theta_true, X)
    try:
        factor = cholesky(K)
    except NotPositiveDefiniteError:
        # Cannot happen with a positive noise variance; kept as a guard.
        raise
    y = factor.lower @ rng.standard_normal(n)
    provenance = {
        "generator": "gp",
        "theta": list(theta_true.to_vector()),
        "kernels": [spec.to_config() for spec in kernels.components],
        "input_dist": input_dist.describe(),
        "input_dim": input_dim,
        "n": n,
        "seed": seed,
    }
    return Dataset(X=X, y=y, provenance=provenance)


def levy(X: np.ndarray) -> np.ndarray:
    """Levy benchmark function, arbitrary dimension."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    w = 1.0 + (X - 1.0) / 4.0
    head = np.sin(np.pi * w[:, 0]) ** 2
    tail = (w[:, -1] - 1.0) ** 2 * (1.0 + np.sin(2.0 * np.pi * w[:, -1]) ** 2)
    if X.shape[1] > 1:
        wi = w[:, :-1]
        mid = np.sum((wi - 1.0) ** 2 * (1.0 + 10.0 * np.sin(np.pi * wi + 1.0) ** 2), axis=1)
    else:
        mid = np.zeros(X.shape[0])
    return head + mid + tail


def griewank(X: np.ndarray) -> np.ndarray:
    """Griewank benchmark function, arbitrary dimension."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    denom = np.sqrt(np.arange(1, X.shape[1] + 1, dtype=np.float64))
    return np.sum(X**2, axis=1) / 4000.0 - np.prod(np.cos(X / denom), axis=1) + 1.0


BENCHMARK_FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "levy": levy,
    "griewank": griewank,
}


def simulate_function(
    f: Callable[[np.ndarray], np.ndarray],
    n: int,
    input_dist: InputDist,
    input_dim: int,
    noise_sd: float,
    seed: int,
    name: str | None = None,
) -> Dataset:
    """y = f(X) + N(0, noise_sd^2) noise; the deterministic-function analog
    of simulate_gp for benchmark responses."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if noise_sd < 0:
        raise ValueError("noise_sd must be nonnegative")
    rng = component_rng(seed, "simulate-function")
    X = input_dist.sample(rng, n, input_dim)
    y = np.asarray(f(X), dtype=np.float64)
    if y.shape != (n,):
        raise ValueError(f"function returned shape {y.shape}, expected ({n},)")
    y = y + rng.normal(0.0, noise_sd, size=n)
    provenance = {
        "generator": "function",
        "function": name or getattr(f, "__name__", "unknown"),
        "noise_sd": noise_sd,
        "input_dist": input_dist.describe(),
        "input_dim": input_dim,
        "n": n,
        "seed": seed,
    }
    return Dataset(X=X, y=y, provenance=provenance)


def train_test_split(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint, exhaustive, uniformly random split; train size floor(f*n)."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    n = dataset.n
    # Guard against 0.6 * 10 -> 5.999... style float droop before flooring.
    n_train = int(math.floor(train_fraction * n + 1e-9))
    if n_train < 1 or n_train >= n:
        raise ValueError(f"split of {n} rows at fraction {train_fraction} leaves an empty side")
    perm = component_rng(seed, "train-test-split").permutation(n)
    return dataset.subset(np.sort(perm[:n_train])), dataset.subset(np.sort(perm[n_train:]))


def normalize(train: Dataset, test: Dataset) -> tuple[Dataset, Dataset, NormalizationMeta]:
    """Standardize train X columns and y to mean 0, sd 1 (n-1 divisor); the
    test set is transformed with the training statistics."""
    if train.input_dim != test.input_dim:
        raise ValueError("train and test input dimensions differ")
    x_mean = train.X.mean(axis=0)
    x_sd = train.X.std(axis=0, ddof=1)
    y_mean = float(train.y.mean())
    y_sd = float(train.y.std(ddof=1))
    if np.any(x_sd <= 0) or y_sd <= 0:
        raise ValueError("cannot normalize a zero-variance column")
    meta = NormalizationMeta(x_mean=x_mean, x_sd=x_sd, y_mean=y_mean, y_sd=y_sd)
    train_norm = replace(
        train, X=(train.X - x_mean) / x_sd, y=(train.y - y_mean) / y_sd, normalization=meta
    )
    test_norm = replace(
        test, X=(test.X - x_mean) / x_sd, y=(test.y - y_mean) / y_sd, normalization=meta
    )
    return train_norm, test_norm, meta


def denormalize(dataset: Dataset) -> Dataset:
    """Invert `normalize` using the metadata carried by the dataset."""
    meta = dataset.normalization
    if meta is None:
        raise ValueError("dataset carries no normalization metadata")
    return replace(
        dataset,
        X=dataset.X * meta.x_sd + meta.x_mean,
        y=dataset.y * meta.y_sd + meta.y_mean,
        normalization=None,
    )


def save_csv(dataset: Dataset, path: str | Path) -> None:
    """Write `x1,...,xD,y` rows with shortest round-trip float formatting."""
    path = Path(path)
    header = [f"x{j + 1}" for j in range(dataset.input_dim)] + ["y"]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(dataset.n):
            writer.writerow([repr(float(v)) for v in dataset.X[i]] + [repr(float(dataset.y[i]))])


def load_csv(path: str | Path) -> Dataset:
    """Read a dataset written by save_csv (or any numeric CSV with the same
    header convention). The last column is the response."""
    path = Path(path)
    with path.open("r", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: no data rows") from None
        _check_header(path, header)
        dim = len(header) - 1
        xs: list[list[float]] = []
        ys: list[float] = []
        for row_num, row in enumerate(reader, start=2):
            if len(row) != dim + 1:
                raise ValueError(f"{path}:{row_num}: expected {dim + 1} columns, got {len(row)}")
            values = []
            for col_num, cell in enumerate(row, start=1):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise ValueError(
                        f"{path}:{row_num}: column {col_num}: non-numeric cell {cell!r}"
                    ) from None
            xs.append(values[:-1])
            ys.append(values[-1])
    if not xs:
        raise ValueError(f"{path}: no data rows")
    return Dataset(X=np.array(xs), y=np.array(ys))


def _check_header(path: Path, header: list[str]) -> None:
    if len(header) < 2 or header[-1] != "y":
        raise ValueError(f"{path}: header must be x1,...,xD,y, got {header}")
    for j, name in enumerate(header[:-1]):
        if name != f"x{j + 1}":
            raise ValueError(f"{path}: header column {j + 1} is {name!r}, expected 'x{j + 1}'")
