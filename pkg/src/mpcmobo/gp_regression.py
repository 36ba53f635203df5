"""Gaussian-process regression with an isotropic squared-exponential kernel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.spatial.distance import cdist, pdist

JITTERS = (1e-10, 1e-8, 1e-6)
LENGTH_FACTORS = np.geomspace(0.05, 5.0, 10)
SIGNAL_FACTORS = (0.25, 1.0, 4.0)
NOISE_FACTORS = (1e-6, 1e-4, 1e-2)


class IllConditionedKernelError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    signal_var: float
    length_scale: float
    noise_var: float

    def __post_init__(self):
        if not self.signal_var > 0 or not self.length_scale > 0 or not self.noise_var >= 0:
            raise ValueError(f"invalid hyperparameters {self}")


def kernel(a, b, signal_var: float, length_scale: float):
    """``signal_var * exp(-||a - b||^2 / (2 l^2))``; matrices of rows give the Gram matrix."""
    if not length_scale > 0:
        raise ValueError("length scale must be positive")
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.ndim == 1 and b.ndim == 1:
        d2 = float(np.sum((a - b) ** 2))
        return signal_var * np.exp(-0.5 * d2 / length_scale**2)
    d2 = cdist(np.atleast_2d(a), np.atleast_2d(b), "sqeuclidean")
    return signal_var * np.exp(-0.5 * d2 / length_scale**2)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.atleast_2d(np.asarray(X, float))
        std = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(std > 0, std, 1.0))

    def __call__(self, X):
        return (np.asarray(X, float) - self.mean) / self.scale


@dataclass(frozen=True)
class GpModel:
    """A fitted GP. Inputs are stored raw; the kernel sees ``standardizer(X)``."""

    inputs: np.ndarray
    targets: np.ndarray
    hyper: Hyperparams
    standardizer: Standardizer
    target_mean: float
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    def _z(self, X):
        return self.standardizer(np.atleast_2d(np.asarray(X, float)))


def _has_duplicates(Z) -> bool:
    return np.unique(Z, axis=0).shape[0] < Z.shape[0]


def fit(inputs, targets, hyper: Hyperparams, standardize: bool = True, center: bool = True) -> GpModel:
    """Factorize ``K + noise_var I`` and cache ``(K + noise_var I)^{-1} (y - mean)``.

    Jitter of at most ``1e-6`` is added on breakdown, at most three times.

    Raises:
        IllConditionedKernelError: for duplicate inputs without noise, or when
            the factorization fails even with jitter.
    """
    X = np.atleast_2d(np.asarray(inputs, float))
    y = np.asarray(targets, float).ravel()
    if X.shape[0] != y.size or y.size < 1:
        raise ValueError("need at least one input row per target")
    std = Standardizer.fit(X) if standardize else Standardizer.identity(X.shape[1])
    Z = std(X)
    if hyper.noise_var == 0.0 and _has_duplicates(Z):
        raise IllConditionedKernelError("duplicate inputs with zero noise give a singular kernel matrix")
    y_mean = float(y.mean()) if center else 0.0
    K = kernel(Z, Z, hyper.signal_var, hyper.length_scale)
    K[np.diag_indices_from(K)] += hyper.noise_var
    jitter = 0.0
    for extra in (0.0,) + JITTERS:
        try:
            Kj = K if extra == 0.0 else K + extra * hyper.signal_var * np.eye(len(y))
            L = np.linalg.cholesky(Kj)
            jitter = extra
            break
        except np.linalg.LinAlgError:
            continue
    else:
        raise IllConditionedKernelError("Cholesky failed after maximum jitter")
    alpha = sla.cho_solve((L, True), y - y_mean)
    return GpModel(X.copy(), y.copy(), hyper, std, y_mean, L, alpha, jitter)


def predict(model: GpModel, query):
    """Posterior mean and latent variance (clipped at zero).

    A single point returns scalars, a matrix of rows returns arrays.
    """
    q = np.asarray(query, float)
    single = q.ndim == 1
    Zq = model._z(q)
    Zt = model._z(model.inputs)
    h = model.hyper
    Ks = kernel(Zq, Zt, h.signal_var, h.length_scale)
    mean = model.target_mean + Ks @ model.alpha
    v = sla.solve_triangular(model.chol, Ks.T, lower=True)
    var = np.maximum(h.signal_var - np.sum(v * v, axis=0), 0.0)
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def log_marginal_likelihood(model: GpModel) -> float:
    r = model.targets - model.target_mean
    return float(-0.5 * r @ model.alpha - np.sum(np.log(np.diag(model.chol)))
                 - 0.5 * model.n * np.log(2.0 * np.pi))


def hyper_grid(inputs, targets, standardize: bool = True):
    """The candidate hyperparameter triples, ordered by increasing length scale."""
    X = np.atleast_2d(np.asarray(inputs, float))
    std = Standardizer.fit(X) if standardize else Standardizer.identity(X.shape[1])
    Z = std(X)
    d = pdist(Z) if Z.shape[0] > 1 else np.zeros(0)
    d = d[d > 0]
    med = float(np.median(d)) if d.size else 1.0
    var = float(np.var(np.asarray(targets, float)))
    if var <= 0.0:
        var = 1.0  # constant data: every grid point fits it exactly
    return [Hyperparams(sf * var, lf * med, nf * var)
            for lf in LENGTH_FACTORS for sf in SIGNAL_FACTORS for nf in NOISE_FACTORS]


def select_hyperparams(inputs, targets, standardize: bool = True) -> Hyperparams:
    """Grid maximizer of the log marginal likelihood; ties go to the smaller length scale.

    Constant targets are fitted exactly by every grid point, so the smallest
    length scale with unit signal and the smallest noise is returned.
    """
    y = np.asarray(targets, float).ravel()
    if y.size < 3:
        raise ValueError("hyperparameter selection needs at least 3 observations")
    grid = hyper_grid(inputs, y, standardize)
    if np.ptp(y) == 0.0:
        return Hyperparams(SIGNAL_FACTORS[1], grid[0].length_scale, NOISE_FACTORS[0])
    best, best_lml = None, -np.inf
    for h in grid:
        try:
            lml = log_marginal_likelihood(fit(inputs, y, h, standardize))
        except IllConditionedKernelError:
            continue
        if lml > best_lml:
            best, best_lml = h, lml
    if best is None:
        raise IllConditionedKernelError("no grid point gave a usable factorization")
    return best


def fit_auto(inputs, targets, standardize: bool = True) -> GpModel:
    return fit(inputs, targets, select_hyperparams(inputs, targets, standardize), standardize)
