"""Prior laws for the initial state Y_0."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy.special import logsumexp

from .models import UnsupportedOperation

LOG_2PI = float(np.log(2.0 * np.pi))

RngLike = Union[int, np.random.Generator]


def as_generator(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(rng))))


def _points(x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if n == 1 and x.ndim <= 1:
        return x.reshape(-1, 1)
    return np.atleast_2d(x)


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Log N(x; mean, cov) for a batch ``x`` of shape (N, n), via Cholesky."""
    L = np.linalg.cholesky(cov)
    d = x - mean
    z = np.linalg.solve(L, d.T)
    n = mean.shape[0]
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return -0.5 * (np.sum(z * z, axis=0) + n * LOG_2PI + logdet)


@dataclass(frozen=True)
class GaussianComponent:
    mean: np.ndarray
    cov: np.ndarray

    def __init__(self, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError("covariance shape does not match mean")
        if np.max(np.abs(cov - cov.T)) > 1e-12:
            raise ValueError("covariance is not symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance is not positive definite") from exc
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dimension(self) -> int:
        return self.mean.size

    def sample(self, count: int, rng: RngLike) -> np.ndarray:
        return GaussianMixturePrior([self], [1.0]).sample(count, rng)

    def log_density(self, x) -> np.ndarray:
        return gaussian_logpdf(_points(x, self.dimension), self.mean, self.cov)


@dataclass(frozen=True)
class GaussianMixturePrior:
    components: tuple
    weights: np.ndarray

    def __init__(self, components: Sequence[GaussianComponent], weights=None):
        components = tuple(components)
        if not components:
            raise ValueError("need at least one component")
        if len({c.dimension for c in components}) != 1:
            raise ValueError("components differ in dimension")
        w = np.full(len(components), 1.0 / len(components)) if weights is None \
            else np.asarray(weights, dtype=float)
        if w.shape != (len(components),) or np.any(w <= 0):
            raise ValueError("weights must be positive, one per component")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()}, not 1")
        object.__setattr__(self, "components", components)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_arrays(cls, means, covs, weights=None) -> "GaussianMixturePrior":
        means = np.asarray(means, dtype=float)
        covs = np.asarray(covs, dtype=float)
        if means.ndim == 1:
            # 1D mixture given as scalars
            means = means[:, None]
            covs = covs.reshape(-1, 1, 1)
        return cls([GaussianComponent(m, c) for m, c in zip(means, covs)], weights)

    @property
    def dimension(self) -> int:
        return self.components[0].dimension

    @property
    def means(self) -> np.ndarray:
        return np.stack([c.mean for c in self.components])

    @property
    def covs(self) -> np.ndarray:
        return np.stack([c.cov for c in self.components])

    def sample(self, count: int, rng: RngLike) -> np.ndarray:
        if count < 1:
            raise ValueError("count must be at least 1")
        rng = as_generator(rng)
        labels = rng.choice(len(self.components), size=count, p=self.weights)
        z = rng.standard_normal((count, self.dimension))
        out = np.empty((count, self.dimension))
        for i, c in enumerate(self.components):
            mask = labels == i
            out[mask] = c.mean + z[mask] @ np.linalg.cholesky(c.cov).T
        return out

    def log_density(self, x) -> np.ndarray:
        x = _points(x, self.dimension)
        terms = np.stack([np.log(w) + gaussian_logpdf(x, c.mean, c.cov)
                          for w, c in zip(self.weights, self.components)])
        return logsumexp(terms, axis=0)


@dataclass(frozen=True)
class UniformMixturePrior:
    """1D mixture of uniforms on half-open intervals ``[a_j, b_j)``."""

    intervals: np.ndarray
    weights: np.ndarray

    def __init__(self, intervals, weights=None):
        iv = np.atleast_2d(np.asarray(intervals, dtype=float))
        if iv.shape[1] != 2 or np.any(iv[:, 0] >= iv[:, 1]):
            raise ValueError("intervals must be (a, b) pairs with a < b")
        w = np.full(len(iv), 1.0 / len(iv)) if weights is None else np.asarray(weights, dtype=float)
        if w.shape != (len(iv),) or np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        object.__setattr__(self, "intervals", iv)
        object.__setattr__(self, "weights", w)

    dimension = 1

    @property
    def lows(self) -> np.ndarray:
        return self.intervals[:, 0]

    @property
    def highs(self) -> np.ndarray:
        return self.intervals[:, 1]

    def sample(self, count: int, rng: RngLike) -> np.ndarray:
        rng = as_generator(rng)
        labels = rng.choice(len(self.weights), size=count, p=self.weights)
        u = rng.random(count)
        a, b = self.lows[labels], self.highs[labels]
        return (a + u * (b - a))[:, None]

    def density(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        inside = (x[:, None] >= self.lows) & (x[:, None] < self.highs)
        return inside @ (self.weights / (self.highs - self.lows))

    def log_density(self, x) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.density(x))


@dataclass(frozen=True)
class LogNormalPrior:
    """Independent coordinates with ``log Y_i ~ N(loc_i, scale_i^2)``."""

    loc: np.ndarray
    scale: np.ndarray

    def __init__(self, loc, scale):
        loc = np.atleast_1d(np.asarray(loc, dtype=float))
        scale = np.broadcast_to(np.asarray(scale, dtype=float), loc.shape).copy()
        if np.any(scale <= 0):
            raise ValueError("log-normal scale must be positive")
        object.__setattr__(self, "loc", loc)
        object.__setattr__(self, "scale", scale)

    @property
    def dimension(self) -> int:
        return self.loc.size

    def sample(self, count: int, rng: RngLike) -> np.ndarray:
        rng = as_generator(rng)
        return np.exp(self.loc + self.scale * rng.standard_normal((count, self.dimension)))

    def log_density(self, x) -> np.ndarray:
        x = _points(x, self.dimension)
        out = np.full(x.shape[0], -np.inf)
        ok = np.all(x > 0, axis=1)
        lx = np.log(x[ok])
        z = (lx - self.loc) / self.scale
        out[ok] = np.sum(-lx - np.log(self.scale) - 0.5 * LOG_2PI - 0.5 * z * z, axis=1)
        return out


@dataclass(frozen=True)
class FunctionSeriesPrior:
    """Grid values of ``f(x) = (1/16) sum_j xi_j sin(j pi x)``, ``xi_j ~ U[1, 3)`` i.i.d."""

    n: int
    n_terms: int = 8
    low: float = 1.0
    high: float = 3.0

    @property
    def dimension(self) -> int:
        return self.n

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n)

    def basis(self) -> np.ndarray:
        j = np.arange(1, self.n_terms + 1)
        return np.sin(np.pi * j[:, None] * self.grid[None, :]) / 16.0

    def coefficients(self, count: int, rng: RngLike) -> np.ndarray:
        return as_generator(rng).uniform(self.low, self.high, size=(count, self.n_terms))

    def sample(self, count: int, rng: RngLike) -> np.ndarray:
        return self.coefficients(count, rng) @ self.basis()

    def log_density(self, x):
        raise UnsupportedOperation("the function-series prior has no density on R^n")


Prior = Union[GaussianComponent, GaussianMixturePrior, UniformMixturePrior, LogNormalPrior,
              FunctionSeriesPrior]


def sample(prior: Prior, count: int, seed: RngLike) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be at least 1")
    return prior.sample(count, seed)


def log_density(prior: Prior, x) -> np.ndarray:
    return prior.log_density(x)


def as_mixture(prior) -> GaussianMixturePrior:
    if isinstance(prior, GaussianMixturePrior):
        return prior
    if isinstance(prior, GaussianComponent):
        return GaussianMixturePrior([prior], [1.0])
    raise TypeError(f"{type(prior).__name__} is not a Gaussian (mixture) prior")
