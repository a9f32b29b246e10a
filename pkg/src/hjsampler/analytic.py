"""Closed-form controls and exact posteriors.

Covered cases (``S(x, T - t) = eps * log p_t(x)`` with ``p_t`` the law of Y_t):

* ``brownian_gaussian_mixture`` -- zero drift, Gaussian-mixture prior, any n;
* ``brownian_uniform_mixture_1d`` -- zero drift, 1D mixture of uniforms;
* ``ou1d_gaussian`` -- ``dY = -B Y dt + sqrt(eps) dW`` in 1D, Gaussian prior.

The Gaussian cases share one linear-Gaussian description: conditionally on
``Y_0 = y``, ``Y_t ~ N(a(t) y, eps v(t) I)`` with ``a = 1, v = t`` for
Brownian motion and ``a = exp(-B t), v = (1 - exp(-2 B t)) / (2 B)`` for OU.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from ._gauss import LOG_2PI, log_ndtr_diff, log_norm_pdf, quadratic_terms, softmax_rows
from .models import SdeModel
from .priors import (GaussianComponent, GaussianMixturePrior, UniformMixturePrior, as_generator,
                     as_mixture)
from .sampler import ControlField

log = logging.getLogger(__name__)

CONTROL_CLAMP = 1e6
GRID_POINTS = 4096
GRID_HALF_WIDTH = 8.0

TAGS = ("brownian_gaussian_mixture", "brownian_uniform_mixture_1d", "ou1d_gaussian")


class AnalyticError(ValueError):
    pass


@dataclass(frozen=True)
class AnalyticCase:
    model: SdeModel
    prior: Union[GaussianMixturePrior, GaussianComponent, UniformMixturePrior]
    tag: str = ""

    def __post_init__(self):
        tag = self.tag or _infer_tag(self.model, self.prior)
        if tag not in TAGS:
            raise AnalyticError(f"unknown analytic case {tag!r}")
        m, p = self.model, self.prior
        if m.sigma is not None and not np.allclose(m.diffusion_matrix(), np.eye(m.dimension)):
            raise AnalyticError("analytic cases need identity noise")
        if tag == "brownian_gaussian_mixture":
            ok = m.drift_kind == "zero" and isinstance(p, (GaussianMixturePrior, GaussianComponent))
        elif tag == "brownian_uniform_mixture_1d":
            ok = m.drift_kind == "zero" and m.dimension == 1 and isinstance(p, UniformMixturePrior)
        else:
            ok = (m.drift_kind == "linear" and m.dimension == 1
                  and m.constant_A is not None and m.constant_A[0, 0] < 0
                  and m.constant_beta is not None and m.constant_beta[0] == 0
                  and isinstance(p, (GaussianMixturePrior, GaussianComponent))
                  and len(as_mixture(p).components) == 1)
        if not ok:
            raise AnalyticError(f"model/prior do not match analytic case {tag!r}")
        object.__setattr__(self, "tag", tag)

    @property
    def horizon(self) -> float:
        return self.model.horizon

    @property
    def epsilon(self) -> float:
        return self.model.epsilon

    # linear-Gaussian coefficients, see module docstring
    def _a(self, t: float) -> float:
        if self.tag == "ou1d_gaussian":
            return float(np.exp(-self._rate * t))
        return 1.0

    def _v(self, t: float) -> float:
        if self.tag == "ou1d_gaussian":
            B = self._rate
            return float(-np.expm1(-2.0 * B * t) / (2.0 * B))
        return float(t)

    @property
    def _rate(self) -> float:
        return float(-self.model.constant_A[0, 0])

    def _marginal_mixture(self, t: float):
        """(log weights, means, covariances) of the Gaussian-mixture law of Y_t."""
        mix = as_mixture(self.prior)
        a, v = self._a(t), self._v(t)
        n = mix.dimension
        covs = a * a * mix.covs + self.epsilon * v * np.eye(n)
        return np.log(mix.weights), a * mix.means, covs


def _infer_tag(model: SdeModel, prior) -> str:
    if model.drift_kind == "zero":
        if isinstance(prior, UniformMixturePrior):
            return "brownian_uniform_mixture_1d"
        return "brownian_gaussian_mixture"
    return "ou1d_gaussian"


def _points(x, n):
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, 1) if (n == 1 and x.ndim <= 1) else np.atleast_2d(x)


def log_marginal(case: AnalyticCase, x, t: float) -> np.ndarray:
    """``log p_t(x)``, the log-density of Y_t."""
    x = _points(x, case.model.dimension)
    if case.tag == "brownian_uniform_mixture_1d":
        return _uniform_log_marginal(case, x[:, 0], t)
    logw, means, covs = case._marginal_mixture(t)
    quad, _, logdet = quadratic_terms(x, means, covs)
    n = means.shape[1]
    return logsumexp(logw[:, None] - 0.5 * (quad + n * LOG_2PI + logdet[:, None]), axis=0)


def _uniform_terms(case, x, t):
    pr: UniformMixturePrior = case.prior
    sd = np.sqrt(case.epsilon * t)
    u = (x[None, :] - pr.lows[:, None]) / sd
    v = (x[None, :] - pr.highs[:, None]) / sd
    logc = np.log(pr.weights / (pr.highs - pr.lows))[:, None]
    return u, v, logc, sd


def _uniform_log_marginal(case, x, t):
    if t == 0:
        return case.prior.log_density(x)
    u, v, logc, _ = _uniform_terms(case, x, t)
    return logsumexp(logc + log_ndtr_diff(u, v), axis=0)


class AnalyticControl(ControlField):
    """``grad_x S(x, tau) = eps * grad log p_{T - tau}(x)`` from the closed-form marginal."""

    def __init__(self, case: AnalyticCase):
        self.case = case
        self.horizon = case.horizon
        self._warned = False

    def evaluate(self, x: np.ndarray, tau: float) -> np.ndarray:
        c = self.case
        if not 0 <= tau < c.horizon + 1e-12:
            raise ValueError(f"tau={tau} outside [0, {c.horizon})")
        t = c.horizon - tau
        x = _points(x, c.model.dimension)
        if c.tag == "brownian_uniform_mixture_1d":
            out = self._uniform(x[:, 0], t)[:, None]
        else:
            logw, means, covs = c._marginal_mixture(t)
            quad, sol, logdet = quadratic_terms(x, means, covs)
            p = softmax_rows(logw[:, None] - 0.5 * (quad + logdet[:, None]))
            out = -c.epsilon * np.einsum("mi,min->in", p, sol)
        if not np.all(np.isfinite(out)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(out), axis=1))[0])
            raise AnalyticError(f"non-finite control at x={x[bad]}, tau={tau}")
        return out

    def _uniform(self, x, t):
        c = self.case
        if t <= 0:
            raise AnalyticError("uniform-mixture control is singular at the prior time")
        u, v, logc, sd = _uniform_terms(c, x, t)
        logden = logc + log_ndtr_diff(u, v)
        shift = np.max(logden, axis=0)
        den = np.sum(np.exp(logden - shift), axis=0)
        num = np.sum(np.exp(logc + log_norm_pdf(u) - shift) - np.exp(logc + log_norm_pdf(v) - shift),
                     axis=0)
        out = c.epsilon / sd * num / den
        big = ~(np.abs(out) <= CONTROL_CLAMP)
        if np.any(big):
            if not self._warned:
                log.warning("uniform-mixture control clamped to %g at t=%g", CONTROL_CLAMP, t)
                self._warned = True
            out = np.where(np.isnan(out), 0.0, np.clip(out, -CONTROL_CLAMP, CONTROL_CLAMP))
        return out


def control(case: AnalyticCase, x, tau: float) -> np.ndarray:
    return AnalyticControl(case).evaluate(x, tau)


# --- exact posteriors -------------------------------------------------------

class GaussianMixturePosterior:
    def __init__(self, log_weights, means, covs):
        lw = np.asarray(log_weights, dtype=float)
        self.weights = np.exp(lw - logsumexp(lw))
        self.means = np.asarray(means, dtype=float)
        self.covs = np.asarray(covs, dtype=float)
        for c in self.covs:
            try:
                np.linalg.cholesky(c)
            except np.linalg.LinAlgError as exc:
                raise AnalyticError("posterior covariance is not positive definite") from exc

    @property
    def dimension(self) -> int:
        return self.means.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def log_density(self, x) -> np.ndarray:
        x = _points(x, self.dimension)
        quad, _, logdet = quadratic_terms(x, self.means, self.covs)
        n = self.dimension
        return logsumexp(np.log(self.weights)[:, None]
                         - 0.5 * (quad + n * LOG_2PI + logdet[:, None]), axis=0)

    def sample(self, count: int, seed) -> np.ndarray:
        mix = GaussianMixturePrior.from_arrays(self.means, self.covs,
                                               self.weights / self.weights.sum())
        return mix.sample(count, seed)


class TruncatedNormalMixturePosterior:
    """1D mixture of normals ``N(center, sd^2)`` truncated to ``[a_j, b_j)``."""

    def __init__(self, log_weights, lows, highs, center, sd):
        lw = np.asarray(log_weights, dtype=float)
        keep = np.isfinite(lw)
        if not np.any(keep):
            raise AnalyticError("observation has zero likelihood under every interval")
        self.weights = np.exp(lw[keep] - logsumexp(lw[keep]))
        self.lows, self.highs = np.asarray(lows)[keep], np.asarray(highs)[keep]
        self.center, self.sd = float(center), float(sd)

    dimension = 1

    def density(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        out = np.zeros_like(x)
        for w, a, b in zip(self.weights, self.lows, self.highs):
            alpha, beta = (a - self.center) / self.sd, (b - self.center) / self.sd
            z = np.exp(log_ndtr_diff(beta, alpha))
            inside = (x >= a) & (x < b)
            out[inside] += w * stats.norm.pdf(x[inside], self.center, self.sd) / z
        return out

    def log_density(self, x):
        with np.errstate(divide="ignore"):
            return np.log(self.density(x))

    def sample(self, count: int, seed) -> np.ndarray:
        rng = as_generator(seed)
        labels = rng.choice(len(self.weights), size=count, p=self.weights)
        out = np.empty(count)
        for j, (a, b) in enumerate(zip(self.lows, self.highs)):
            mask = labels == j
            alpha, beta = (a - self.center) / self.sd, (b - self.center) / self.sd
            out[mask] = stats.truncnorm.rvs(alpha, beta, loc=self.center, scale=self.sd,
                                            size=int(mask.sum()), random_state=rng)
        return out[:, None]


class GridPosterior:
    """1D density tabulated on a uniform grid; samples by inverse CDF."""

    def __init__(self, grid: np.ndarray, log_density: np.ndarray):
        self.grid = np.asarray(grid, dtype=float)
        pdf = np.exp(log_density - np.max(log_density))
        h = self.grid[1] - self.grid[0]
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1]) * h)])
        self.pdf = pdf / cdf[-1]
        self.cdf = cdf / cdf[-1]

    dimension = 1

    def density(self, x) -> np.ndarray:
        return np.interp(np.asarray(x, dtype=float).reshape(-1), self.grid, self.pdf,
                         left=0.0, right=0.0)

    def log_density(self, x):
        with np.errstate(divide="ignore"):
            return np.log(self.density(x))

    def mean(self) -> float:
        return float(np.trapezoid(self.grid * self.pdf, self.grid))

    def sample(self, count: int, seed) -> np.ndarray:
        u = as_generator(seed).random(count)
        # invert the piecewise-linear density exactly on each cell
        k = np.clip(np.searchsorted(self.cdf, u, side="right") - 1, 0, self.grid.size - 2)
        h = self.grid[1] - self.grid[0]
        p0, p1 = self.pdf[k], self.pdf[k + 1]
        r = u - self.cdf[k]
        slope = (p1 - p0) / h
        with np.errstate(divide="ignore", invalid="ignore"):
            quad = (-p0 + np.sqrt(np.maximum(p0 * p0 + 2.0 * slope * r, 0.0))) / slope
        dx = np.where(np.abs(slope) * h > 1e-12 * np.maximum(p0, 1e-300),
                      quad, r / np.maximum(p0, 1e-300))
        return (self.grid[k] + np.clip(dx, 0.0, h))[:, None]


ExactPosterior = Union[GaussianMixturePosterior, TruncatedNormalMixturePosterior, GridPosterior]


def exact_posterior(case: AnalyticCase, t: float, s: float, y_obs) -> ExactPosterior:
    """Law of ``Y_t | Y_s = y_obs`` for ``0 <= t < s <= T``."""
    if not 0 <= t < s:
        raise ValueError(f"need 0 <= t < s, got t={t}, s={s}")
    if s > case.horizon + 1e-12:
        raise ValueError("observation time beyond the model horizon")
    y = np.atleast_1d(np.asarray(y_obs, dtype=float))
    if case.tag == "brownian_uniform_mixture_1d":
        return _uniform_posterior(case, t, s, float(y[0]))

    eps = case.epsilon
    logw_t, m_t, C_t = case._marginal_mixture(t)
    a = case._a(s - t)
    lik_var = eps * case._v(s - t)
    n = m_t.shape[1]
    I = np.eye(n)
    covs, means = [], []
    for m, C in zip(m_t, C_t):
        Cinv = np.linalg.inv(C)
        M = np.linalg.inv(Cinv + (a * a / lik_var) * I)
        M = 0.5 * (M + M.T)
        covs.append(M)
        means.append(M @ (Cinv @ m + a * y / lik_var))
    # component evidence: Y_s marginal of each component at y
    logw_s, m_s, C_s = case._marginal_mixture(s)
    quad, _, logdet = quadratic_terms(y[None, :], m_s, C_s)
    log_ev = logw_s - 0.5 * (quad[:, 0] + logdet)
    return GaussianMixturePosterior(log_ev, np.array(means), np.array(covs))


def _uniform_posterior(case: AnalyticCase, t, s, y):
    pr: UniformMixturePrior = case.prior
    eps = case.epsilon
    lik_sd = np.sqrt(eps * (s - t))
    if t == 0:
        logc = np.log(pr.weights / (pr.highs - pr.lows))
        logz = log_ndtr_diff((pr.highs - y) / lik_sd, (pr.lows - y) / lik_sd)
        return TruncatedNormalMixturePosterior(logc + logz, pr.lows, pr.highs, y, lik_sd)
    spread = np.sqrt(eps * t)
    lo = max(y - GRID_HALF_WIDTH * lik_sd, pr.lows.min() - GRID_HALF_WIDTH * spread)
    hi = min(y + GRID_HALF_WIDTH * lik_sd, pr.highs.max() + GRID_HALF_WIDTH * spread)
    if not lo < hi:
        lo, hi = y - GRID_HALF_WIDTH * lik_sd, y + GRID_HALF_WIDTH * lik_sd
    grid = np.linspace(lo, hi, GRID_POINTS)
    logp = _uniform_log_marginal(case, grid, t) - 0.5 * ((grid - y) / lik_sd) ** 2
    return GridPosterior(grid, logp)


def exact_posterior_sample(posterior: ExactPosterior, count: int, seed) -> np.ndarray:
    return posterior.sample(count, seed)
