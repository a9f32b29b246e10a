"""Riccati ODE solution of the HJ equation for linear drifts and Gaussian-mixture priors.

For each prior component ``N(theta_j, Sigma_j)`` integrate, from ``t = 0``,

    dQ/dt = D + Q A(t)^T + A(t) Q,            Q(0) = Sigma_j / eps
    dq/dt = A(t) q + beta(t),                 q(0) = theta_j
    dr/dt = (eps / 2) Tr(2 A(t) + D Q^{-1}),  r(0) = (n eps / 2) log(2 pi) + (eps / 2) log det Sigma_j

with explicit Euler. Then ``S_j(x, T - t) = -(1/2)(x - q)^T Q^{-1} (x - q) - r``
and the mixture control is the softmax-weighted combination of
``-Q_j^{-1}(x - q_j)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._gauss import LOG_2PI, quadratic_terms, softmax_rows
from .models import SdeModel, TimeGrid
from .priors import as_mixture
from .sampler import ControlField

STORE_DT = 1e-3


class RiccatiError(RuntimeError):
    pass


@dataclass(frozen=True)
class RiccatiSolution(ControlField):
    grid: TimeGrid
    Q: np.ndarray        # (nodes, M, n, n)
    q: np.ndarray        # (nodes, M, n)
    r: np.ndarray        # (nodes, M)
    weights: np.ndarray  # (M,)
    epsilon: float

    @property
    def horizon(self) -> float:
        return self.grid.end

    @property
    def n_components(self) -> int:
        return self.weights.size

    def at(self, t: float):
        """Linearly interpolated ``(Q, q, r)`` at forward time ``t``."""
        g = self.grid
        if not g.t0 - 1e-12 <= t <= g.end + 1e-12:
            raise ValueError(f"time {t} outside the solved range [{g.t0}, {g.end}]")
        pos = (t - g.t0) / g.dt
        i = int(min(max(np.floor(pos), 0), g.steps - 1))
        w = min(max(pos - i, 0.0), 1.0)
        return ((1 - w) * self.Q[i] + w * self.Q[i + 1],
                (1 - w) * self.q[i] + w * self.q[i + 1],
                (1 - w) * self.r[i] + w * self.r[i + 1])

    def mixture_weights(self, x: np.ndarray, tau: float) -> np.ndarray:
        """Softmax weights ``p_j(x, tau)``, shape (M, N)."""
        logits, _ = self._terms(np.atleast_2d(x), tau)
        return softmax_rows(logits)

    def _terms(self, x, tau):
        Q, q, r = self.at(self.horizon - tau)
        quad, sol, _ = quadratic_terms(x, q, Q)
        logits = np.log(self.weights)[:, None] - quad / (2 * self.epsilon) - r[:, None] / self.epsilon
        return logits, sol

    def evaluate(self, x: np.ndarray, tau: float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, self.Q.shape[-1])
        if not 0 <= tau <= self.horizon + 1e-12:
            raise ValueError(f"tau={tau} outside [0, {self.horizon}]")
        logits, sol = self._terms(x, tau)
        if sol.shape[0] == 1:
            return -sol[0]
        return -np.einsum("mi,min->in", softmax_rows(logits), sol)

    def to_csv(self, path) -> None:
        """Rows ``t,component,Q11..Qnn,q1..qn,r``."""
        n = self.Q.shape[-1]
        head = (["t", "component"] + [f"Q{i + 1}{j + 1}" for i in range(n) for j in range(n)]
                + [f"q{i + 1}" for i in range(n)] + ["r"])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(head)
            for k, t in enumerate(self.grid.times):
                for m in range(self.n_components):
                    w.writerow([repr(float(t)), m] + [repr(float(v)) for v in self.Q[k, m].ravel()]
                               + [repr(float(v)) for v in self.q[k, m]] + [repr(float(self.r[k, m]))])


def solve_riccati(model: SdeModel, prior, ode_step: float,
                  grid: Optional[TimeGrid] = None) -> RiccatiSolution:
    """Integrate the Riccati system for every prior component on ``[0, T]``.

    Values are stored at the nodes of ``grid`` (default: spacing of about
    1e-3, a multiple of ``ode_step``); each grid interval is split into
    equal Euler steps no longer than ``ode_step``.
    """
    if model.drift_kind not in ("zero", "linear"):
        raise ValueError("the Riccati solver needs a zero or linear drift")
    mix = as_mixture(prior)
    n = model.dimension
    if mix.dimension != n:
        raise ValueError("prior and model dimensions differ")
    T = model.horizon
    if grid is None:
        per = max(1, int(round(STORE_DT / ode_step)))
        steps = max(1, int(round(T / (per * ode_step))))
        grid = TimeGrid(0.0, T / steps, steps)
    if ode_step > grid.dt * (1 + 1e-9):
        raise ValueError("ode_step must not exceed the storage grid spacing")
    sub = int(np.ceil(grid.dt / ode_step - 1e-9))
    h = grid.dt / sub

    eps = model.epsilon
    D = model.diffusion_matrix()
    if model.drift_kind == "zero":
        A_of = lambda t: np.zeros((n, n))
        beta_of = lambda t: np.zeros(n)
    else:
        A_of, beta_of = model.A, model.beta

    M = len(mix.components)
    Q = mix.covs / eps
    q = mix.means.copy()
    sign, logdet = np.linalg.slogdet(mix.covs)
    r = 0.5 * n * eps * LOG_2PI + 0.5 * eps * logdet

    nodes = grid.steps + 1
    Qs = np.empty((nodes, M, n, n))
    qs = np.empty((nodes, M, n))
    rs = np.empty((nodes, M))
    Qs[0], qs[0], rs[0] = Q, q, r
    t = grid.t0
    for k in range(grid.steps):
        for i in range(sub):
            ti = grid.t0 + k * grid.dt + i * h
            A = A_of(ti)
            try:
                np.linalg.cholesky(Q)
            except np.linalg.LinAlgError:
                bad = _first_non_spd(Q)
                raise RiccatiError(f"Q lost positive definiteness for component {bad} at t={ti:.6g}")
            tr = np.trace(np.linalg.solve(Q, np.broadcast_to(D, Q.shape)), axis1=1, axis2=2)
            dQ = D + Q @ A.T + A @ Q
            dq = q @ A.T + beta_of(ti)
            dr = 0.5 * eps * (2.0 * np.trace(A) + tr)
            Q = Q + h * dQ
            Q = 0.5 * (Q + np.swapaxes(Q, 1, 2))
            q = q + h * dq
            r = r + h * dr
        t = grid.t0 + (k + 1) * grid.dt
        Qs[k + 1], qs[k + 1], rs[k + 1] = Q, q, r
    try:
        np.linalg.cholesky(Q)
    except np.linalg.LinAlgError:
        raise RiccatiError(f"Q lost positive definiteness for component {_first_non_spd(Q)} at t={t:.6g}")
    return RiccatiSolution(grid, Qs, qs, rs, mix.weights.copy(), eps)


def _first_non_spd(Q) -> int:
    for m, Qm in enumerate(Q):
        try:
            np.linalg.cholesky(Qm)
        except np.linalg.LinAlgError:
            return m
    return -1


def control(sol: RiccatiSolution, x, tau: float) -> np.ndarray:
    return sol.evaluate(x, tau)
