"""Posterior sampling by simulating the controlled SDE backward from an observation.

With control ``u(x, tau) = grad_x S(x, tau)`` built for horizon ``T`` and an
observation ``Y_s = y_obs`` (``s <= T``), the sampler runs

    Z_{k+1} = Z_k + (D u(Z_k, tau_k + T - s) - b(Z_k, s - tau_k)) dtau
              + sqrt(eps dtau) sigma xi_k,        Z_0 = y_obs,

so the state at ``tau = s - t`` approximates ``Y_t | Y_s = y_obs``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .models import (BLOCK_SIZE, STREAM_POSTERIOR, PathEnsemble, SdeModel, SimulationError,
                     TimeGrid, block_generator)


class ControlField:
    """Evaluates ``grad_x S(x, tau)`` for a batch of states on ``tau in [0, horizon)``."""

    horizon: float

    def evaluate(self, x: np.ndarray, tau: float) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x, tau):
        return self.evaluate(x, tau)


class FunctionControl(ControlField):
    """Wraps a plain callable ``f(x, tau)``; mostly useful in tests."""

    def __init__(self, fn, horizon: float):
        self.fn = fn
        self.horizon = float(horizon)

    def evaluate(self, x, tau):
        return np.broadcast_to(np.asarray(self.fn(x, tau), dtype=float), x.shape)


@dataclass(frozen=True)
class ObservationSpec:
    y_obs: np.ndarray
    s: float
    targets: tuple

    def __init__(self, y_obs, s: float, targets: Sequence[float] = (0.0,)):
        y = np.atleast_1d(np.asarray(y_obs, dtype=float))
        targets = tuple(sorted(float(t) for t in targets))
        if not s > 0:
            raise ValueError("observation time must be positive")
        if any(t < 0 or t >= s for t in targets):
            raise ValueError("target times must lie in [0, s)")
        object.__setattr__(self, "y_obs", y)
        object.__setattr__(self, "s", float(s))
        object.__setattr__(self, "targets", targets)


def sample_posterior(model: SdeModel, control: ControlField, obs: ObservationSpec, dtau: float,
                     count: int, seed: int, deterministic: bool = False) -> PathEnsemble:
    """Draw ``count`` controlled paths from ``obs.y_obs`` over ``tau in [0, s]``.

    Only the slices at ``tau = s - t`` for the requested target times (plus
    ``tau = 0``) are stored; ``ensemble.times`` holds the *forward* times
    ``t``, in the order the sampler reaches them (descending).
    """
    s = obs.s
    if control.horizon < s - 1e-12:
        raise ValueError(f"control horizon {control.horizon} does not cover s={s}")
    if obs.y_obs.size != model.dimension:
        raise ValueError("observation dimension does not match the model")
    grid = TimeGrid.covering(s, dtau)
    K = grid.steps
    record = {0: 0}
    for t in obs.targets:
        k = (s - t) / dtau
        if abs(k - round(k)) > 1e-6:
            raise ValueError(f"target time {t} is not a node of the dtau={dtau} grid")
        record.setdefault(int(round(k)), len(record))
    order = sorted(record)
    slot = {k: i for i, k in enumerate(order)}
    times = np.array([s - k * dtau for k in order])

    shift = control.horizon - s
    D = model.diffusion_matrix()
    identity_D = np.allclose(D, np.eye(model.dimension))
    scale = np.sqrt(model.epsilon * dtau)
    n = model.dimension
    values = np.empty((count, len(order), n))
    for b0 in range(0, count, BLOCK_SIZE):
        b1 = min(b0 + BLOCK_SIZE, count)
        rng = block_generator(seed, b0 // BLOCK_SIZE, STREAM_POSTERIOR)
        z = np.tile(obs.y_obs, (b1 - b0, 1))
        values[b0:b1, 0] = z
        for k in range(K):
            tau = k * dtau
            xi = rng.standard_normal((BLOCK_SIZE, model.noise_dim))[: b1 - b0]
            u = control.evaluate(z, tau + shift)
            if not identity_D:
                u = u @ D.T
            z = z + (u - model.drift(z, s - tau)) * dtau
            if not deterministic:
                z += scale * model.noise(xi)
            if not np.all(np.isfinite(z)):
                bad = int(np.flatnonzero(~np.all(np.isfinite(z), axis=1))[0])
                raise SimulationError("non-finite state in posterior sampling", b0 + bad, k + 1)
            if k + 1 in slot:
                values[b0:b1, slot[k + 1]] = z
    return PathEnsemble(grid, times, values, seed)


def posterior_slice(ensemble: PathEnsemble, t: float) -> np.ndarray:
    """Samples approximating ``Y_t | Y_s = y_obs`` (the ``tau = s - t`` slice)."""
    return ensemble.at(t)


def slice_to_csv(samples: np.ndarray, path) -> None:
    """Write ``path,x1..xn`` rows."""
    n = samples.shape[1]
    header = ",".join(["path"] + [f"x{i + 1}" for i in range(n)])
    idx = np.arange(samples.shape[0])[:, None]
    np.savetxt(path, np.hstack([idx, samples]), delimiter=",", header=header, comments="",
               fmt=["%d"] + ["%.17g"] * n)
