"""Forward SDE models and Euler-Maruyama simulation of path ensembles.

A model is ``dY_t = b(Y_t, t) dt + sqrt(eps) sigma dW_t`` with a constant
noise matrix ``sigma`` (identity unless given).

Random numbers are drawn per *block* of ``BLOCK_SIZE`` consecutive paths.
Block ``b`` owns the generator seeded by ``SeedSequence(seed,
spawn_key=(stream, b))`` and always draws noise for the full block, so the
noise of path ``j`` depends only on ``(seed, stream, j)`` and never on the
total number of paths requested.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

BLOCK_SIZE = 8192

# stream ids keep noise used for different purposes independent
STREAM_FORWARD = 1
STREAM_POSTERIOR = 2

MatrixFn = Union[np.ndarray, Callable[[float], np.ndarray]]


class SimulationError(RuntimeError):
    """A simulated state became non-finite."""

    def __init__(self, message: str, path: int, step: int):
        super().__init__(f"{message} (path {path}, step {step})")
        self.path = path
        self.step = step


class UnsupportedOperation(ValueError):
    pass


def block_generator(seed: int, block: int, stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream), int(block)))
    return np.random.Generator(np.random.Philox(ss))


def _as_time_fn(value, shape) -> Callable[[float], np.ndarray]:
    if callable(value):
        return value
    arr = np.zeros(shape) if value is None else np.asarray(value, dtype=float).reshape(shape)
    return lambda t: arr


@dataclass(frozen=True)
class SdeModel:
    """``dY = b(Y, t) dt + sqrt(epsilon) * sigma dW`` on ``[0, horizon]``.

    Use the :meth:`brownian`, :meth:`linear` and :meth:`general`
    constructors rather than building the dataclass by hand.
    """

    dimension: int
    epsilon: float
    horizon: float
    drift_kind: str
    drift_fn: Optional[Callable[[np.ndarray, float], np.ndarray]] = None
    A: Optional[Callable[[float], np.ndarray]] = None
    beta: Optional[Callable[[float], np.ndarray]] = None
    sigma: Optional[np.ndarray] = field(default=None, repr=False)
    # linear drifts with constant coefficients keep them for serialisation
    constant_A: Optional[np.ndarray] = field(default=None, repr=False)
    constant_beta: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.drift_kind not in ("zero", "linear", "general"):
            raise ValueError(f"unknown drift kind {self.drift_kind!r}")
        if self.sigma is not None and self.sigma.shape[0] != self.dimension:
            raise ValueError("sigma must have one row per state coordinate")

    @classmethod
    def brownian(cls, dimension: int, epsilon: float, horizon: float, sigma=None) -> "SdeModel":
        return cls(dimension, float(epsilon), float(horizon), "zero", sigma=_noise_matrix(sigma))

    @classmethod
    def linear(cls, A: MatrixFn, epsilon: float, horizon: float, beta: MatrixFn = None,
               sigma=None) -> "SdeModel":
        """Linear drift ``b(x, t) = A(t) x + beta(t)``; A and beta may be constants."""
        if callable(A):
            n = np.atleast_2d(A(0.0)).shape[0]
        else:
            n = np.atleast_2d(np.asarray(A, dtype=float)).shape[0]
        const_A = None if callable(A) else np.atleast_2d(np.asarray(A, dtype=float))
        const_beta = None
        if not callable(beta):
            const_beta = np.zeros(n) if beta is None else np.asarray(beta, dtype=float).reshape(n)
        return cls(n, float(epsilon), float(horizon), "linear",
                   A=_as_time_fn(A, (n, n)), beta=_as_time_fn(beta, (n,)),
                   sigma=_noise_matrix(sigma), constant_A=const_A, constant_beta=const_beta)

    @classmethod
    def general(cls, drift: Callable[[np.ndarray, float], np.ndarray], dimension: int,
                epsilon: float, horizon: float, sigma=None) -> "SdeModel":
        """Arbitrary drift; ``drift(x, t)`` must accept a batch ``x`` of shape (N, n)."""
        return cls(dimension, float(epsilon), float(horizon), "general", drift_fn=drift,
                   sigma=_noise_matrix(sigma))

    def drift(self, x: np.ndarray, t: float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.drift_kind == "zero":
            return np.zeros_like(x)
        if self.drift_kind == "linear":
            return x @ self.A(t).T + self.beta(t)
        return np.asarray(self.drift_fn(x, t), dtype=float)

    def diffusion_matrix(self) -> np.ndarray:
        """D = sigma sigma^T (identity when sigma is not set)."""
        if self.sigma is None:
            return np.eye(self.dimension)
        return self.sigma @ self.sigma.T

    @property
    def noise_dim(self) -> int:
        return self.dimension if self.sigma is None else self.sigma.shape[1]

    def noise(self, xi: np.ndarray) -> np.ndarray:
        """Map standard normal draws (N, m) to state increments (N, n) before scaling."""
        return xi if self.sigma is None else xi @ self.sigma.T


def _noise_matrix(sigma) -> Optional[np.ndarray]:
    if sigma is None:
        return None
    return np.atleast_2d(np.asarray(sigma, dtype=float))


def drift_divergence(model: SdeModel, x=None, t: float = 0.0) -> float:
    """Divergence of the drift; only defined for zero and linear drifts (Tr A(t))."""
    if model.drift_kind == "zero":
        return 0.0
    if model.drift_kind == "linear":
        return float(np.trace(model.A(t)))
    raise UnsupportedOperation("drift divergence is only available for zero or linear drifts")


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    dt: float
    steps: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.steps < 1:
            raise ValueError("steps must be positive")

    @classmethod
    def covering(cls, horizon: float, dt: float, t0: float = 0.0) -> "TimeGrid":
        """Uniform grid from t0 to horizon; ``dt`` must divide the span to rounding."""
        steps = int(round((horizon - t0) / dt))
        if steps < 1 or abs(steps * dt - (horizon - t0)) > 1e-9 * max(1.0, horizon):
            raise ValueError(f"dt={dt} does not divide [{t0}, {horizon}]")
        return cls(float(t0), float(dt), steps)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    @property
    def end(self) -> float:
        return self.t0 + self.dt * self.steps


@dataclass(frozen=True)
class PathEnsemble:
    """Sample paths stored as ``values[path, slice, coordinate]``.

    ``times`` holds the time of each stored slice. Forward training ensembles
    store every grid node; posterior ensembles may store only requested
    slices (``times`` is then a subset of the grid).
    """

    grid: TimeGrid
    times: np.ndarray
    values: np.ndarray
    seed: int

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def dimension(self) -> int:
        return self.values.shape[2]

    def slice_index(self, t: float) -> int:
        hits = np.flatnonzero(np.isclose(self.times, t, rtol=0.0, atol=1e-9))
        if hits.size == 0:
            raise KeyError(f"no stored slice at time {t}")
        return int(hits[0])

    def at(self, t: float) -> np.ndarray:
        return self.values[:, self.slice_index(t), :]

    def to_csv(self, path, time_label: str = "t") -> None:
        """Write ``path,k,t,x1..xn`` rows (k is the grid node index)."""
        n = self.dimension
        node = np.rint((self.times - self.grid.t0) / self.grid.dt).astype(int)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "k", time_label] + [f"x{i + 1}" for i in range(n)])
            for j in range(self.n_paths):
                for s, k in enumerate(node):
                    w.writerow([j, int(k), repr(float(self.times[s]))]
                               + [repr(float(v)) for v in self.values[j, s]])


def simulate_forward(model: SdeModel, prior_samples, grid: TimeGrid, seed: int,
                     deterministic: bool = False) -> PathEnsemble:
    """Euler-Maruyama paths ``Y_{k+1} = Y_k + b(Y_k, t_k) dt + sqrt(eps dt) sigma xi_k``.

    Row 0 of every path is the corresponding prior sample. ``deterministic``
    replaces every ``xi`` by zero.
    """
    y0 = np.asarray(prior_samples, dtype=float)
    if y0.ndim == 1:
        y0 = y0.reshape(-1, model.dimension) if model.dimension > 1 else y0[:, None]
    if y0.shape[0] == 0:
        raise ValueError("need at least one prior sample")
    if y0.shape[1] != model.dimension:
        raise ValueError(f"prior samples have dimension {y0.shape[1]}, model has {model.dimension}")
    if grid.end > model.horizon + grid.dt / 2:
        raise ValueError("time grid extends beyond the model horizon")

    N, n = y0.shape
    K = grid.steps
    times = grid.times
    values = np.empty((N, K + 1, n))
    scale = np.sqrt(model.epsilon * grid.dt)
    for b0 in range(0, N, BLOCK_SIZE):
        b1 = min(b0 + BLOCK_SIZE, N)
        rng = block_generator(seed, b0 // BLOCK_SIZE, STREAM_FORWARD)
        y = y0[b0:b1].copy()
        values[b0:b1, 0] = y
        for k in range(K):
            xi = rng.standard_normal((BLOCK_SIZE, model.noise_dim))[: b1 - b0]
            y = y + model.drift(y, times[k]) * grid.dt
            if not deterministic:
                y += scale * model.noise(xi)
            values[b0:b1, k + 1] = y
            if not np.all(np.isfinite(y)):
                bad = int(np.flatnonzero(~np.all(np.isfinite(y), axis=1))[0])
                raise SimulationError("non-finite state in forward simulation", b0 + bad, k + 1)
    return PathEnsemble(grid, times, values, seed)
