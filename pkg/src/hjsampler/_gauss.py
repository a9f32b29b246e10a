"""Batched Gaussian quadratic forms and stable log-domain helpers."""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import log_ndtr

LOG_2PI = float(np.log(2.0 * np.pi))


def quadratic_terms(x: np.ndarray, centers: np.ndarray, mats: np.ndarray):
    """For each SPD matrix ``C_m`` and center ``c_m`` return

    ``quad[m, i] = (x_i - c_m)^T C_m^{-1} (x_i - c_m)``,
    ``sol[m, i] = C_m^{-1} (x_i - c_m)`` and ``logdet[m] = log det C_m``.

    Linear algebra goes through Cholesky factors; raises LinAlgError when a
    matrix is not positive definite.
    """
    M, n = centers.shape
    if n == 1:
        c = mats[:, 0, 0]
        if np.any(c <= 0):
            raise np.linalg.LinAlgError("matrix is not positive definite")
        d = x[None, :, 0] - centers[:, 0, None]
        sol = (d / c[:, None])[..., None]
        return d * sol[..., 0], sol, np.log(c)
    L = np.linalg.cholesky(mats)
    quad = np.empty((M, x.shape[0]))
    sol = np.empty((M, x.shape[0], n))
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
    for m in range(M):
        d = (x - centers[m]).T
        z = solve_triangular(L[m], d, lower=True, check_finite=False)
        quad[m] = np.sum(z * z, axis=0)
        sol[m] = solve_triangular(L[m].T, z, lower=False, check_finite=False).T
    return quad, sol, logdet


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Softmax over axis 0 with max shift."""
    shifted = logits - np.max(logits, axis=0, keepdims=True)
    p = np.exp(shifted)
    p /= np.sum(p, axis=0, keepdims=True)
    return p


def log_ndtr_diff(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``log(Phi(u) - Phi(v))`` for ``u >= v`` without cancellation in either tail."""
    u, v = np.broadcast_arrays(np.asarray(u, dtype=float), np.asarray(v, dtype=float))
    right = v > 0
    # on the right tail use Phi(u) - Phi(v) = Phi(-v) - Phi(-u)
    hi = np.where(right, -v, u)
    lo = np.where(right, -u, v)
    lhi = log_ndtr(hi)
    llo = log_ndtr(lo)
    with np.errstate(divide="ignore"):
        return lhi + np.log1p(-np.exp(llo - lhi))


def log_norm_pdf(z: np.ndarray) -> np.ndarray:
    return -0.5 * z * z - 0.5 * LOG_2PI
