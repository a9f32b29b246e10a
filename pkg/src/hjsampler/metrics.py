"""Sample-based distances and summaries for posterior evaluation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np

from .priors import as_generator

DEFAULT_DIRECTIONS = 50


@dataclass
class MetricReport:
    name: str
    value: float
    n_a: int
    n_b: int
    n_dirs: Optional[int] = None
    seed: Optional[int] = None

    def __post_init__(self):
        if self.name.startswith("w1") or self.name.startswith("sliced_w1"):
            if not self.value >= 0:
                raise ValueError("a W1 value cannot be negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _equalize(a: np.ndarray, b: np.ndarray, seed: int = 0):
    """Shuffle the larger set and truncate it to the size of the smaller."""
    if a.size == b.size:
        return a, b
    rng = as_generator(seed)
    if a.size > b.size:
        return rng.permutation(a)[: b.size], b
    return a, rng.permutation(b)[: a.size]


def w1_1d(a, b, seed: int = 0) -> float:
    """Empirical W1 between two 1D sample sets: mean gap between sorted samples.

    Unequal sample counts are reduced to the smaller one by shuffling the
    larger set (with ``seed``) and truncating.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("W1 needs nonempty sample sets")
    a, b = _equalize(a, b, seed)
    return float(np.mean(np.abs(np.sort(a) - np.sort(b))))


def sliced_w1(a, b, n_dirs: int = DEFAULT_DIRECTIONS, seed: int = 0) -> float:
    """Average of ``w1_1d`` over ``n_dirs`` random unit directions."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("W1 needs nonempty sample sets")
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets differ in dimension")
    if n_dirs < 1:
        raise ValueError("need at least one direction")
    dirs = as_generator(seed).standard_normal((n_dirs, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return float(np.mean([w1_1d(a @ d, b @ d, seed) for d in dirs]))


def summarize(slices: Dict[float, np.ndarray]) -> Dict[float, tuple]:
    """Per-time coordinate-wise mean and population standard deviation."""
    if not slices:
        raise ValueError("nothing to summarize")
    out = {}
    for t, x in slices.items():
        x = np.asarray(x, dtype=float)
        x = x[:, None] if x.ndim == 1 else x
        out[t] = (x.mean(axis=0), x.std(axis=0))
    return out
