"""Tanh MLP score model ``s_W(x, t)`` with hand-written derivatives.

Divergence terms need input derivatives of the network, and the losses need
parameter gradients *of* those input derivatives. Both are handled by one
scheme: directional input tangents ``v_k`` are pushed forward through the
layers alongside the activations (forward mode), then a single reverse pass
runs through activations and tangents together.

* implicit loss: the tangents are the ``n`` coordinate directions, so
  ``sum_k e_k . (J e_k)`` is the exact divergence;
* sliced loss: the tangents are random Gaussian directions ``v_l``.

With ``n = 1`` and ``v = 1`` the two losses run identical arithmetic.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .models import PathEnsemble
from .priors import as_generator
from .sampler import ControlField

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "hjsampler-mlp"
CHECKPOINT_VERSION = 1
DIVERGENCE_LIMIT = 1e8


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, history: List[float]):
        super().__init__(message)
        self.history = history


class MlpScoreNetwork:
    """``s(x, t) = c * W_L tanh(... tanh(W_1 u + b_1) ...) + c * b_L``.

    ``u = ((x, t) - input_shift) / input_scale`` is a fixed affine
    normalisation of the raw input and ``c = output_scale`` a fixed
    per-coordinate output scale; neither is trained. Weights are stored as
    ``(fan_out, fan_in)``.
    """

    def __init__(self, widths: Sequence[int], weights=None, biases=None, seed: int = 0,
                 input_shift=None, input_scale=None, output_scale=1.0,
                 horizon: float = 1.0):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or widths[0] != widths[-1] + 1 or min(widths) < 1:
            raise ValueError("widths must be [n + 1, hidden..., n]")
        self.widths = widths
        if weights is None:
            # uniform fan-in scaling
            rng = as_generator(seed)
            weights, biases = [], []
            for fan_in, fan_out in zip(widths[:-1], widths[1:]):
                bound = 1.0 / np.sqrt(fan_in)
                weights.append(rng.uniform(-bound, bound, (fan_out, fan_in)))
                biases.append(rng.uniform(-bound, bound, fan_out))
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float) for b in biases]
        for W, b, fi, fo in zip(self.weights, self.biases, widths[:-1], widths[1:]):
            if W.shape != (fo, fi) or b.shape != (fo,):
                raise ValueError("parameter shapes do not match widths")
        d = widths[0]
        self.input_shift = np.zeros(d) if input_shift is None else np.array(input_shift, dtype=float)
        self.input_scale = np.ones(d) if input_scale is None else np.array(input_scale, dtype=float)
        self.output_scale = np.broadcast_to(np.asarray(output_scale, dtype=float),
                                            (widths[-1],)).copy()
        self.horizon = float(horizon)

    @property
    def dimension(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> List[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "MlpScoreNetwork":
        return MlpScoreNetwork(self.widths, self.weights, self.biases, input_shift=self.input_shift,
                               input_scale=self.input_scale, output_scale=self.output_scale,
                               horizon=self.horizon)

    def _inputs(self, x, t):
        x = np.asarray(x, dtype=float)
        n = self.dimension
        x = x.reshape(-1, n) if x.ndim <= 1 else x
        t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        return (np.column_stack([x, t]) - self.input_shift) / self.input_scale

    def __call__(self, x, t) -> np.ndarray:
        return forward(self, x, t)

    # core pass ----------------------------------------------------------

    def _run(self, u: np.ndarray, V: Optional[np.ndarray]):
        """Forward pass with optional input tangents ``V`` of shape (K, N, n).

        Returns the output, its tangents and the per-layer cache.
        """
        c = self.output_scale
        a = u
        if V is not None:
            tangent = np.zeros(V.shape[:2] + (self.widths[0],))
            tangent[..., :-1] = V / self.input_scale[:-1]
        else:
            tangent = None
        cache = []
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(a @ W.T + b)
            d = 1.0 - h * h
            if tangent is not None:
                zdot = tangent @ W.T
                cache.append((a, tangent, h, d, zdot))
                tangent = d * zdot
            else:
                cache.append((a, None, h, d, None))
            a = h
        W, b = self.weights[-1], self.biases[-1]
        out = c * (a @ W.T + b)
        out_dot = c * (tangent @ W.T) if tangent is not None else None
        cache.append((a, tangent, None, None, None))
        return out, out_dot, cache

    def _backward(self, cache, g_out: np.ndarray, g_out_dot: Optional[np.ndarray]):
        c = self.output_scale
        gW = [None] * self.n_layers
        gb = [None] * self.n_layers
        g_o = c * g_out
        g_odot = c * g_out_dot if g_out_dot is not None else None
        a, tangent, _, _, _ = cache[-1]
        L = self.n_layers - 1
        W = self.weights[L]
        gW[L] = g_o.T @ a
        gb[L] = g_o.sum(axis=0)
        g_a = g_o @ W
        g_t = None
        if g_odot is not None:
            gW[L] += np.einsum("kno,kni->oi", g_odot, tangent)
            g_t = g_odot @ W
        for layer in range(L - 1, -1, -1):
            a_prev, t_prev, h, d, zdot = cache[layer]
            W = self.weights[layer]
            if g_t is not None:
                g_zdot = g_t * d
                g_d = np.sum(g_t * zdot, axis=0)
                g_z = (g_a - 2.0 * h * g_d) * d
            else:
                g_zdot = None
                g_z = g_a * d
            gW[layer] = g_z.T @ a_prev
            gb[layer] = g_z.sum(axis=0)
            g_a = g_z @ W
            if g_zdot is not None:
                gW[layer] += np.einsum("kno,kni->oi", g_zdot, t_prev)
                g_t = g_zdot @ W
        return [g for pair in zip(gW, gb) for g in pair]


def forward(net: MlpScoreNetwork, x, t) -> np.ndarray:
    """Evaluate ``s_W`` on a batch; returns shape (N, n)."""
    out, _, _ = net._run(net._inputs(x, t), None)
    return out


def _identity_tangents(n: int, N: int) -> np.ndarray:
    return np.broadcast_to(np.eye(n)[:, None, :], (n, N, n))


def divergence(net: MlpScoreNetwork, x, t) -> np.ndarray:
    """Exact ``div_x s_W(x, t)`` per batch point via ``n`` forward tangents."""
    u = net._inputs(x, t)
    V = _identity_tangents(net.dimension, u.shape[0])
    _, out_dot, _ = net._run(u, V)
    return np.einsum("kno,kno->n", V, out_dot)


def _loss(net, x, t, V):
    u = net._inputs(x, t)
    N = u.shape[0]
    if N == 0:
        raise ValueError("empty batch")
    out, out_dot, cache = net._run(u, V)
    per_point = 0.5 * np.sum(out * out, axis=1) + np.einsum("kno,kno->n", V, out_dot)
    loss = float(np.mean(per_point))
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite score-matching loss")
    grads = net._backward(cache, out / N, V / N)
    return loss, grads


def loss_implicit(net: MlpScoreNetwork, x, t):
    """``mean(1/2 |s|^2 + div s)`` and its parameter gradients."""
    n = net.dimension
    N = np.asarray(x).reshape(-1, n).shape[0]
    return _loss(net, x, t, _identity_tangents(n, N))


def loss_sliced(net: MlpScoreNetwork, x, t, directions=None, n_dirs: int = 1, seed=0):
    """``mean(1/2 |s|^2 + sum_l v_l . grad(s . v_l))`` and its gradients.

    ``directions`` has shape (n_dirs, N, n) or (n_dirs, n) (shared across the
    batch); when omitted, standard normal directions are drawn from ``seed``.
    """
    n = net.dimension
    N = np.asarray(x).reshape(-1, n).shape[0]
    if directions is None:
        if n_dirs < 1:
            raise ValueError("need at least one slicing direction")
        directions = as_generator(seed).standard_normal((n_dirs, N, n))
    V = np.asarray(directions, dtype=float)
    if V.ndim == 2:
        V = np.broadcast_to(V[:, None, :], (V.shape[0], N, n))
    return _loss(net, x, t, V)


@dataclass
class TrainConfig:
    batch_size: int = 1000
    epochs: int = 3000
    learning_rate: float = 1e-4
    loss_kind: str = "implicit"
    n_slices: int = 1
    steps_per_epoch: int = 1
    lr_final: Optional[float] = None  # geometric decay towards this value when set
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.steps_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and steps_per_epoch >= 1")
        if self.loss_kind not in ("implicit", "sliced"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def fit_normalization(net: MlpScoreNetwork, ensemble: PathEnsemble) -> MlpScoreNetwork:
    """Set the fixed normalisation from the ensemble.

    Inputs are centred and scaled by the state mean/sd and the time range;
    the output scale is ``1 / sd`` per coordinate, the size of a Gaussian
    score one standard deviation from the mean.
    """
    vals = ensemble.values.reshape(-1, ensemble.dimension)
    sd = vals.std(axis=0)
    sd[sd == 0] = 1.0
    times = ensemble.times
    net.input_shift = np.concatenate([vals.mean(axis=0), [0.5 * (times[0] + times[-1])]])
    net.input_scale = np.concatenate([sd, [max(0.5 * (times[-1] - times[0]), 1e-12)]])
    net.output_scale = 1.0 / sd
    return net


def train(net: MlpScoreNetwork, ensemble: PathEnsemble, cfg: TrainConfig):
    """Minibatch Adam on the score-matching loss; returns ``(net, history)``.

    Each step draws ``batch_size`` (slice, path) pairs uniformly with
    replacement from slices ``k >= 1`` of the ensemble. ``history`` holds the
    mean loss of each epoch. The network is updated in place.
    """
    if ensemble.dimension != net.dimension:
        raise ValueError("ensemble and network dimensions differ")
    times = ensemble.times
    K = times.size - 1
    if K < 1:
        raise ValueError("ensemble needs at least two time slices")
    net.horizon = float(times[-1])
    N = ensemble.n_paths
    rng = as_generator(cfg.seed)
    params = net.parameters()
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    total = cfg.epochs * cfg.steps_per_epoch
    decay = 1.0
    if cfg.lr_final is not None and total > 1:
        decay = (cfg.lr_final / cfg.learning_rate) ** (1.0 / (total - 1))
    history: List[float] = []
    for epoch in range(cfg.epochs):
        acc = 0.0
        for _ in range(cfg.steps_per_epoch):
            k = rng.integers(1, K + 1, size=cfg.batch_size)
            j = rng.integers(0, N, size=cfg.batch_size)
            x = ensemble.values[j, k]
            t = times[k]
            try:
                if cfg.loss_kind == "implicit":
                    loss, grads = loss_implicit(net, x, t)
                else:
                    loss, grads = loss_sliced(net, x, t, directions=rng.standard_normal(
                        (cfg.n_slices, cfg.batch_size, net.dimension)))
            except FloatingPointError:
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", history)
            if abs(loss) > DIVERGENCE_LIMIT:
                raise TrainingDiverged(f"loss {loss:.3g} exceeded {DIVERGENCE_LIMIT:g} at epoch {epoch}",
                                       history)
            opt.step(params, grads)
            opt.lr *= decay
            acc += loss
        history.append(acc / cfg.steps_per_epoch)
        if epoch % max(1, cfg.epochs // 10) == 0:
            log.debug("epoch %d loss %.6f", epoch, history[-1])
    return net, history


class ScoreControl(ControlField):
    """``(x, tau) -> eps * s_W(x, T - tau)``."""

    def __init__(self, net: MlpScoreNetwork, epsilon: float, horizon: Optional[float] = None):
        self.net = net
        self.epsilon = float(epsilon)
        self.horizon = float(net.horizon if horizon is None else horizon)

    def evaluate(self, x, tau):
        return self.epsilon * forward(self.net, x, self.horizon - tau)


def score_control(net: MlpScoreNetwork, eps: float) -> ScoreControl:
    return ScoreControl(net, eps)


def save_checkpoint(net: MlpScoreNetwork, path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "widths": net.widths,
        "weights": [W.tolist() for W in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "input_shift": net.input_shift.tolist(),
        "input_scale": net.input_scale.tolist(),
        "output_scale": net.output_scale.tolist(),
        "horizon": net.horizon,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> MlpScoreNetwork:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a score-network checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    return MlpScoreNetwork(doc["widths"], doc["weights"], doc["biases"],
                           input_shift=doc["input_shift"], input_scale=doc["input_scale"],
                           output_scale=doc["output_scale"], horizon=doc["horizon"])


def write_loss_history(history: Sequence[float], path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(history):
            fh.write(f"{i},{v!r}\n")
