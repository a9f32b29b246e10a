"""Config-driven experiment runner.

A config is a TOML file with the sections below; ``builtin_experiment``
returns ready-made configs for the standard benchmark problems.

``[model]``
    ``dimension``, ``epsilon``, ``horizon``; ``drift`` is ``"zero"``,
    ``"linear"`` (with ``A`` and optional ``beta``) or a name from
    ``DRIFTS``; optional noise matrix ``sigma`` (n x m).
``[prior]``
    ``kind`` is one of ``gaussian`` (``mean``, ``cov``), ``gaussian_mixture``
    (``means``, ``covs``, optional ``weights``), ``uniform_mixture``
    (``intervals``, optional ``weights``), ``lognormal`` (``loc``, ``scale``)
    or ``function_series`` (``n``, ``n_terms``, ``low``, ``high``).
``[sampler]``
    ``backend`` (``analytic`` / ``riccati`` / ``sgm``), ``dtau``, ``count``,
    ``seed``, ``ode_step`` (riccati), ``write_slices``.
``[training]`` (sgm only)
    ``dt``, ``paths``, ``hidden``, ``batch_size``, ``epochs``,
    ``steps_per_epoch``, ``learning_rate``, ``lr_final``, ``loss``
    (``implicit`` / ``sliced``), ``n_slices``, ``seed``, ``data_seed``;
    ``checkpoint`` loads a trained network instead of training.
``[[observations]]``
    ``s``, ``targets`` and exactly one source for ``y_obs``: an explicit
    ``y_obs``, ``from_reference = true`` (value of the reference trajectory
    at ``s``) or ``draw = {count, seed}`` (forward simulations of the model).
``[evaluation]``
    ``exact`` (compare with the exact posterior when one exists),
    ``exact_count``, ``sliced_dirs``, ``seed``.
``[reference]``
    ``drift`` (a ``DRIFTS`` name), ``y0``, ``step``: a fixed-step RK4
    solution of the true ODE, used for observations and coverage checks.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import scipy

from . import __version__
from .analytic import AnalyticCase, AnalyticControl, AnalyticError, exact_posterior
from .metrics import DEFAULT_DIRECTIONS, MetricReport, sliced_w1, w1_1d
from .models import SdeModel, TimeGrid, simulate_forward
from .priors import (FunctionSeriesPrior, GaussianComponent, GaussianMixturePrior, LogNormalPrior,
                     UniformMixturePrior, as_generator)
from .riccati import solve_riccati
from .sampler import ObservationSpec, sample_posterior, slice_to_csv
from .score_net import (MlpScoreNetwork, TrainConfig, fit_normalization, load_checkpoint,
                        save_checkpoint, score_control, train, write_loss_history)

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "HJSAMPLER_OUTPUT_ROOT"
BACKENDS = ("analytic", "riccati", "sgm")


class ConfigError(ValueError):
    pass


class SchemaError(ValueError):
    pass


# drifts ---------------------------------------------------------------------

def _source(t):
    return np.sin(4.0 * np.pi * t)


def _oscillator(x, t, quadratic):
    y1, y2 = x[:, 0], x[:, 1]
    return np.column_stack([y2, -y1 + quadratic * y1 * y1 - y2])


DRIFTS: Dict[str, tuple] = {
    # name: (b(x, t) on (N, n) arrays, dimension)
    "sin4pi_plus_square": (lambda x, t: _source(t) + x * x, 1),
    "sin4pi_plus_3square": (lambda x, t: _source(t) + 3.0 * x * x, 1),
    "sin4pi_plus_logistic": (lambda x, t: _source(t) + 1.5 * x * (1.0 - x), 1),
    "damped_oscillator": (lambda x, t: _oscillator(x, t, 0.0), 2),
    "damped_quadratic_oscillator": (lambda x, t: _oscillator(x, t, 1.0), 2),
}


def rk4(drift: Callable, y0, horizon: float, step: float):
    """Fixed-step classical Runge-Kutta for ``y' = drift(y, t)``; returns (times, states)."""
    grid = TimeGrid.covering(horizon, step)
    y = np.atleast_1d(np.asarray(y0, dtype=float))[None, :]
    out = np.empty((grid.steps + 1, y.shape[1]))
    out[0] = y[0]
    h = grid.dt
    for k in range(grid.steps):
        t = k * h
        k1 = drift(y, t)
        k2 = drift(y + 0.5 * h * k1, t + 0.5 * h)
        k3 = drift(y + 0.5 * h * k2, t + 0.5 * h)
        k4 = drift(y + h * k3, t + h)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = y[0]
    return grid.times, out


# config ---------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    name: str
    model: dict
    prior: dict
    sampler: dict
    observations: List[dict]
    training: Optional[dict] = None
    evaluation: dict = field(default_factory=dict)
    reference: Optional[dict] = None
    seed: int = 0
    output_dir: Optional[str] = None

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = copy.deepcopy(doc)
        known = {"name", "model", "prior", "sampler", "observations", "training", "evaluation",
                 "reference", "seed", "output_dir"}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
        for key in ("model", "prior", "sampler", "observations"):
            if key not in doc:
                raise ConfigError(f"missing section [{key}]")
        doc.setdefault("name", "experiment")
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        doc = {"name": self.name, "seed": self.seed}
        if self.output_dir is not None:
            doc["output_dir"] = self.output_dir
        for key in ("model", "prior", "sampler", "training", "evaluation", "reference"):
            value = getattr(self, key)
            if value:
                doc[key] = value
        doc["observations"] = self.observations
        return copy.deepcopy(doc)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    @property
    def backend(self) -> str:
        return self.sampler.get("backend", "analytic")

    def validate(self) -> None:
        if self.backend not in BACKENDS:
            raise ConfigError(f"unknown backend {self.backend!r}; choose from {BACKENDS}")
        model = build_model(self)
        prior = build_prior(self)
        if prior.dimension != model.dimension:
            raise ConfigError(f"prior dimension {prior.dimension} != model dimension "
                              f"{model.dimension}")
        if "dtau" not in self.sampler or "count" not in self.sampler:
            raise ConfigError("[sampler] needs dtau and count")
        if self.backend == "analytic":
            try:
                AnalyticCase(model, prior)
            except AnalyticError as exc:
                raise ConfigError(f"analytic backend unavailable: {exc}") from None
        elif self.backend == "riccati":
            if model.drift_kind not in ("zero", "linear"):
                raise ConfigError("riccati backend requires a zero or linear drift")
            if not isinstance(prior, (GaussianComponent, GaussianMixturePrior)):
                raise ConfigError("riccati backend requires a Gaussian or Gaussian-mixture prior")
            if "ode_step" not in self.sampler:
                raise ConfigError("riccati backend needs sampler.ode_step")
        else:
            if not self.training:
                raise ConfigError("sgm backend needs a [training] section")
            if "checkpoint" not in self.training:
                for key in ("dt", "paths", "hidden"):
                    if key not in self.training:
                        raise ConfigError(f"[training] needs {key!r}")
        if self.reference is not None:
            if self.reference.get("drift") not in DRIFTS:
                raise ConfigError(f"unknown reference drift {self.reference.get('drift')!r}")
        if not self.observations:
            raise ConfigError("need at least one observation")
        dtau = float(self.sampler["dtau"])
        for i, ob in enumerate(self.observations):
            sources = [k for k in ("y_obs", "from_reference", "draw") if ob.get(k) not in (None, False)]
            if len(sources) != 1:
                raise ConfigError(f"observation {i}: give exactly one of y_obs, from_reference, draw")
            if "from_reference" in sources and self.reference is None:
                raise ConfigError(f"observation {i}: from_reference needs a [reference] section")
            s = float(ob.get("s", model.horizon))
            if s > model.horizon + 1e-12:
                raise ConfigError(f"observation {i}: s={s} beyond horizon {model.horizon}")
            for t in ob.get("targets", [0.0]):
                k = (s - t) / dtau
                if not 0 <= t < s or abs(k - round(k)) > 1e-6:
                    raise ConfigError(f"observation {i}: target {t} is not a dtau node in [0, s)")


def load_config(path) -> ExperimentConfig:
    import tomli
    with open(path, "rb") as fh:
        doc = tomli.load(fh)
    return ExperimentConfig.from_dict(doc)


def dump_config(cfg: ExperimentConfig) -> str:
    import tomli_w
    return tomli_w.dumps(cfg.to_dict())


def build_model(cfg: ExperimentConfig) -> SdeModel:
    m = cfg.model
    try:
        n, eps, T = int(m["dimension"]), float(m["epsilon"]), float(m["horizon"])
    except KeyError as exc:
        raise ConfigError(f"[model] missing {exc}") from None
    sigma = m.get("sigma")
    drift = m.get("drift", "zero")
    if drift == "zero":
        return SdeModel.brownian(n, eps, T, sigma=sigma)
    if drift == "linear":
        if "A" not in m:
            raise ConfigError("linear drift needs A")
        A = np.asarray(m["A"], dtype=float).reshape(n, n)
        beta = None if m.get("beta") is None else np.asarray(m["beta"], dtype=float)
        return SdeModel.linear(A, eps, T, beta=beta, sigma=sigma)
    if drift not in DRIFTS:
        raise ConfigError(f"unknown drift {drift!r}")
    fn, dim = DRIFTS[drift]
    if dim != n:
        raise ConfigError(f"drift {drift!r} is {dim}-dimensional, model has dimension {n}")
    return SdeModel.general(fn, n, eps, T, sigma=sigma)


def build_prior(cfg: ExperimentConfig):
    p = cfg.prior
    kind = p.get("kind")
    try:
        if kind == "gaussian":
            return GaussianComponent(p["mean"], p["cov"])
        if kind == "gaussian_mixture":
            return GaussianMixturePrior.from_arrays(p["means"], p["covs"], p.get("weights"))
        if kind == "uniform_mixture":
            return UniformMixturePrior(p["intervals"], p.get("weights"))
        if kind == "lognormal":
            return LogNormalPrior(p["loc"], p["scale"])
        if kind == "function_series":
            return FunctionSeriesPrior(int(p["n"]), int(p.get("n_terms", 8)),
                                       float(p.get("low", 1.0)), float(p.get("high", 3.0)))
    except KeyError as exc:
        raise ConfigError(f"[prior] missing {exc}") from None
    raise ConfigError(f"unknown prior kind {kind!r}")


# builtins -------------------------------------------------------------------

BUILTINS = ("bm1d_gauss", "bm1d_gmm", "bm1d_unifmix", "bm2d_gmm", "ou1d", "ou2d_modeluncert",
            "ode_misspec_2nd_order", "ode_misspec_nonlinear", "highdim100")

DESK_COUNT = 100_000
PAPER_COUNT = 1_000_000


def _train(dt, paths, hidden, epochs, lr, steps_per_epoch, lr_final=None, loss="implicit",
           n_slices=1, batch_size=1000):
    doc = {"dt": dt, "paths": paths, "hidden": hidden, "batch_size": batch_size, "epochs": epochs,
           "learning_rate": lr, "steps_per_epoch": steps_per_epoch, "loss": loss,
           "n_slices": n_slices, "seed": 11, "data_seed": 7}
    if lr_final is not None:
        doc["lr_final"] = lr_final
    return doc


def builtin_experiment(name: str, paper_scale: bool = False, backend: Optional[str] = None,
                       epsilon: Optional[float] = None, case: str = "a") -> ExperimentConfig:
    """Benchmark configurations.

    Problem constants (eps, T, dt, dtau, priors, drifts, observations,
    network widths, epochs, learning rates) are those of the reference benchmarks.
    Desk scale shrinks sample counts; ``paper_scale`` restores them.
    ``steps_per_epoch`` and ``lr_final`` are desk-scale training knobs.
    """
    count = PAPER_COUNT if paper_scale else DESK_COUNT
    if name == "bm1d_gauss":
        doc = {
            "model": {"dimension": 1, "epsilon": 1.0, "horizon": 1.0, "drift": "zero"},
            "prior": {"kind": "gaussian", "mean": [0.0], "cov": [[1.0]]},
            "sampler": {"backend": "analytic", "dtau": 0.01, "count": count, "seed": 1},
            "training": _train(0.01, PAPER_COUNT if paper_scale else 100_000, [50, 50], 3000,
                               1e-3, 5, lr_final=1e-5),
            "observations": [{"s": 1.0, "y_obs": [y], "targets": [0.0], "label": f"y={y:g}"}
                             for y in (-2.0, -1.0, 0.0, 1.5, 3.0)],
        }
    elif name == "bm1d_gmm":
        doc = {
            "model": {"dimension": 1, "epsilon": 1.0, "horizon": 1.0, "drift": "zero"},
            "prior": {"kind": "gaussian_mixture", "means": [0.0, -2.0, 2.0],
                      "covs": [0.25, 0.64, 0.36], "weights": [1 / 3, 1 / 3, 1 / 3]},
            "sampler": {"backend": "analytic", "dtau": 0.001, "count": count, "seed": 1},
            "training": _train(0.01, PAPER_COUNT if paper_scale else 100_000, [50, 50, 50], 5000,
                               1e-3, 3, lr_final=1e-5),
            "observations": [{"s": s, "y_obs": [y], "targets": [t], "label": f"t={t:g},s={s:g},y={y:g}"}
                             for t, s, y in ((0.01, 0.8, -4.0), (0.02, 0.5, -2.0), (0.05, 0.6, 0.5),
                                             (0.45, 0.95, 1.0), (0.03, 0.4, 3.0))],
        }
    elif name == "bm1d_unifmix":
        doc = {
            "model": {"dimension": 1, "epsilon": 0.05, "horizon": 1.0, "drift": "zero"},
            "prior": {"kind": "uniform_mixture", "intervals": [[-0.75, -0.25], [0.25, 0.75]]},
            "sampler": {"backend": "analytic", "dtau": 0.001, "count": count, "seed": 1},
            "training": _train(0.01, PAPER_COUNT if paper_scale else 100_000, [50, 50, 50], 5000,
                               1e-3, 3, lr_final=1e-5),
            "observations": [{"s": 1.0, "y_obs": [y], "targets": [0.0, 0.5], "label": f"y={y:g}"}
                             for y in (-0.5, 0.0, 0.5)],
        }
    elif name == "bm2d_gmm":
        doc = {
            "model": {"dimension": 2, "epsilon": 0.5, "horizon": 1.0, "drift": "zero"},
            "prior": {"kind": "gaussian_mixture", "means": [[0.5, 0.5], [-0.5, -0.5]],
                      "covs": [[[0.25, 0.05], [0.05, 1 / 9]], [[0.0625, -0.05], [-0.05, 0.25]]],
                      "weights": [0.5, 0.5]},
            "sampler": {"backend": "analytic", "dtau": 0.001,
                        "count": count if paper_scale else 200_000, "seed": 1},
            "training": _train(0.01, PAPER_COUNT if paper_scale else 100_000, [50, 50, 50], 5000,
                               1e-3, 3, lr_final=1e-5),
            "observations": [{"s": s, "y_obs": y, "targets": [t],
                              "label": f"t={t:g},s={s:g},y=[{y[0]:g},{y[1]:g}]"}
                             for t, s, y in ((0.1, 0.9, [-0.9, 0.9]), (0.2, 0.7, [0.7, 0.3]),
                                             (0.0, 0.3, [0.3, -0.4]), (0.3, 0.8, [-0.5, 0.3]))],
        }
    elif name == "ou1d":
        doc = {
            "model": {"dimension": 1, "epsilon": 1.5, "horizon": 1.0, "drift": "linear",
                      "A": [[-3.0]]},
            "prior": {"kind": "gaussian", "mean": [0.0], "cov": [[1.0]]},
            "sampler": {"backend": "riccati", "dtau": 0.01, "count": count, "seed": 1,
                        "ode_step": 1e-4, "write_slices": False},
            "training": _train(0.01, PAPER_COUNT if paper_scale else 100_000, [50, 50], 3000,
                               1e-3, 5, lr_final=1e-5),
            "observations": [{"s": 1.0, "targets": [0.0],
                              "draw": {"count": 1000 if paper_scale else 100, "seed": 21}}],
        }
    elif name == "ou2d_modeluncert":
        doc = {
            "model": {"dimension": 2, "epsilon": 5.0, "horizon": 1.0, "drift": "linear",
                      "A": [[0.0, 1.0], [-1.0, -1.0]]},
            "prior": {"kind": "gaussian_mixture", "means": [[-0.7, 0.0], [0.7, 0.0]],
                      "covs": [[[0.25, 0.1], [0.1, 0.16]], [[0.25, -0.1], [-0.1, 0.16]]],
                      "weights": [0.5, 0.5]},
            "sampler": {"backend": "riccati", "dtau": 0.001, "count": count, "seed": 1,
                        "ode_step": 1e-5},
            "training": _train(0.01, PAPER_COUNT if paper_scale else 100_000, [50, 50, 50], 5000,
                               1e-3, 3, lr_final=1e-5),
            "observations": [{"s": s, "y_obs": y, "targets": [t],
                              "label": f"t={t:g},s={s:g},y=[{y[0]:g},{y[1]:g}]"}
                             for t, s, y in ((0.0, 1.0, [1.0, 1.0]), (0.2, 0.6, [-1.0, 0.5]),
                                             (0.5, 1.0, [0.0, -1.5]))],
        }
    elif name == "ode_misspec_2nd_order":
        eps = 1e-3 if epsilon is None else float(epsilon)
        doc = {
            "model": {"dimension": 2, "epsilon": eps, "horizon": 5.0, "drift": "linear",
                      "A": [[0.0, 1.0], [-1.0, -1.0]], "sigma": [[0.0], [1.0]]},
            "prior": {"kind": "lognormal", "loc": [-2.0, -2.0], "scale": [0.5, 0.5]},
            "sampler": {"backend": "sgm", "dtau": 0.001, "count": 1000, "seed": 1},
            "training": _train(0.01, PAPER_COUNT // 10 if paper_scale else 50_000, [50, 50, 50],
                               5000, 1e-3, 2, lr_final=1e-5),
            "reference": {"drift": "damped_quadratic_oscillator", "y0": [0.2, 0.1], "step": 1e-4},
            "observations": [{"s": 5.0, "from_reference": True,
                              "targets": [0.0, 1.0, 2.0, 3.0, 4.0, 4.5], "label": "y(T)"}],
        }
    elif name == "ode_misspec_nonlinear":
        eps = 1e-2 if epsilon is None else float(epsilon)
        if case not in ("a", "b"):
            raise ConfigError("nonlinear misspecification case must be 'a' or 'b'")
        doc = {
            "model": {"dimension": 1, "epsilon": eps, "horizon": 1.0,
                      "drift": "sin4pi_plus_square"},
            "prior": {"kind": "gaussian", "mean": [0.0], "cov": [[0.01]]},
            "sampler": {"backend": "sgm", "dtau": 0.001,
                        "count": PAPER_COUNT // 10 if paper_scale else 10_000, "seed": 1},
            "training": _train(0.01, PAPER_COUNT // 10, [50, 50, 50], 5000, 1e-3, 2,
                               lr_final=1e-5),
            "reference": ({"drift": "sin4pi_plus_3square", "y0": [0.05], "step": 1e-4} if case == "a"
                          else {"drift": "sin4pi_plus_logistic", "y0": [-0.1], "step": 1e-4}),
            "observations": [{"s": 1.0, "from_reference": True,
                              "targets": [0.0, 0.25, 0.5, 0.75, 0.9], "label": "y(T)"}],
        }
        doc["training"]["learning_rate"] = 1e-4 if paper_scale else 1e-3
    elif name == "highdim100":
        doc = {
            "model": {"dimension": 100, "epsilon": 0.01, "horizon": 1.0, "drift": "zero"},
            "prior": {"kind": "function_series", "n": 100, "n_terms": 8, "low": 1.0, "high": 3.0},
            "sampler": {"backend": "sgm", "dtau": 0.01, "count": 1000, "seed": 1},
            "training": _train(0.02, PAPER_COUNT // 10 if paper_scale else 10_000, [200, 200, 200],
                               3000, 1e-3, 1, lr_final=1e-5, loss="sliced", n_slices=1),
            "observations": [{"s": 1.0, "targets": [0.0, 0.3, 0.6, 0.9],
                              "draw": {"count": 2, "seed": 33}}],
        }
    else:
        raise ConfigError(f"unknown builtin {name!r}; choose from {BUILTINS}")
    if paper_scale and doc.get("training", {}).get("steps_per_epoch", 1) != 1:
        doc["training"]["steps_per_epoch"] = 1
        doc["training"].pop("lr_final", None)
        doc["training"]["learning_rate"] = 1e-3 if name in (
            "ode_misspec_2nd_order", "highdim100") else 1e-4
    doc["name"] = name if name != "ode_misspec_nonlinear" else f"{name}_{case}"
    if epsilon is not None and name not in ("ode_misspec_2nd_order", "ode_misspec_nonlinear"):
        doc["model"]["epsilon"] = float(epsilon)
    if backend is not None:
        doc["sampler"]["backend"] = backend
        if backend == "riccati":
            doc["sampler"].setdefault("ode_step", 1e-4)
    return ExperimentConfig.from_dict(doc)


# running --------------------------------------------------------------------

@dataclass
class RunManifest:
    config_hash: str
    versions: Dict[str, str]
    timings: Dict[str, float]
    files: List[str]
    output_dir: str

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "versions": self.versions,
                "timings": self.timings, "files": self.files}


@dataclass
class Observation:
    label: str
    spec: ObservationSpec
    truth0: Optional[np.ndarray] = None  # true initial state when known


def resolve_output_dir(cfg: ExperimentConfig, output_dir=None) -> Path:
    if output_dir is not None:
        return Path(output_dir)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "hjsampler_runs"))
    return root / (cfg.output_dir or cfg.name)


def _time_key(t: float) -> str:
    return f"t={t:g}"


def build_control(cfg: ExperimentConfig, model: SdeModel, prior, out: Path, files: List[str]):
    """Stage 1: the control field for the configured backend."""
    backend = cfg.backend
    if backend == "analytic":
        return AnalyticControl(AnalyticCase(model, prior))
    if backend == "riccati":
        sol = solve_riccati(model, prior, float(cfg.sampler["ode_step"]))
        if cfg.sampler.get("write_stage1", True):
            sol.to_csv(out / "riccati.csv")
            files.append("riccati.csv")
        return sol
    tr = cfg.training
    if "checkpoint" in tr:
        path = Path(tr["checkpoint"])
        if not path.exists():
            raise FileNotFoundError(f"checkpoint {path} not found; train first or fix "
                                    f"training.checkpoint")
        net = load_checkpoint(path)
        if net.dimension != model.dimension:
            raise ConfigError("checkpoint dimension does not match the model")
        return score_control(net, model.epsilon)
    net, history = train_network(cfg, model, prior)
    save_checkpoint(net, out / "checkpoint.json")
    write_loss_history(history, out / "loss_history.csv")
    files.extend(["checkpoint.json", "loss_history.csv"])
    return score_control(net, model.epsilon)


def train_network(cfg: ExperimentConfig, model: SdeModel, prior):
    tr = cfg.training
    grid = TimeGrid.covering(model.horizon, float(tr["dt"]))
    data_seed = int(tr.get("data_seed", cfg.seed))
    y0 = prior.sample(int(tr["paths"]), as_generator(data_seed))
    ensemble = simulate_forward(model, y0, grid, seed=data_seed + 1)
    n = model.dimension
    net = MlpScoreNetwork([n + 1] + list(tr["hidden"]) + [n], seed=int(tr.get("seed", 0)))
    fit_normalization(net, ensemble)
    tc = TrainConfig(batch_size=int(tr.get("batch_size", 1000)), epochs=int(tr.get("epochs", 1000)),
                     learning_rate=float(tr.get("learning_rate", 1e-4)),
                     loss_kind=tr.get("loss", "implicit"), n_slices=int(tr.get("n_slices", 1)),
                     steps_per_epoch=int(tr.get("steps_per_epoch", 1)),
                     lr_final=tr.get("lr_final"), seed=int(tr.get("seed", 0)))
    return train(net, ensemble, tc)


def expand_observations(cfg: ExperimentConfig, model: SdeModel, prior,
                        reference: Optional[tuple]) -> List[Observation]:
    out = []
    for i, ob in enumerate(cfg.observations):
        s = float(ob.get("s", model.horizon))
        targets = ob.get("targets", [0.0])
        label = ob.get("label", f"obs{i}")
        if ob.get("y_obs") is not None:
            out.append(Observation(label, ObservationSpec(ob["y_obs"], s, targets)))
        elif ob.get("from_reference"):
            times, states = reference
            k = int(np.argmin(np.abs(times - s)))
            out.append(Observation(label, ObservationSpec(states[k], s, targets), states[0]))
        else:
            draw = ob["draw"]
            seed = int(draw.get("seed", 0))
            count = int(draw["count"])
            y0 = prior.sample(count, as_generator(seed))
            dt = float(draw.get("dt", cfg.sampler["dtau"]))
            ens = simulate_forward(model, y0, TimeGrid.covering(s, dt), seed=seed + 1)
            ys = ens.values[:, -1]
            for j in range(count):
                out.append(Observation(f"{label}_{j}" if "label" in ob else f"obs{i}_{j}",
                                       ObservationSpec(ys[j], s, targets), y0[j]))
    return out


def _exact_case(cfg, model, prior) -> Optional[AnalyticCase]:
    if not cfg.evaluation.get("exact", True):
        return None
    try:
        return AnalyticCase(model, prior)
    except AnalyticError:
        return None


def run_config(cfg: ExperimentConfig, output_dir=None) -> RunManifest:
    """Run both stages for every observation and write the artifacts."""
    cfg.validate()
    model = build_model(cfg)
    prior = build_prior(cfg)
    out = resolve_output_dir(cfg, output_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: List[str] = []
    timings: Dict[str, float] = {}

    t0 = time.perf_counter()
    control = build_control(cfg, model, prior, out, files)
    timings["stage1"] = time.perf_counter() - t0

    reference = None
    if cfg.reference is not None:
        ref = cfg.reference
        fn, _ = DRIFTS[ref["drift"]]
        reference = rk4(fn, ref["y0"], model.horizon, float(ref.get("step", 1e-4)))
        _write_reference(reference, out / "reference.csv", float(cfg.sampler["dtau"]))
        files.append("reference.csv")

    case = _exact_case(cfg, model, prior)
    ev = cfg.evaluation
    dtau = float(cfg.sampler["dtau"])
    count = int(cfg.sampler["count"])
    seed = int(cfg.sampler.get("seed", cfg.seed))
    exact_count = int(ev.get("exact_count", count))
    n_dirs = int(ev.get("sliced_dirs", DEFAULT_DIRECTIONS))
    ev_seed = int(ev.get("seed", 5))
    write_slices = bool(cfg.sampler.get("write_slices", True))

    metrics: Dict[str, object] = {}
    reports: List[dict] = []
    summary_rows = []
    w1_values = []
    timings["stage2"] = 0.0
    timings["evaluation"] = 0.0
    for i, ob in enumerate(expand_observations(cfg, model, prior, reference)):
        t1 = time.perf_counter()
        ens = sample_posterior(model, control, ob.spec, dtau, count, seed + i)
        timings["stage2"] += time.perf_counter() - t1
        t1 = time.perf_counter()
        for t in ob.spec.targets:
            x = ens.at(t)
            key = f"{ob.label}/{_time_key(t)}"
            if write_slices:
                name = f"slices_obs{i}_{_time_key(t)}.csv"
                slice_to_csv(x, out / name)
                files.append(name)
            mean, sd = x.mean(axis=0), x.std(axis=0)
            ref_t = None
            if reference is not None:
                times, states = reference
                ref_t = states[int(np.argmin(np.abs(times - t)))]
            elif t == 0 and ob.truth0 is not None:
                ref_t = ob.truth0
            for c in range(model.dimension):
                summary_rows.append((i, t, c + 1, mean[c], sd[c],
                                     None if ref_t is None else ref_t[c]))
            metrics[f"{key}/mean_sd"] = float(np.mean(sd))
            metrics[f"{key}/obs_inside_2sd"] = float(
                np.mean(np.abs(mean - ob.spec.y_obs) <= 2 * sd))
            if ref_t is not None:
                metrics[f"{key}/ref_inside_2sd"] = float(np.mean(np.abs(mean - ref_t) <= 2 * sd))
            if case is not None:
                post = exact_posterior(case, t, ob.spec.s, ob.spec.y_obs)
                ref_samples = post.sample(exact_count, ev_seed + i)
                if model.dimension == 1:
                    value = w1_1d(x[:, 0], ref_samples[:, 0], seed=ev_seed)
                    report = MetricReport("w1", value, x.shape[0], ref_samples.shape[0],
                                          seed=ev_seed)
                else:
                    value = sliced_w1(x, ref_samples, n_dirs, seed=ev_seed)
                    report = MetricReport("sliced_w1", value, x.shape[0], ref_samples.shape[0],
                                          n_dirs, ev_seed)
                metrics[f"{key}/{report.name}"] = value
                reports.append(dict(report.to_dict(), key=key))
                w1_values.append(value)
        timings["evaluation"] += time.perf_counter() - t1
    if w1_values:
        metrics["w1_mean"] = float(np.mean(w1_values))
        metrics["w1_std"] = float(np.std(w1_values))
        metrics["w1_max"] = float(np.max(w1_values))

    _write_summary(summary_rows, out / "summary.csv")
    files.append("summary.csv")
    with open(out / "metrics.json", "w") as fh:
        json.dump({"experiment": cfg.name, "backend": cfg.backend, "metrics": metrics,
                   "reports": reports}, fh, indent=2, sort_keys=True)
    files.append("metrics.json")
    with open(out / "config.toml", "w") as fh:
        fh.write(dump_config(cfg))
    files.append("config.toml")

    manifest = RunManifest(cfg.digest(), _versions(), timings, files + ["manifest.json"], str(out))
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
    return manifest


def run(config_path, output_dir=None) -> RunManifest:
    return run_config(load_config(config_path), output_dir)


def _versions() -> Dict[str, str]:
    return {"hjsampler": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _write_reference(reference, path: Path, every: float) -> None:
    times, states = reference
    stride = max(1, int(round(every / (times[1] - times[0]))))
    n = states.shape[1]
    with open(path, "w") as fh:
        fh.write(",".join(["t"] + [f"x{i + 1}" for i in range(n)]) + "\n")
        for k in range(0, times.size, stride):
            fh.write(",".join([repr(float(times[k]))] + [repr(float(v)) for v in states[k]]) + "\n")


def _write_summary(rows, path: Path) -> None:
    with open(path, "w") as fh:
        fh.write("obs,t,coord,mean,sd,reference\n")
        for i, t, c, m, sd, ref in rows:
            fh.write(f"{i},{t!r},{c},{float(m)!r},{float(sd)!r},"
                     f"{'' if ref is None else repr(float(ref))}\n")


# comparing ------------------------------------------------------------------

@dataclass
class Tolerance:
    rel: float = 0.0
    abs: float = 0.0
    maxima: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def parse(cls, spec: Optional[str]) -> "Tolerance":
        """``"rel=0.2,abs=1e-3"`` or a TOML file with ``rel``, ``abs`` and a ``[max]`` table."""
        if spec is None:
            return cls()
        if os.path.exists(spec):
            import tomli
            with open(spec, "rb") as fh:
                doc = tomli.load(fh)
            return cls(float(doc.get("rel", 0.0)), float(doc.get("abs", 0.0)),
                       {k: float(v) for k, v in doc.get("max", {}).items()})
        tol = cls()
        for part in filter(None, (p.strip() for p in spec.split(","))):
            key, _, value = part.partition("=")
            if key not in ("rel", "abs"):
                raise SchemaError(f"unknown tolerance key {key!r}")
            setattr(tol, key, float(value))
        return tol


def _is_distance(key: str) -> bool:
    leaf = key.rsplit("/", 1)[-1]
    return leaf.startswith("w1") or leaf.startswith("sliced_w1")


def compare_reports(baseline: dict, candidate: dict, tol: Tolerance):
    """Return ``(ok, lines)``; raises SchemaError when keys are missing.

    Distance metrics (W1 family) may not exceed ``baseline * (1 + rel) +
    abs``; other metrics must agree within ``abs + rel * |baseline|``.
    ``tol.maxima`` adds absolute caps on candidate values.
    """
    for doc, which in ((baseline, "baseline"), (candidate, "candidate")):
        if not isinstance(doc, dict) or not isinstance(doc.get("metrics"), dict):
            raise SchemaError(f"{which} report has no 'metrics' table")
    a, b = baseline["metrics"], candidate["metrics"]
    missing = sorted(set(a) - set(b))
    if missing:
        raise SchemaError(f"candidate is missing metrics: {', '.join(missing)}")
    ok = True
    lines = []
    for key in sorted(a):
        va, vb = float(a[key]), float(b[key])
        if _is_distance(key):
            limit = va * (1 + tol.rel) + tol.abs
            good = vb <= limit
            detail = f"{vb:.6g} <= {limit:.6g}"
        else:
            limit = tol.abs + tol.rel * abs(va)
            good = abs(vb - va) <= limit
            detail = f"|{vb:.6g} - {va:.6g}| <= {limit:.6g}"
        if key in tol.maxima:
            good = good and vb <= tol.maxima[key]
            detail += f", <= max {tol.maxima[key]:.6g}"
        ok &= good
        lines.append(f"{'PASS' if good else 'FAIL'} {key}: {detail}")
    for key, cap in tol.maxima.items():
        if key not in a:
            if key not in b:
                raise SchemaError(f"max given for unknown metric {key!r}")
            good = float(b[key]) <= cap
            ok &= good
            lines.append(f"{'PASS' if good else 'FAIL'} {key}: {float(b[key]):.6g} <= max {cap:.6g}")
    return ok, lines


def compare(path_a, path_b, tol_spec: Optional[str] = None):
    with open(path_a) as fh:
        a = json.load(fh)
    with open(path_b) as fh:
        b = json.load(fh)
    return compare_reports(a, b, Tolerance.parse(tol_spec))
