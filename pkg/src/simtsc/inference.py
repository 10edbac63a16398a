"""MAP parameter estimation and featurization of labelled series.

The objective is the Gaussian negative log-likelihood under a flat prior
on the model's region of interest.  It is minimised by simulated annealing
(compiled, see ``_kernels.anneal``) followed by a bounded Nelder-Mead
polish that is kept only when it improves the annealing result.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from . import _kernels
from .data import Dataset, LabeledSeries, NoiseSpec
from .io import atomic_write_text, check_magic, fmt
from .models import DomainError, ModelDefinition, get_model

FEATURE_MODES = ("theta", "phi")
MAGIC = "simtsc-features"
VERSION = 1


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    evals_per_param: int = 3000
    n_probes: int = 50
    cool_factor: float = 0.95
    cool_every_per_param: int = 20
    step_frac: float = 0.1
    polish_iters: int = 500
    polish_simplex_frac: float = 0.01
    rel_tol: float = 1e-6
    abs_tol: float = 1e-8
    # trajectories needing more steps are treated as failed (rejected) points
    max_steps: int = 2000
    flat_tol: float = 1e-9

    def budget(self, n_params: int) -> int:
        return self.evals_per_param * n_params


@dataclass
class MapResult:
    model: str
    theta_map: np.ndarray
    log_likelihood: float
    evaluations: int
    converged: bool

    @property
    def phi(self) -> np.ndarray:
        return get_model(self.model).sim_map(self.theta_map)


class Objective:
    """Negative log-likelihood of one series, callable on parameter vectors."""

    def __init__(self, series: LabeledSeries, model: ModelDefinition, noise: NoiseSpec,
                 config: OptimizerConfig = OptimizerConfig()):
        var = np.asarray(noise.variances, dtype=float)
        if np.any(var <= 0):
            raise ValueError("the likelihood needs strictly positive noise variances")
        if noise.mode == "full":
            obs = np.arange(model.state_dim)
        else:
            obs = np.array([0])
        ys = np.ascontiguousarray(series.outputs, dtype=float)
        if ys.shape[1] < len(obs):
            raise ValueError("series has fewer outputs than the noise model observes")
        self.model = model
        self.sys = model.system
        self.times = np.ascontiguousarray(series.times, dtype=float)
        self.ys = ys[:, : len(obs)].copy()
        self.obs = obs.astype(np.int64)
        self.inv_var = 1.0 / var
        self.log_norm = 0.5 * len(self.times) * float(np.sum(np.log(2.0 * np.pi * var)))
        self.config = config
        self.evaluations = 0
        self._p = np.empty(self.sys.block_size)
        self._x0 = np.empty(self.sys.state_dim)
        self._states = np.empty((len(self.times), self.sys.state_dim))

    def __call__(self, theta) -> float:
        self.evaluations += 1
        c = self.config
        return _kernels.neg_log_likelihood(
            self.sys.prep_kind, self.sys.rhs_kind, np.ascontiguousarray(theta, dtype=float),
            self.sys.consts, self.times, self.ys, self.obs, self.inv_var, self.log_norm,
            c.rel_tol, c.abs_tol, c.max_steps, self._p, self._x0, self._states)

    def many(self, points) -> np.ndarray:
        points = np.ascontiguousarray(points, dtype=float)
        self.evaluations += len(points)
        c = self.config
        return _kernels.evaluate_points(
            self.sys.prep_kind, self.sys.rhs_kind, points, self.sys.consts, self.times,
            self.ys, self.obs, self.inv_var, self.log_norm, c.rel_tol, c.abs_tol,
            c.max_steps, self.sys.block_size, self.sys.state_dim)

    def anneal(self, start, f_start, t0, normals, uniforms):
        c = self.config
        n = len(start)
        lo, hi = self.model.roi[:, 0].copy(), self.model.roi[:, 1].copy()
        self.evaluations += len(uniforms)
        return _kernels.anneal(
            self.sys.prep_kind, self.sys.rhs_kind, np.asarray(start, dtype=float), float(f_start),
            float(t0), lo, hi, normals, uniforms, c.cool_every_per_param * n, c.cool_factor,
            c.step_frac, self.sys.consts, self.times, self.ys, self.obs, self.inv_var,
            self.log_norm, c.rel_tol, c.abs_tol, c.max_steps, self.sys.block_size,
            self.sys.state_dim)


def log_likelihood(theta, series: LabeledSeries, noise: NoiseSpec, model,
                   config: OptimizerConfig = OptimizerConfig()) -> float:
    """Gaussian log-likelihood; ``-inf`` when the model cannot be integrated."""
    if isinstance(model, str):
        model = get_model(model)
    return -Objective(series, model, noise, config)(theta)


def map_estimate(series: LabeledSeries, model, noise: NoiseSpec, rng: np.random.Generator,
                 config: OptimizerConfig = OptimizerConfig()) -> MapResult:
    """Maximum a posteriori estimate under a uniform prior on the ROI."""
    if isinstance(model, str):
        model = get_model(model)
    obj = Objective(series, model, noise, config)
    roi = model.roi
    lo, hi = roi[:, 0], roi[:, 1]
    width = hi - lo
    n = model.param_dim
    budget = config.budget(n)
    n_probes = min(config.n_probes, budget)

    probes = lo + width * rng.random((n_probes, n))
    values = obj.many(probes)
    finite = np.isfinite(values)
    while not finite.any():
        if obj.evaluations >= budget:
            raise EstimationError("no finite likelihood value within the evaluation budget")
        extra = lo + width * rng.random((1, n))
        probes = np.vstack([probes, extra])
        values = np.append(values, obj.many(extra))
        finite = np.isfinite(values)

    fv = values[finite]
    flat = float(fv.max() - fv.min()) < config.flat_tol
    t0 = float(np.subtract(*np.percentile(fv, [75, 25])))
    if not (t0 > 0 and math.isfinite(t0)):
        t0 = max(float(np.std(fv)), 1.0)
    k = int(np.argmin(np.where(finite, values, np.inf)))
    best, f_best = probes[k].copy(), float(values[k])

    remaining = budget - obj.evaluations
    if remaining > 0 and not flat:
        normals = rng.standard_normal((remaining, n))
        uniforms = rng.random(remaining)
        best, f_best, _, _ = obj.anneal(best, f_best, t0, normals, uniforms)
        best = np.asarray(best, dtype=float).copy()

    if config.polish_iters > 0 and not flat:
        step = config.polish_simplex_frac * width
        step = np.where(best + step <= hi, step, -step)
        simplex = np.vstack([best, best + np.diag(step)])
        res = minimize(obj, best, method="Nelder-Mead", bounds=list(zip(lo, hi)),
                       options={"maxiter": config.polish_iters, "initial_simplex": simplex,
                                "xatol": 1e-12, "fatol": 1e-12, "adaptive": True})
        if np.isfinite(res.fun) and res.fun < f_best:
            best, f_best = np.clip(res.x, lo, hi), float(res.fun)

    return MapResult(model.name, np.clip(best, lo, hi), -f_best, obj.evaluations, not flat)


def apply_sim(model, theta) -> np.ndarray:
    if isinstance(model, str):
        model = get_model(model)
    return model.sim_map(np.asarray(theta, dtype=float))


def fit_rng(key, salt: int = 0) -> np.random.Generator:
    """Optimizer stream of one series, derived from its generation key."""
    ss = np.random.SeedSequence(entropy=[int(k) for k in key] + [int(salt)],
                                spawn_key=(0x6d6170,))
    return np.random.Generator(np.random.Philox(ss))


def fit_dataset(dataset: Dataset, model=None, noise: Optional[NoiseSpec] = None,
                config: OptimizerConfig = OptimizerConfig(), salt: int = 0) -> list:
    """MAP estimate for every series; failed estimates are ``None``."""
    model = get_model(dataset.model) if model is None else (
        get_model(model) if isinstance(model, str) else model)
    noise = dataset.noise if noise is None else noise
    out = []
    for i, s in enumerate(dataset.series):
        key = s.key if s.key else (dataset.seed, s.label, i)
        try:
            out.append(map_estimate(s, model, noise, fit_rng(key, salt), config))
        except EstimationError:
            out.append(None)
    return out


@dataclass
class FeatureSet:
    model: str
    mode: str
    features: np.ndarray
    labels: np.ndarray
    dropped: list = field(default_factory=list)
    mean_evaluations: float = 0.0

    def __len__(self):
        return len(self.labels)


def features_from_fits(fits, labels, model, mode: str) -> FeatureSet:
    """Stack raw MAP parameters or their SIM images; unusable fits are dropped."""
    if mode not in FEATURE_MODES:
        raise ValueError(f"feature mode must be one of {FEATURE_MODES}")
    if isinstance(model, str):
        model = get_model(model)
    rows, kept, dropped, evals = [], [], [], []
    for i, (fit, label) in enumerate(zip(fits, labels)):
        if fit is None:
            dropped.append(i)
            continue
        try:
            row = fit.theta_map if mode == "theta" else model.sim_map(fit.theta_map)
        except (DomainError, ZeroDivisionError, FloatingPointError):
            dropped.append(i)
            continue
        if not np.all(np.isfinite(row)):
            dropped.append(i)
            continue
        rows.append(np.asarray(row, dtype=float))
        kept.append(int(label))
        evals.append(fit.evaluations)
    dim = model.param_dim if mode == "theta" else model.sim_dim
    X = np.array(rows, dtype=float).reshape(len(rows), dim)
    return FeatureSet(model.name, mode, X, np.array(kept, dtype=int), dropped,
                      float(np.mean(evals)) if evals else 0.0)


def dataset_to_features(dataset: Dataset, mode: str, model=None,
                        noise: Optional[NoiseSpec] = None,
                        config: OptimizerConfig = OptimizerConfig(), salt: int = 0) -> FeatureSet:
    model = get_model(dataset.model) if model is None else (
        get_model(model) if isinstance(model, str) else model)
    fits = fit_dataset(dataset, model, noise, config, salt)
    return features_from_fits(fits, dataset.labels, model, mode)


# -- serialization -------------------------------------------------------------

def dumps_features(fs: FeatureSet) -> str:
    header = {"model": fs.model, "mode": fs.mode, "n": len(fs), "dim": fs.features.shape[1],
              "dropped": fs.dropped, "mean_evaluations": fs.mean_evaluations}
    lines = [f"# {MAGIC} v{VERSION}", "# " + json.dumps(header, separators=(",", ":"))]
    for x, y in zip(fs.features, fs.labels):
        lines.append("\t".join([str(int(y))] + [fmt(v) for v in x]))
    return "\n".join(lines) + "\n"


def save_features(fs: FeatureSet, path) -> Path:
    return atomic_write_text(path, dumps_features(fs))


def loads_features(text: str, source="<string>") -> FeatureSet:
    lines = text.splitlines()
    if len(lines) < 2:
        raise ValueError(f"{source}: line {len(lines) + 1}: truncated feature file")
    check_magic(lines[0], MAGIC, VERSION, source)
    try:
        header = json.loads(lines[1].removeprefix("# "))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{source}: line 2: bad JSON header ({exc.msg})") from None
    dim = int(header["dim"])
    X, y = [], []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != dim + 1:
            raise ValueError(f"{source}: line {lineno}: expected {dim + 1} fields, found {len(parts)}")
        try:
            y.append(int(parts[0]))
            X.append([float(v) for v in parts[1:]])
        except ValueError as exc:
            raise ValueError(f"{source}: line {lineno}: {exc}") from None
    return FeatureSet(header["model"], header["mode"], np.array(X, dtype=float).reshape(len(X), dim),
                      np.array(y, dtype=int), list(header["dropped"]),
                      float(header["mean_evaluations"]))


def load_features(path) -> FeatureSet:
    path = Path(path)
    return loads_features(path.read_text(encoding="utf-8"), source=str(path))
