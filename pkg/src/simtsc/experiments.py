"""End-to-end experiments: learning curves, noise sweeps and grid comparisons.

Every experiment draws a master training pool and a disjoint test pool
once, fits a MAP estimate to every series, and then repeats balanced
sub-sampled SVM trials on the resulting feature matrices.  All conditions
of one trial share the sub-sample and the cross-validation folds.
"""
from __future__ import annotations

import hashlib
import math
import statistics
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import ode
from .data import Dataset, NoiseSpec, TimeGridSpec, generate_dataset
from .inference import EstimationError, MapResult, OptimizerConfig, fit_rng, map_estimate
from .models import MODEL_NAMES, ModelDefinition, gauge_transform, get_model, sim_cml_laplace
from .svm import HyperGrid, cv_grid_search, evaluate, smo_train

CONDITIONS = ("FO", "PO", "PO+SIM")
GRID_KINDS = ("dense", "sparse", "irregular")
TEST_OFFSET = 1_000_000
EXP_TRIALS = {1: 20, 2: 10, 3: 20}
EXP2_N_TRAIN = 10


class ExperimentError(RuntimeError):
    pass


# -- aggregation ---------------------------------------------------------------

@dataclass(frozen=True)
class CurvePoint:
    x: float
    mean_error: float
    std_error: float
    mean_rel_sv: float
    std_rel_sv: float
    n_ok: int = 0
    degenerate: bool = False
    valid: bool = True


def aggregate(errors: Sequence[float], rel_svs: Optional[Sequence[float]] = None, x: float = 0.0,
              n_trials: Optional[int] = None) -> CurvePoint:
    """Sample mean and (n-1) standard deviation over the successful trials.

    A point with no successful trial, or fewer than half of ``n_trials``,
    is marked invalid; a single trial has std 0 and is flagged degenerate.
    """
    err = np.asarray([e for e in errors if e is not None and np.isfinite(e)], dtype=float)
    rel = np.asarray([] if rel_svs is None else
                     [r for r in rel_svs if r is not None and np.isfinite(r)], dtype=float)
    n_trials = len(errors) if n_trials is None else n_trials
    if err.size == 0:
        nan = float("nan")
        return CurvePoint(x, nan, nan, nan, nan, 0, True, False)

    def ms(v):
        # statistics rounds exactly, so identical trials give a std of exactly 0
        if v.size == 0:
            return float("nan"), float("nan")
        v = v.tolist()
        return statistics.fmean(v), statistics.stdev(v) if len(v) > 1 else 0.0

    me, se = ms(err)
    mr, sr = ms(rel)
    return CurvePoint(x, me, se, mr, sr, int(err.size), err.size == 1,
                      err.size * 2 >= n_trials)


@dataclass(frozen=True)
class NoiseSweepSummary:
    sigma_star: float
    delta_eps_star: float
    mean_delta_eps: float


def noise_sweep_summary(sigmas, po_means, sim_means) -> NoiseSweepSummary:
    delta = np.asarray(po_means, dtype=float) - np.asarray(sim_means, dtype=float)
    k = int(np.argmax(delta))
    return NoiseSweepSummary(float(sigmas[k]), float(delta[k]), float(np.mean(delta)))


# -- plans and bookkeeping -------------------------------------------------------

@dataclass(frozen=True)
class TrialPlan:
    model: str
    condition: str
    grid_kind: str
    sigma: float
    train_sizes: tuple
    n_trials: int
    seed: int

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown condition {self.condition!r}")
        if self.n_trials < 1:
            raise ValueError("n_trials must be at least 1")
        if max(self.train_sizes) > get_model(self.model).class_task.n_train:
            raise ValueError("train size exceeds the model's training pool")


@dataclass(frozen=True)
class TrialRecord:
    model: str
    condition: str
    grid: str
    sigma: float
    n_train: int
    trial: int
    error: float
    rel_sv: float


@dataclass(frozen=True)
class Settings:
    """Knobs shared by all experiments; ``scale`` < 1 gives a desk-sized run."""

    scale: float = 1.0
    optimizer: OptimizerConfig = OptimizerConfig()
    grid: HyperGrid = HyperGrid()
    n_trials: Optional[int] = None
    exp2_n_train: int = EXP2_N_TRAIN
    conditions: Optional[tuple] = None
    s0: Optional[float] = None
    k_abs: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.scale <= 1:
            raise ValueError("scale must lie in (0, 1]")

    def model(self, name: str) -> ModelDefinition:
        kw = {}
        if self.s0 is not None:
            kw["s0"] = self.s0
        if self.k_abs is not None:
            kw["k_abs"] = self.k_abs
        return get_model(name, **kw)

    def trials(self, exp_id: int) -> int:
        if self.n_trials is not None:
            return self.n_trials
        return max(1, math.ceil(EXP_TRIALS[exp_id] * self.scale))

    def hyper_grid(self) -> HyperGrid:
        return self.grid.thinned(self.scale)

    def test_per_class(self, model: ModelDefinition) -> int:
        return max(1, int(round(model.class_task.n_test * self.scale / 2)))

    def pool_per_class(self, model: ModelDefinition) -> int:
        return max(model.n_min, int(round(model.n_max * self.scale)))


def train_sizes(n_min: int, n_max: int) -> tuple:
    """Doubling sizes from ``n_min`` with ``n_max`` always last."""
    sizes = []
    n = n_min
    while n < n_max:
        sizes.append(n)
        n *= 2
    sizes.append(n_max)
    return tuple(sizes)


class FitCache:
    """MAP results keyed by the series content, noise model and optimizer setup."""

    def __init__(self):
        self._store = {}
        self.hits = 0

    @staticmethod
    def key(model: ModelDefinition, series, noise: NoiseSpec, config: OptimizerConfig) -> str:
        h = hashlib.sha256()
        h.update(repr((model.name, model.system.consts.tolist(), noise.mode,
                       noise.variances.tolist(), config, tuple(series.key))).encode())
        h.update(series.times.tobytes())
        h.update(np.ascontiguousarray(series.outputs).tobytes())
        return h.hexdigest()

    def fit(self, model, series, noise, config) -> Optional[MapResult]:
        k = self.key(model, series, noise, config)
        if k in self._store:
            self.hits += 1
            return self._store[k]
        try:
            res = map_estimate(series, model, noise, fit_rng(series.key), config)
        except EstimationError:
            res = None
        self._store[k] = res
        return res


def _fits(ds: Dataset, model, noise, config, cache: Optional[FitCache]) -> list:
    cache = FitCache() if cache is None else cache
    return [cache.fit(model, s, noise, config) for s in ds.series]


@dataclass
class Pools:
    """Train and test features per condition; rows with a missing feature are NaN."""

    train: dict
    test: dict
    train_labels: np.ndarray
    test_labels: np.ndarray


def _feature_rows(fits, model, mode) -> np.ndarray:
    dim = model.param_dim if mode == "theta" else model.sim_dim
    out = np.full((len(fits), dim), np.nan)
    for i, f in enumerate(fits):
        if f is None:
            continue
        try:
            row = f.theta_map if mode == "theta" else model.sim_map(f.theta_map)
        except (ValueError, ZeroDivisionError, FloatingPointError):
            continue
        out[i] = row
    return out


def build_pools(model: ModelDefinition, grid: TimeGridSpec, sigma: Optional[float],
                conditions, n_train: int, n_test: int, seed: int, settings: Settings,
                cache: Optional[FitCache]) -> Pools:
    need_fo = "FO" in conditions
    mode = "full" if need_fo else "partial"
    noise = NoiseSpec.for_model(model, mode, sigma)
    train_ds = generate_dataset(model, grid, noise, n_train, seed)
    test_ds = generate_dataset(model, grid, noise, n_test, seed, start=TEST_OFFSET)
    cfg = settings.optimizer
    train, test = {}, {}
    po_noise = NoiseSpec.for_model(model, "partial", sigma)
    po_train = train_ds.restrict(1) if need_fo else train_ds
    po_test = test_ds.restrict(1) if need_fo else test_ds
    if need_fo:
        fo_tr = _fits(train_ds, model, noise, cfg, cache)
        fo_te = _fits(test_ds, model, noise, cfg, cache)
        train["FO"] = _feature_rows(fo_tr, model, "theta")
        test["FO"] = _feature_rows(fo_te, model, "theta")
    if "PO" in conditions or "PO+SIM" in conditions:
        po_tr = _fits(po_train, model, po_noise, cfg, cache)
        po_te = _fits(po_test, model, po_noise, cfg, cache)
        if "PO" in conditions:
            train["PO"] = _feature_rows(po_tr, model, "theta")
            test["PO"] = _feature_rows(po_te, model, "theta")
        if "PO+SIM" in conditions:
            train["PO+SIM"] = _feature_rows(po_tr, model, "phi")
            test["PO+SIM"] = _feature_rows(po_te, model, "phi")
    return Pools(train, test, train_ds.labels, test_ds.labels)


def _trial_rng(seed, *key) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def run_trials(pools: Pools, model: str, grid_kind: str, sigma: float, sizes, n_trials: int,
               hyper: HyperGrid, seed: int, stream: tuple) -> list:
    """Balanced sub-sampled SVM trials for every condition present in ``pools``."""
    conds = [c for c in CONDITIONS if c in pools.train]
    ok_train = np.all([np.all(np.isfinite(pools.train[c]), axis=1) for c in conds], axis=0)
    by_class = [np.flatnonzero(ok_train & (pools.train_labels == c)) for c in (0, 1)]
    records = []
    for ni, n in enumerate(sizes):
        n_eff = min(n, len(by_class[0]), len(by_class[1]))
        for trial in range(n_trials):
            rng = _trial_rng(seed, *stream, ni, trial)
            if n_eff < 1:
                for c in conds:
                    records.append(TrialRecord(model, c, grid_kind, sigma, n, trial, float("nan"),
                                               float("nan")))
                continue
            idx = np.sort(np.concatenate([rng.choice(by_class[c], n_eff, replace=False)
                                          for c in (0, 1)]))
            fold_seed = int(rng.integers(2 ** 63))
            for c in conds:
                X, y = pools.train[c][idx], pools.train_labels[idx]
                te_ok = np.all(np.isfinite(pools.test[c]), axis=1)
                try:
                    C, scale, _ = cv_grid_search(X, y, hyper, np.random.default_rng(fold_seed))
                    svm = smo_train(X, y, C, scale)
                    err, rel = evaluate(svm, pools.test[c][te_ok], pools.test_labels[te_ok])
                except (ValueError, np.linalg.LinAlgError):
                    err, rel = float("nan"), float("nan")
                records.append(TrialRecord(model, c, grid_kind, sigma, n, trial, err, rel))
    return records


def curves_from_records(records, n_trials: int) -> dict:
    """``{(condition, grid, sigma): [CurvePoint per n_train]}`` in record order."""
    groups = {}
    for r in records:
        groups.setdefault((r.condition, r.grid, r.sigma), {}).setdefault(r.n_train, []).append(r)
    out = {}
    for key, by_n in groups.items():
        out[key] = [aggregate([r.error for r in rs], [r.rel_sv for r in rs], n, n_trials)
                    for n, rs in by_n.items()]
    return out


@dataclass
class ExperimentResult:
    exp_id: int
    model: str
    seed: int
    records: list
    curves: dict
    n_trials: int
    summary: Optional[NoiseSweepSummary] = None
    sigmas: tuple = ()
    meta: dict = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        return all(p.valid for pts in self.curves.values() for p in pts)


def _conditions(settings: Settings, default) -> tuple:
    conds = settings.conditions or default
    return tuple(c for c in CONDITIONS if c in conds and c in default)


def run_experiment1(model: str, seed: int, settings: Settings = Settings(),
                    cache: Optional[FitCache] = None) -> ExperimentResult:
    """Learning curves for FO, PO and PO+SIM on the dense grid (no FO arm for toy)."""
    m = settings.model(model)
    default = ("PO", "PO+SIM") if m.name == "toy" else CONDITIONS
    conds = _conditions(settings, default)
    pool = settings.pool_per_class(m)
    sizes = train_sizes(m.n_min, pool)
    n_trials = settings.trials(1)
    grid = TimeGridSpec("dense", m.dense_grid)
    pools = build_pools(m, grid, None, conds, pool, settings.test_per_class(m), seed, settings, cache)
    sigma = float(math.sqrt(m.noise_po))
    recs = run_trials(pools, m.name, "dense", sigma, sizes, n_trials, settings.hyper_grid(),
                      seed, (1, MODEL_NAMES.index(m.name), 0, 0))
    return ExperimentResult(1, m.name, seed, recs, curves_from_records(recs, n_trials), n_trials,
                            meta={"pool_per_class": pool,
                                  "test_per_class": settings.test_per_class(m)})


def run_experiment2(model: str, seed: int, settings: Settings = Settings(),
                    cache: Optional[FitCache] = None) -> ExperimentResult:
    """PO and PO+SIM error against observation noise at a fixed training size."""
    m = settings.model(model)
    conds = _conditions(settings, ("PO", "PO+SIM"))
    n_train = settings.exp2_n_train
    n_trials = settings.trials(2)
    grid = TimeGridSpec("dense", m.dense_grid)
    recs = []
    for si, sigma in enumerate(m.sigma_range):
        pools = build_pools(m, grid, float(sigma), conds, 2 * n_train, settings.test_per_class(m),
                            seed, settings, cache)
        recs += run_trials(pools, m.name, "dense", float(sigma), (n_train,), n_trials,
                           settings.hyper_grid(), seed, (2, MODEL_NAMES.index(m.name), 0, si))
    curves = curves_from_records(recs, n_trials)
    result = ExperimentResult(2, m.name, seed, recs, curves, n_trials,
                              sigmas=tuple(float(s) for s in m.sigma_range))
    if "PO" in conds and "PO+SIM" in conds:
        po = [curves[("PO", "dense", s)][0].mean_error for s in result.sigmas]
        sim = [curves[("PO+SIM", "dense", s)][0].mean_error for s in result.sigmas]
        result.summary = noise_sweep_summary(result.sigmas, po, sim)
    return result


def run_experiment3(model: str, seed: int, settings: Settings = Settings(),
                    cache: Optional[FitCache] = None, sizes: Optional[Sequence[int]] = None,
                    grids: Sequence[str] = GRID_KINDS,
                    pool: Optional[int] = None) -> ExperimentResult:
    """PO and PO+SIM learning curves on dense, sparse and irregular grids.

    ``sizes`` and ``pool`` (series per class) default to the Exp. 1 design.
    """
    m = settings.model(model)
    conds = _conditions(settings, ("PO", "PO+SIM"))
    pool = settings.pool_per_class(m) if pool is None else int(pool)
    sizes = tuple(sizes) if sizes is not None else train_sizes(m.n_min, pool)
    pool = max(pool, max(sizes))
    n_trials = settings.trials(3)
    # the partial-observation table noise: sigma 0.1 (toy), 10 (compartmental), 1 (br)
    sigma = float(math.sqrt(m.noise_po))
    recs = []
    for kind in grids:
        spec = TimeGridSpec(kind, m.dense_grid)
        pools = build_pools(m, spec, None, conds, pool, settings.test_per_class(m), seed,
                            settings, cache)
        recs += run_trials(pools, m.name, kind, sigma, sizes, n_trials, settings.hyper_grid(),
                           seed, (3, MODEL_NAMES.index(m.name), GRID_KINDS.index(kind), 0))
    return ExperimentResult(3, m.name, seed, recs, curves_from_records(recs, n_trials), n_trials)


def run_experiment(exp_id: int, model: str, seed: int, settings: Settings = Settings(),
                   cache: Optional[FitCache] = None) -> ExperimentResult:
    runners = {1: run_experiment1, 2: run_experiment2, 3: run_experiment3}
    if exp_id not in runners:
        raise ValueError(f"unknown experiment {exp_id}")
    return runners[exp_id](model, seed, settings, cache)


# -- structural identifiability check ----------------------------------------------

@dataclass(frozen=True)
class SiReport:
    model: str
    n_pairs: int
    max_output_dev: float
    max_sim_dev: float
    max_laplace_dev: Optional[float]
    tol: float
    sim_tol: float

    @property
    def passed(self) -> bool:
        ok = self.max_output_dev <= self.tol and self.max_sim_dev <= self.sim_tol
        if self.max_laplace_dev is not None:
            ok = ok and self.max_laplace_dev <= self.sim_tol
        return ok

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = (f"{status} {self.model}: {self.n_pairs} pairs, max output deviation "
                f"{self.max_output_dev:.3e} (tol {self.tol:g}), max SIM deviation "
                f"{self.max_sim_dev:.3e} (tol {self.sim_tol:g})")
        if self.max_laplace_dev is not None:
            text += f", transfer-function oracle deviation {self.max_laplace_dev:.3e}"
        return text


def _rel_dev(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = np.maximum(np.abs(a), np.abs(b))
    dev = np.where(scale > 0, np.abs(a - b) / np.where(scale > 0, scale, 1.0), 0.0)
    return float(dev.max()) if dev.size else 0.0


def sample_roi(model: ModelDefinition, rng: np.random.Generator) -> np.ndarray:
    lo, hi = model.roi[:, 0], model.roi[:, 1]
    return lo + (hi - lo) * rng.random(model.param_dim)


def verify_si(model, n_pairs: int = 50, tol: float = 1e-5, sim_tol: float = 1e-10,
              seed: int = 0, rel_tol: float = ode.DEFAULT_RTOL,
              abs_tol: float = ode.DEFAULT_ATOL) -> SiReport:
    """Integrate gauge-equivalent parameter pairs and compare outputs and SIM images.

    Parameters are drawn uniformly from the ROI and moved by a random gauge
    factor ``alpha`` with ``log(alpha)`` uniform on ``[-log 1.5, log 1.5]``.
    """
    m = get_model(model) if isinstance(model, str) else model
    rng = np.random.default_rng(seed)
    out_dev = sim_dev = 0.0
    lap_dev = 0.0 if m.name == "cml" else None
    for _ in range(n_pairs):
        theta = sample_roi(m, rng)
        alpha = float(np.exp(rng.uniform(-np.log(1.5), np.log(1.5))))
        other = gauge_transform(m, theta, alpha, rng)
        a = ode.integrate(m.system, theta, m.dense_grid, rel_tol, abs_tol).outputs
        b = ode.integrate(m.system, other, m.dense_grid, rel_tol, abs_tol).outputs
        out_dev = max(out_dev, float(np.max(np.abs(a - b))))
        sim_dev = max(sim_dev, _rel_dev(m.sim_map(theta), m.sim_map(other)))
        if lap_dev is not None:
            lap_dev = max(lap_dev, _rel_dev(sim_cml_laplace(theta), sim_cml_laplace(other)))
    return SiReport(m.name, n_pairs, out_dev, sim_dev, lap_dev, tol, sim_tol)
