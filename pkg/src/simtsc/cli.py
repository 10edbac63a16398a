"""Command-line interface.

Settings come from built-in defaults, then an optional ``key = value``
config file (``--config``), then command-line flags.  The fully resolved
configuration is written next to every output.  Exit status is 0 on
success, 1 on a computational failure and 2 on a usage or configuration
error.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import data, experiments, inference, models, ode, report, svm
from .io import atomic_write_text

ENV_OUTPUT_DIR = "SIMTSC_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "simtsc-out"

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _floats(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).replace(",", " ").split())


@dataclass
class RunConfig:
    """Every tunable of a run, with its default."""

    model: str = "toy"
    experiment: int = 1
    seed: int = 0
    scale: float = 1.0
    output_dir: str = ""
    # optimizer
    evals_per_param: int = inference.OptimizerConfig.evals_per_param
    n_probes: int = inference.OptimizerConfig.n_probes
    cool_factor: float = inference.OptimizerConfig.cool_factor
    polish_iters: int = inference.OptimizerConfig.polish_iters
    likelihood_rtol: float = inference.OptimizerConfig.rel_tol
    likelihood_atol: float = inference.OptimizerConfig.abs_tol
    # classifier grid
    c_values: tuple = svm.DEFAULT_C
    scale_values: tuple = svm.DEFAULT_SCALE_FACTORS
    folds: int = 10
    # experiment sizes
    n_trials: int = 0
    exp2_n_train: int = experiments.EXP2_N_TRAIN
    # input constants
    s0: float = models.DEFAULT_S0
    k_abs: float = models.DEFAULT_K_ABS

    def __post_init__(self):
        if not self.output_dir:
            self.output_dir = os.environ.get(ENV_OUTPUT_DIR, DEFAULT_OUTPUT_DIR)

    def optimizer(self) -> inference.OptimizerConfig:
        return inference.OptimizerConfig(
            evals_per_param=self.evals_per_param, n_probes=self.n_probes,
            cool_factor=self.cool_factor, polish_iters=self.polish_iters,
            rel_tol=self.likelihood_rtol, abs_tol=self.likelihood_atol)

    def hyper_grid(self) -> svm.HyperGrid:
        return svm.HyperGrid(tuple(self.c_values), tuple(self.scale_values), self.folds)

    def settings(self) -> experiments.Settings:
        return experiments.Settings(
            scale=self.scale, optimizer=self.optimizer(), grid=self.hyper_grid(),
            n_trials=self.n_trials or None, exp2_n_train=self.exp2_n_train,
            s0=self.s0, k_abs=self.k_abs)

    def text(self) -> str:
        lines = ["# simtsc effective configuration"]
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = " ".join(repr(float(x)) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value):
    kind = _TYPES[key]
    try:
        if kind == "tuple":
            return _floats(value)
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {value!r} as {kind}") from None


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}: line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _TYPES:
            raise UsageError(f"{path}: line {lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for key in _TYPES:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = _coerce(key, v)
    cfg = RunConfig(**values)
    if cfg.model != "all" and cfg.model not in models.MODEL_NAMES:
        raise models.RegistryError(cfg.model)
    if not 0 < cfg.scale <= 1:
        raise UsageError("scale must lie in (0, 1]")
    try:
        cfg.hyper_grid()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def _write_config(cfg: RunConfig, directory, name="config.effective.txt") -> Path:
    return atomic_write_text(Path(directory) / name, cfg.text())


# -- subcommands ---------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> int:
    model = models.get_model(cfg.model, cfg.s0, cfg.k_abs)
    grid = data.TimeGridSpec(args.grid, model.dense_grid)
    noise = data.NoiseSpec.for_model(model, args.observe, args.noise)
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    ds = data.generate_dataset(model, grid, noise, args.n, cfg.seed)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / (
        f"{model.name}_{args.grid}_seed{cfg.seed}.dataset.tsv")
    data.save_dataset(ds, out)
    _write_config(cfg, out.parent, out.name + ".config.txt")
    labels = ds.labels
    lengths = sorted({len(s.times) for s in ds.series})
    print(f"wrote {out}: {len(ds)} series ({int(np.sum(labels == 0))} class 0, "
          f"{int(np.sum(labels == 1))} class 1), {args.grid} grid with {lengths[0]}"
          f"{'' if len(lengths) == 1 else '-' + str(lengths[-1])} points on "
          f"[0, {model.dense_grid[-1]:g}], {noise.mode} observation")
    return EXIT_OK


def cmd_fit_map(args, cfg: RunConfig) -> int:
    try:
        ds = data.load_dataset(args.dataset)
    except OSError as exc:
        raise UsageError(f"cannot read dataset {args.dataset}: {exc.strerror}") from None
    if len(ds) == 0:
        raise UsageError(f"{args.dataset}: dataset is empty")
    model = models.get_model(ds.model, cfg.s0, cfg.k_abs)
    noise = ds.noise
    if np.any(noise.variances <= 0):
        # noiseless data still needs a likelihood: fall back to the table noise
        noise = data.NoiseSpec.for_model(model, noise.mode)
    fits = inference.fit_dataset(ds, model, noise, cfg.optimizer(), salt=cfg.seed)
    out_dir = Path(args.out_dir) if args.out_dir else Path(cfg.output_dir)
    stem = Path(args.dataset).name.removesuffix(".tsv").removesuffix(".dataset")
    written = []
    for mode in inference.FEATURE_MODES:
        fs = inference.features_from_fits(fits, ds.labels, model, mode)
        path = inference.save_features(fs, out_dir / f"{stem}.{mode}.tsv")
        written.append((mode, fs, path))
    _write_config(cfg, out_dir, f"{stem}.fit.config.txt")
    n_fail = sum(1 for f in fits if f is None)
    n_flat = sum(1 for f in fits if f is not None and not f.converged)
    fs_theta = written[0][1]
    diag = (f"series: {len(ds)}\ndropped: {len(written[1][1].dropped)}\n"
            f"estimation failures: {n_fail}\nflat objectives: {n_flat}\n"
            f"mean evaluations: {fs_theta.mean_evaluations:.1f}\n"
            f"theta dimension: {model.param_dim}\nphi dimension: {model.sim_dim}\n")
    atomic_write_text(out_dir / f"{stem}.diagnostics.txt", diag)
    for mode, fs, path in written:
        print(f"wrote {path}: {len(fs)} rows, {mode} dimension {fs.features.shape[1]}")
    print(f"dropped {len(written[1][1].dropped)} series, "
          f"mean evaluations {fs_theta.mean_evaluations:.1f}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    try:
        train = inference.load_features(args.features)
        test = inference.load_features(args.test) if args.test else None
    except OSError as exc:
        raise UsageError(f"cannot read features: {exc}") from None
    if len(train) < 2 or len(np.unique(train.labels)) < 2:
        raise UsageError("training features need both classes")
    rng = np.random.default_rng(cfg.seed)
    grid = cfg.hyper_grid().thinned(cfg.scale)
    C, scale, cv_err = svm.cv_grid_search(train.features, train.labels, grid, rng)
    model = svm.smo_train(train.features, train.labels, C, scale)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / (
        Path(args.features).name.removesuffix(".tsv") + ".svm.json")
    svm.save_svm(model, out)
    _write_config(cfg, out.parent, out.name + ".config.txt")
    print(f"wrote {out}: C={C:g} scale={scale:.6g} cv_error={cv_err:.4f} "
          f"support vectors={model.n_support}/{model.n_train}")
    if test is not None:
        err, rel = svm.evaluate(model, test.features, test.labels)
        print(f"test error={err:.4f} relative support vectors={rel:.4f}")
    return EXIT_OK if model.converged else EXIT_FAILURE


def cmd_exp(args, cfg: RunConfig) -> int:
    names = models.MODEL_NAMES if cfg.model == "all" else (cfg.model,)
    out_dir = Path(cfg.output_dir)
    status = EXIT_OK
    cache = experiments.FitCache()
    for name in names:
        result = experiments.run_experiment(cfg.experiment, name, cfg.seed, cfg.settings(), cache)
        header = {"scale": cfg.scale, "evals_per_param": cfg.evals_per_param}
        paths = report.write_outputs(result, out_dir, header)
        print(report.summary_headline(result))
        for key in ("results", "summary", "plot"):
            print(f"  {key}: {paths[key]}")
        bad = [(k, p.x) for k, pts in result.curves.items() for p in pts if not p.valid]
        for (c, g, s), x in bad:
            print(f"  invalid point: {c} {g} sigma={s:g} n={x:g}", file=sys.stderr)
        if bad:
            status = EXIT_FAILURE
    _write_config(cfg, out_dir, f"exp{cfg.experiment}.config.txt")
    return status


def cmd_verify_si(args, cfg: RunConfig) -> int:
    names = models.MODEL_NAMES if cfg.model == "all" else (cfg.model,)
    status = EXIT_OK
    for name in names:
        rep = experiments.verify_si(models.get_model(name, cfg.s0, cfg.k_abs), args.pairs,
                                    args.tol, args.tol if args.sim_tol is None else args.sim_tol,
                                    seed=cfg.seed)
        print(rep.line())
        if not rep.passed:
            status = EXIT_FAILURE
    return status


def cmd_report(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out_dir) if args.out_dir else None
    for path in args.results:
        try:
            result = report.load_results(path)
        except OSError as exc:
            raise UsageError(f"cannot read {path}: {exc.strerror}") from None
        target = out_dir or Path(path).parent
        stem = f"exp{result.exp_id}_{result.model}"
        atomic_write_text(target / f"{stem}_summary.tsv", report.summary_text(result))
        atomic_write_text(target / f"{stem}.svg", report.figure_svg(result))
        print(report.summary_headline(result))
        for line in report.summary_lines(result):
            print("  " + line)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, model_default_all=False):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--model", help="toy, ccm2, ccm4, cml, br" + (" or all" if model_default_all else ""))
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir", dest="output_dir",
                   help=f"output directory (default ${ENV_OUTPUT_DIR} or ./{DEFAULT_OUTPUT_DIR})")
    p.add_argument("--s0", type=float, help="input dose constant")
    p.add_argument("--k-abs", dest="k_abs", type=float, help="input absorption rate")
    p.add_argument("--evals-per-param", dest="evals_per_param", type=int,
                   help="annealing budget per parameter")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simtsc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a labelled dataset")
    _common(p)
    p.add_argument("--grid", choices=data.GRID_KINDS, default="dense")
    p.add_argument("--noise", type=float, help="noise std (default: the model's table value)")
    p.add_argument("--observe", choices=("partial", "full"), default="partial")
    p.add_argument("--n", type=int, default=10, help="series per class")
    p.add_argument("--out", help="output file")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fit-map", help="MAP-estimate every series of a dataset")
    _common(p)
    p.add_argument("dataset")
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_fit_map)

    p = sub.add_parser("train", help="grid-search and train an SVM on a feature file")
    _common(p)
    p.add_argument("features")
    p.add_argument("--test", help="feature file to evaluate on")
    p.add_argument("--scale", type=float)
    p.add_argument("--out", help="output model file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("exp", help="run an experiment")
    _common(p, model_default_all=True)
    p.add_argument("--id", dest="experiment", type=int, choices=(1, 2, 3))
    p.add_argument("--scale", type=float, help="desk-scale factor in (0, 1]")
    p.add_argument("--n-trials", dest="n_trials", type=int)
    p.set_defaults(func=cmd_exp)

    p = sub.add_parser("verify-si", help="check gauge-equivalent parameter pairs")
    _common(p, model_default_all=True)
    p.add_argument("--pairs", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-5, help="output deviation tolerance")
    p.add_argument("--sim-tol", dest="sim_tol", type=float, default=1e-10,
                   help="relative SIM deviation tolerance")
    p.set_defaults(func=cmd_verify_si)

    p = sub.add_parser("report", help="rebuild summaries and plots from results files")
    _common(p)
    p.add_argument("results", nargs="+")
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except (UsageError, models.RegistryError, data.DatasetFormatError, data.ConfigurationError) as exc:
        print(f"simtsc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ode.IntegrationError, inference.EstimationError, data.SeriesGenerationError,
            models.GaugeNotFoundError, experiments.ExperimentError) as exc:
        print(f"simtsc: failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(f"simtsc: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except ValueError as exc:
        print(f"simtsc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
