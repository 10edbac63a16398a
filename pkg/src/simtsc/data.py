"""Synthetic labelled time-series datasets on dense, sparse and irregular grids.

Each series owns a Philox stream keyed by ``(seed, label, index)``, so a
series does not depend on how many others are generated alongside it and
the fully and partially observed versions of a dataset share every random
draw: the partial outputs are exactly the first column of the full ones.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import ode
from .io import atomic_write_text, check_magic, fmt
from .models import ClassTask, ModelDefinition, get_model

GRID_KINDS = ("dense", "sparse", "irregular")
DEFAULT_FRACTION = 0.4
MAX_REJECTIONS = 1000

MAGIC = "simtsc-dataset"
VERSION = 1

_ORDER_KEY = 2 ** 32 - 1


class ConfigurationError(ValueError):
    pass


class SeriesGenerationError(RuntimeError):
    def __init__(self, index, cause):
        super().__init__(f"series {index}: {cause}")
        self.index = index


class DatasetFormatError(ValueError):
    def __init__(self, source, lineno, message):
        super().__init__(f"{source}: line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class TimeGridSpec:
    kind: str
    dense_grid: np.ndarray
    fraction: float = DEFAULT_FRACTION

    def __post_init__(self):
        if self.kind not in GRID_KINDS:
            raise ConfigurationError(f"unknown grid kind {self.kind!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigurationError("fraction must lie in (0, 1]")

    @property
    def count(self) -> int:
        if self.kind == "dense":
            return len(self.dense_grid)
        return grid_count(len(self.dense_grid), self.fraction)


@dataclass(frozen=True)
class NoiseSpec:
    """Gaussian observation noise; ``variances`` has one entry per output."""

    mode: str
    variances: np.ndarray

    def __post_init__(self):
        if self.mode not in ("full", "partial"):
            raise ConfigurationError(f"noise mode must be 'full' or 'partial', not {self.mode!r}")
        v = np.atleast_1d(np.asarray(self.variances, dtype=float))
        if self.mode == "partial" and v.size != 1:
            raise ConfigurationError("partial observation takes a single variance")
        if np.any(v < 0):
            raise ConfigurationError("variances must be non-negative")
        object.__setattr__(self, "variances", v)

    @classmethod
    def full(cls, variances) -> "NoiseSpec":
        return cls("full", np.asarray(variances, dtype=float))

    @classmethod
    def partial(cls, variance: float) -> "NoiseSpec":
        return cls("partial", np.array([float(variance)]))

    @classmethod
    def for_model(cls, model: ModelDefinition, mode: str, sigma: Optional[float] = None) -> "NoiseSpec":
        """Table noise for ``model``; ``sigma`` overrides it with sigma^2 * I."""
        if mode == "full":
            v = model.noise_fo if sigma is None else np.full(model.state_dim, sigma ** 2)
            return cls.full(v)
        return cls.partial(model.noise_po if sigma is None else sigma ** 2)

    @property
    def covariance(self):
        return np.diag(self.variances) if self.mode == "full" else float(self.variances[0])

    def to_dict(self) -> dict:
        return {"mode": self.mode, "variances": [float(v) for v in self.variances]}

    @classmethod
    def from_dict(cls, d) -> "NoiseSpec":
        return cls(d["mode"], np.asarray(d["variances"], dtype=float))


@dataclass
class LabeledSeries:
    times: np.ndarray
    outputs: np.ndarray
    label: int
    true_theta: Optional[np.ndarray] = None
    key: tuple = ()

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.outputs = np.asarray(self.outputs, dtype=float).reshape(len(self.times), -1)


@dataclass
class Dataset:
    model: str
    grid_kind: str
    noise: NoiseSpec
    seed: int
    series: list = field(default_factory=list)

    def __len__(self):
        return len(self.series)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.series], dtype=int)

    def restrict(self, columns=1) -> "Dataset":
        """Keep the first ``columns`` outputs (full -> partial observation)."""
        noise = NoiseSpec.partial(self.noise.variances[0]) if columns == 1 else self.noise
        out = [LabeledSeries(s.times, s.outputs[:, :columns].copy(), s.label, s.true_theta, s.key)
               for s in self.series]
        return Dataset(self.model, self.grid_kind, noise, self.seed, out)


def grid_count(n_dense: int, fraction: float) -> int:
    """Round-half-up of ``fraction * n_dense``, never below 2."""
    return max(2, int(math.floor(fraction * n_dense + 0.5)))


def make_grid(spec: TimeGridSpec, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    dense = np.asarray(spec.dense_grid, dtype=float)
    if spec.kind == "dense":
        return dense.copy()
    count = spec.count
    if spec.kind == "sparse":
        idx = np.unique(np.round(np.linspace(0, len(dense) - 1, count)).astype(int))
        return dense[idx]
    if rng is None:
        raise ConfigurationError("irregular grids need a random generator")
    t_end = dense[-1]
    while True:
        # uniform on (0, t_end]
        pts = np.sort(t_end * (1.0 - rng.random(count - 1)))
        if np.all(np.diff(pts) > 0):
            return np.concatenate([[0.0], pts])


def sample_class_theta(task: ClassTask, label: int, roi, rng: np.random.Generator) -> np.ndarray:
    """Draw from N(mu_label, Sigma_label), redrawing until inside the ROI."""
    if label not in (0, 1):
        raise ConfigurationError("labels are 0 or 1")
    mean = task.mean(label)
    cov = task.cov(label)
    roi = np.asarray(roi, dtype=float)
    w, v = np.linalg.eigh(cov)
    root = v * np.sqrt(np.clip(w, 0.0, None))
    for _ in range(MAX_REJECTIONS):
        theta = mean + root @ rng.standard_normal(len(mean))
        if np.all(theta >= roi[:, 0]) and np.all(theta <= roi[:, 1]):
            return theta
    raise ConfigurationError(f"{MAX_REJECTIONS} consecutive draws fell outside the ROI")


def series_rng(seed: int, label: int, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(label), int(index)))
    return np.random.Generator(np.random.Philox(ss))


def simulate_series(model: ModelDefinition, grid_spec: TimeGridSpec, noise: NoiseSpec,
                    seed: int, label: int, index: int, rtol=ode.DEFAULT_RTOL,
                    atol=ode.DEFAULT_ATOL) -> LabeledSeries:
    rng = series_rng(seed, label, index)
    theta = sample_class_theta(model.class_task, label, model.roi, rng)
    times = make_grid(grid_spec, rng)
    traj = ode.integrate(model.system, theta, times, rtol, atol, measurement="full")
    z = rng.standard_normal(traj.states.shape)
    if noise.mode == "full":
        ys = traj.states + z * np.sqrt(noise.variances)
    else:
        ys = traj.states[:, :1] + z[:, :1] * np.sqrt(noise.variances[0])
    return LabeledSeries(times, ys, label, theta, (int(seed), label, index))


def generate_dataset(model, grid_spec: TimeGridSpec, noise: NoiseSpec, n_per_class: int,
                     seed: int, start: int = 0) -> Dataset:
    """Balanced, shuffled dataset with ``n_per_class`` series per label.

    Series ``i`` of label ``c`` is the same whatever ``n_per_class`` is;
    ``start`` offsets the per-class index so disjoint pools can be drawn
    from one seed.
    """
    if isinstance(model, str):
        model = get_model(model)
    if n_per_class < 1:
        raise ConfigurationError("n_per_class must be at least 1")
    if noise.mode == "full" and len(noise.variances) != model.state_dim:
        raise ConfigurationError("full-observation noise needs one variance per state")
    keys = [(c, start + i) for c in (0, 1) for i in range(n_per_class)]
    order_rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=int(seed), spawn_key=(_ORDER_KEY, start, n_per_class))))
    order = order_rng.permutation(len(keys))
    series = []
    for pos, k in enumerate(order):
        label, index = keys[k]
        try:
            series.append(simulate_series(model, grid_spec, noise, seed, label, index))
        except (ode.IntegrationError, ConfigurationError) as exc:
            raise SeriesGenerationError(pos, exc) from exc
    return Dataset(model.name, grid_spec.kind, noise, int(seed), series)


# -- serialization -------------------------------------------------------------

def dumps_dataset(ds: Dataset) -> str:
    r = ds.series[0].outputs.shape[1] if ds.series else 0
    header = {
        "model": ds.model,
        "grid_kind": ds.grid_kind,
        "noise": ds.noise.to_dict(),
        "seed": ds.seed,
        "n_series": len(ds.series),
        "output_dim": r,
        "series": [
            {"label": s.label, "key": list(s.key),
             "true_theta": None if s.true_theta is None else [float(v) for v in s.true_theta]}
            for s in ds.series
        ],
    }
    lines = [f"# {MAGIC} v{VERSION}", "# " + json.dumps(header, separators=(",", ":")),
             "\t".join(["series", "label", "t"] + [f"y{j + 1}" for j in range(r)])]
    for i, s in enumerate(ds.series):
        for t, row in zip(s.times, s.outputs):
            lines.append("\t".join([str(i), str(s.label), fmt(t)] + [fmt(v) for v in row]))
    return "\n".join(lines) + "\n"


def save_dataset(ds: Dataset, path) -> Path:
    return atomic_write_text(path, dumps_dataset(ds))


def loads_dataset(text: str, source="<string>") -> Dataset:
    lines = text.splitlines()
    if len(lines) < 3:
        raise DatasetFormatError(source, len(lines) + 1, "truncated dataset file")
    try:
        check_magic(lines[0], MAGIC, VERSION, source)
    except ValueError as exc:
        raise DatasetFormatError(source, 1, str(exc)) from None
    if not lines[1].startswith("# "):
        raise DatasetFormatError(source, 2, "missing JSON header")
    try:
        header = json.loads(lines[1][2:])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(source, 2, f"bad JSON header ({exc.msg})") from None
    r = int(header["output_dim"])
    meta = header["series"]
    times = [[] for _ in meta]
    outputs = [[] for _ in meta]
    for lineno, line in enumerate(lines[3:], start=4):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 + r:
            raise DatasetFormatError(source, lineno, f"expected {3 + r} fields, found {len(parts)}")
        try:
            i = int(parts[0])
            label = int(parts[1])
            values = [float(v) for v in parts[2:]]
        except ValueError as exc:
            raise DatasetFormatError(source, lineno, str(exc)) from None
        if not 0 <= i < len(meta) or label != meta[i]["label"]:
            raise DatasetFormatError(source, lineno, "series index or label does not match header")
        times[i].append(values[0])
        outputs[i].append(values[1:])
    series = []
    for i, m in enumerate(meta):
        if not times[i]:
            raise DatasetFormatError(source, len(lines), f"series {i} has no observations")
        theta = None if m["true_theta"] is None else np.array(m["true_theta"], dtype=float)
        series.append(LabeledSeries(np.array(times[i]), np.array(outputs[i]), int(m["label"]),
                                    theta, tuple(m["key"])))
    return Dataset(header["model"], header["grid_kind"], NoiseSpec.from_dict(header["noise"]),
                   int(header["seed"]), series)


def load_dataset(path) -> Dataset:
    path = Path(path)
    return loads_dataset(path.read_text(encoding="utf-8"), source=str(path))
