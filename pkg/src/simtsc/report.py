"""Result tables and SVG plots for experiment runs."""
from __future__ import annotations

import io
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiments import (CONDITIONS, GRID_KINDS, ExperimentResult, TrialRecord,  # noqa: E402
                          curves_from_records, noise_sweep_summary)
from .io import atomic_write_text, check_magic, fmt  # noqa: E402

RESULTS_MAGIC = "simtsc-results"
SUMMARY_MAGIC = "simtsc-summary"
VERSION = 1
COLUMNS = ("model", "condition", "grid", "sigma", "n_train", "trial", "error", "rel_sv")
COLORS = {"FO": "#1b9e77", "PO": "#d95f02", "PO+SIM": "#7570b3"}
STYLES = {"dense": "-", "sparse": "--", "irregular": ":"}


def _num(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else fmt(x)


def _cell(mean: float, std: float) -> str:
    if math.isnan(mean):
        return "n/a"
    return f"{mean:.3f}({std:.3f})"


def results_text(result: ExperimentResult, header: dict) -> str:
    head = dict(header, exp_id=result.exp_id, model=result.model, seed=result.seed,
                n_trials=result.n_trials)
    lines = [f"# {RESULTS_MAGIC} v{VERSION}",
             "# " + json.dumps(head, sort_keys=True, separators=(",", ":")),
             "\t".join(COLUMNS)]
    for r in result.records:
        lines.append("\t".join([r.model, r.condition, r.grid, _num(r.sigma), str(r.n_train),
                                str(r.trial), _num(r.error), _num(r.rel_sv)]))
    return "\n".join(lines) + "\n"


def load_results(path) -> ExperimentResult:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if len(lines) < 3:
        raise ValueError(f"{path}: line {len(lines) + 1}: truncated results file")
    check_magic(lines[0], RESULTS_MAGIC, VERSION, path)
    try:
        head = json.loads(lines[1].removeprefix("# "))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: line 2: bad JSON header ({exc.msg})") from None
    records = []
    for lineno, line in enumerate(lines[3:], start=4):
        parts = line.split("\t")
        if len(parts) != len(COLUMNS):
            raise ValueError(f"{path}: line {lineno}: expected {len(COLUMNS)} fields")
        try:
            records.append(TrialRecord(parts[0], parts[1], parts[2], float(parts[3]),
                                       int(parts[4]), int(parts[5]), float(parts[6]),
                                       float(parts[7])))
        except ValueError as exc:
            raise ValueError(f"{path}: line {lineno}: {exc}") from None
    n_trials = int(head["n_trials"])
    curves = curves_from_records(records, n_trials)
    result = ExperimentResult(int(head["exp_id"]), head["model"], int(head["seed"]), records,
                              curves, n_trials, meta=head)
    if result.exp_id == 2:
        sigmas = sorted({r.sigma for r in records})
        result.sigmas = tuple(sigmas)
        if ("PO", "dense", sigmas[0]) in curves and ("PO+SIM", "dense", sigmas[0]) in curves:
            result.summary = noise_sweep_summary(
                sigmas, [curves[("PO", "dense", s)][0].mean_error for s in sigmas],
                [curves[("PO+SIM", "dense", s)][0].mean_error for s in sigmas])
    return result


def summary_lines(result: ExperimentResult) -> list:
    """Table-style digest: errors at the curve ends, noise summary or grid comparison."""
    out = []
    if result.exp_id == 1:
        out.append("# table\tcondition\terror@N_min\terror@N_max\trel_sv@N_min\trel_sv@N_max")
        for c in CONDITIONS:
            pts = result.curves.get((c, "dense", _sigma_of(result, c)))
            if not pts:
                continue
            a, b = pts[0], pts[-1]
            out.append("\t".join(["table", c, _cell(a.mean_error, a.std_error),
                                  _cell(b.mean_error, b.std_error),
                                  _cell(a.mean_rel_sv, a.std_rel_sv),
                                  _cell(b.mean_rel_sv, b.std_rel_sv)]))
    elif result.exp_id == 2 and result.summary is not None:
        s = result.summary
        out.append("# table\tsigma_star\tdelta_eps_star\tmean_delta_eps")
        out.append(f"table\t{s.sigma_star:g}\t{s.delta_eps_star:.4f}\t{s.mean_delta_eps:.4f}")
    elif result.exp_id == 3:
        out.append("# table\tgrid\tPO@N_min\tPO+SIM@N_min")
        for g in GRID_KINDS:
            row = [g]
            for c in ("PO", "PO+SIM"):
                pts = [v for (cc, gg, _), v in result.curves.items() if cc == c and gg == g]
                row.append(_cell(pts[0][0].mean_error, pts[0][0].std_error) if pts else "n/a")
            out.append("\t".join(["table"] + row))
    return out


def _sigma_of(result, condition):
    for (c, _, s) in result.curves:
        if c == condition:
            return s
    return None


def summary_text(result: ExperimentResult) -> str:
    lines = [f"# {SUMMARY_MAGIC} v{VERSION}",
             "# " + json.dumps({"exp_id": result.exp_id, "model": result.model,
                                "seed": result.seed, "n_trials": result.n_trials},
                               sort_keys=True, separators=(",", ":")),
             "\t".join(["model", "condition", "grid", "sigma", "n_train", "n_ok", "mean_error",
                        "std_error", "mean_rel_sv", "std_rel_sv", "valid", "degenerate"])]
    for (c, g, s), pts in result.curves.items():
        for p in pts:
            lines.append("\t".join([result.model, c, g, _num(s), str(int(p.x)), str(p.n_ok),
                                    _num(p.mean_error), _num(p.std_error), _num(p.mean_rel_sv),
                                    _num(p.std_rel_sv), str(int(p.valid)),
                                    str(int(p.degenerate))]))
    lines += summary_lines(result)
    return "\n".join(lines) + "\n"


def summary_headline(result: ExperimentResult) -> str:
    if result.exp_id == 2 and result.summary is not None:
        s = result.summary
        return (f"{result.model}: delta_eps*={s.delta_eps_star:.4f} at sigma*={s.sigma_star:g}, "
                f"mean delta_eps={s.mean_delta_eps:.4f}")
    n = len(result.curves)
    return f"{result.model}: experiment {result.exp_id}, {n} curves, {len(result.records)} trial records"


# -- plots ---------------------------------------------------------------------------

def _band(ax, xs, pts, color, style, label):
    m = np.array([p.mean_error for p in pts])
    s = np.array([p.std_error for p in pts])
    ax.plot(xs, m, style, color=color, marker="o", ms=3, label=label)
    ax.fill_between(xs, m - s, m + s, color=color, alpha=0.2, lw=0)


def _data_comment(result: ExperimentResult) -> str:
    rows = ["condition grid sigma x mean_error std_error mean_rel_sv std_rel_sv"]
    for (c, g, s), pts in result.curves.items():
        for p in pts:
            rows.append(f"{c} {g} {s:g} {p.x:g} {p.mean_error:.6g} {p.std_error:.6g} "
                        f"{p.mean_rel_sv:.6g} {p.std_rel_sv:.6g}")
    body = "\n".join(rows).replace("--", "- -")
    return f"<!-- simtsc plot data\n{body}\n-->\n"


def _series_for_plot(result: ExperimentResult):
    """(condition, grid, xs, points) per drawn line."""
    if result.exp_id == 2:
        for c in ("PO", "PO+SIM"):
            keys = sorted(k for k in result.curves if k[0] == c)
            if keys:
                yield c, "dense", [k[2] for k in keys], [result.curves[k][0] for k in keys]
        return
    for (c, g, _), pts in result.curves.items():
        yield c, g, [p.x for p in pts], pts


def figure_svg(result: ExperimentResult) -> str:
    xlabel = ("observation noise sigma" if result.exp_id == 2
              else "training series per class")
    with plt.rc_context({"svg.hashsalt": "simtsc", "svg.fonttype": "none", "font.size": 9}):
        if result.exp_id == 3:
            fig, axes = plt.subplots(1, 3, figsize=(10, 3.2), sharey=True)
            panels = dict(zip(GRID_KINDS, axes))
            for c, g, xs, pts in _series_for_plot(result):
                _band(panels[g], xs, pts, COLORS[c], STYLES[g], c)
            for g, ax in panels.items():
                ax.set_title(f"{result.model}, {g} grid")
                ax.set_xlabel(xlabel)
                ax.legend()
            axes[0].set_ylabel("generalization error")
        else:
            fig, (ax, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
            for c, g, xs, pts in _series_for_plot(result):
                _band(ax, xs, pts, COLORS[c], "-", c)
                ax2.errorbar(xs, [p.mean_rel_sv for p in pts], [p.std_rel_sv for p in pts],
                             color=COLORS[c], marker="o", ms=3, capsize=2, label=c)
            for a in (ax, ax2):
                a.set_xlabel(xlabel)
                a.legend()
            ax.set_ylabel("generalization error")
            ax2.set_ylabel("relative number of support vectors")
            ax.set_title(f"{result.model}, experiment {result.exp_id}")
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": "simtsc"})
        plt.close(fig)
    svg = buf.getvalue()
    cut = svg.index("?>") + 3 if svg.startswith("<?xml") else 0
    return svg[:cut] + _data_comment(result) + svg[cut:]


def write_outputs(result: ExperimentResult, out_dir, header: dict) -> dict:
    out_dir = Path(out_dir)
    stem = f"exp{result.exp_id}_{result.model}"
    paths = {
        "results": atomic_write_text(out_dir / f"{stem}_results.tsv", results_text(result, header)),
        "summary": atomic_write_text(out_dir / f"{stem}_summary.tsv", summary_text(result)),
        "plot": atomic_write_text(out_dir / f"{stem}.svg", figure_svg(result)),
    }
    return paths
