import math

import numpy as np
import pytest

from simtsc import experiments, report
from simtsc.experiments import (FitCache, Pools, Settings, TrialPlan, aggregate, build_pools,
                                noise_sweep_summary, run_trials, train_sizes, verify_si)
from simtsc.data import TimeGridSpec
from simtsc.inference import OptimizerConfig
from simtsc.models import get_model
from simtsc.svm import HyperGrid

TINY = Settings(scale=0.1, optimizer=OptimizerConfig(evals_per_param=100, polish_iters=50),
                n_trials=3)


def test_aggregate_examples():
    p = aggregate([0.1, 0.1, 0.1])
    assert p.mean_error == pytest.approx(0.1) and p.std_error == 0.0 and p.valid
    p = aggregate([0.0, 1.0], [0.5, 0.7])
    assert p.mean_error == 0.5 and p.std_error == pytest.approx(math.sqrt(0.5), rel=1e-15)
    assert p.mean_rel_sv == pytest.approx(0.6)
    p = aggregate([0.3])
    assert p.std_error == 0.0 and p.degenerate and p.valid
    p = aggregate([])
    assert not p.valid and math.isnan(p.mean_error)


def test_aggregate_marks_too_few_successes_invalid():
    assert not aggregate([0.1, float("nan"), float("nan")], n_trials=3).valid
    assert aggregate([0.1, 0.2, float("nan"), float("nan")], n_trials=4).valid


def test_noise_sweep_summary_arithmetic():
    s = noise_sweep_summary([1.0, 2.0, 3.0], [0.4, 0.45, 0.5], [0.2, 0.4, 0.5])
    assert s.sigma_star == 1.0
    assert s.delta_eps_star == pytest.approx(0.2)
    assert s.mean_delta_eps == pytest.approx(0.08333, abs=1e-5)


def test_train_sizes_double_up_to_maximum():
    assert train_sizes(10, 100) == (10, 20, 40, 80, 100)
    assert train_sizes(10, 10) == (10,)
    assert train_sizes(10, 200) == (10, 20, 40, 80, 160, 200)


def test_trial_plan_validation():
    TrialPlan("br", "PO", "dense", 1.0, (10, 200), 20, 0)
    with pytest.raises(ValueError):
        TrialPlan("br", "PO", "dense", 1.0, (10, 201), 20, 0)
    with pytest.raises(ValueError):
        TrialPlan("br", "XX", "dense", 1.0, (10,), 20, 0)
    with pytest.raises(ValueError):
        TrialPlan("br", "PO", "dense", 1.0, (10,), 0, 0)


def test_desk_settings():
    s = Settings(scale=0.5)
    br = get_model("br")
    assert s.trials(1) == 10 and s.trials(2) == 5
    assert s.test_per_class(br) == 100
    assert s.pool_per_class(br) == 100
    assert s.hyper_grid().c_values == (0.01, 1.0, 1000.0)
    with pytest.raises(ValueError):
        Settings(scale=0.0)


@pytest.mark.parametrize("name, tol", [("toy", 1e-8), ("br", 1e-5), ("ccm2", 1e-5)])
def test_verify_si_examples(name, tol):
    rep = verify_si(name, n_pairs=50, tol=tol)
    assert rep.passed and rep.max_output_dev <= tol
    assert rep.line().startswith("PASS")


def test_verify_si_checks_transfer_function_for_cml():
    rep = verify_si("cml", n_pairs=50, tol=1e-5, sim_tol=1e-9)
    assert rep.max_laplace_dev is not None and rep.max_laplace_dev <= 1e-9
    assert rep.passed and "oracle" in rep.line()


def test_verify_si_fails_at_zero_tolerance():
    rep = verify_si("ccm2", n_pairs=5, tol=0.0, sim_tol=0.0)
    assert not rep.passed and rep.line().startswith("FAIL")


def fake_pools(rng, n=12, n_test=8):
    labels = np.repeat([0, 1], n)
    X = rng.standard_normal((2 * n, 2)) + labels[:, None] * 3
    tl = np.repeat([0, 1], n_test)
    T = rng.standard_normal((2 * n_test, 2)) + tl[:, None] * 3
    X_po = X.copy()
    X_po[0] = np.nan
    return Pools({"FO": X, "PO": X_po}, {"FO": T, "PO": T}, labels, tl)


def test_trials_are_balanced_and_skip_invalid_rows(monkeypatch):
    pools = fake_pools(np.random.default_rng(0))
    seen = []
    original = experiments.cv_grid_search

    def spy(X, y, grid, rng, *args):
        seen.append((X.copy(), y.copy()))
        return original(X, y, grid, rng, *args)

    monkeypatch.setattr(experiments, "cv_grid_search", spy)
    recs = run_trials(pools, "toy", "dense", 0.1, (5, 11), 3, HyperGrid().thinned(0.5), 1,
                      (9, 0, 0, 0))
    assert len(recs) == 2 * 3 * 2
    for X, y in seen:
        assert np.sum(y == 0) == np.sum(y == 1)
        assert np.all(np.isfinite(X))
    # both conditions of a trial see the same rows
    for a, b in zip(seen[0::2], seen[1::2]):
        assert np.array_equal(a[1], b[1])
    assert all(0.0 <= r.error <= 1.0 for r in recs)


def test_degenerate_single_series_per_class():
    pools = fake_pools(np.random.default_rng(1))
    recs = run_trials(pools, "toy", "dense", 0.1, (1,), 2, HyperGrid().thinned(0.5), 1,
                      (9, 0, 0, 0))
    pts = experiments.curves_from_records(recs, 2)
    assert all(len(v) == 1 for v in pts.values())


def test_fo_and_po_pools_share_draws():
    m = get_model("ccm2")
    cache = FitCache()
    grid = TimeGridSpec("dense", m.dense_grid)
    both = build_pools(m, grid, None, ("FO", "PO", "PO+SIM"), 3, 2, 5, TINY, cache)
    fits = cache.hits
    po = build_pools(m, grid, None, ("PO", "PO+SIM"), 3, 2, 5, TINY, cache)
    # the PO-only pool reuses every partial-observation fit of the first call
    assert cache.hits - fits == 10
    assert np.array_equal(both.train["PO"], po.train["PO"])
    assert np.array_equal(both.train_labels, po.train_labels)


def test_experiment1_runs_and_is_reproducible(tmp_path):
    a = experiments.run_experiment(1, "toy", 3, TINY)
    b = experiments.run_experiment(1, "toy", 3, TINY)
    assert set(a.curves) == {("PO", "dense", 0.1), ("PO+SIM", "dense", 0.1)}
    assert [p.x for p in a.curves[("PO", "dense", 0.1)]] == [10]
    assert report.results_text(a, {}) == report.results_text(b, {})
    paths = report.write_outputs(a, tmp_path, {"scale": 0.1})
    back = report.load_results(paths["results"])
    assert report.summary_text(back) == paths["summary"].read_text()
    svg = paths["plot"].read_text()
    assert svg.startswith("<?xml") and "simtsc plot data" in svg
    assert report.figure_svg(back) == svg


def test_experiment1_has_three_arms_for_compartmental_models():
    s = Settings(scale=0.1, optimizer=OptimizerConfig(evals_per_param=30, polish_iters=0),
                 n_trials=1)
    res = experiments.run_experiment1("ccm2", 0, s)
    assert {k[0] for k in res.curves} == {"FO", "PO", "PO+SIM"}


def test_experiment2_summary_matches_curves(tmp_path):
    s = Settings(scale=0.05, optimizer=OptimizerConfig(evals_per_param=60, polish_iters=20),
                 n_trials=2, exp2_n_train=4)
    res = experiments.run_experiment2("toy", 1, s)
    assert res.sigmas == get_model("toy").sigma_range
    po = [res.curves[("PO", "dense", x)][0].mean_error for x in res.sigmas]
    sim = [res.curves[("PO+SIM", "dense", x)][0].mean_error for x in res.sigmas]
    assert res.summary == noise_sweep_summary(res.sigmas, po, sim)
    paths = report.write_outputs(res, tmp_path, {})
    assert report.load_results(paths["results"]).summary == res.summary
    assert "sigma_star" in paths["summary"].read_text()


def test_experiment3_curve_count():
    s = Settings(scale=0.1, optimizer=OptimizerConfig(evals_per_param=40, polish_iters=0),
                 n_trials=1)
    res = experiments.run_experiment3("toy", 0, s, sizes=(10,))
    assert len(res.curves) == 6
    assert {k[1] for k in res.curves} == set(experiments.GRID_KINDS)
    assert len(report.summary_lines(res)) == 4
