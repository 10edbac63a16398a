import numpy as np
import pytest

from simtsc import inference, ode
from simtsc.data import LabeledSeries, NoiseSpec, TimeGridSpec, generate_dataset
from simtsc.inference import (FeatureSet, OptimizerConfig, apply_sim, log_likelihood,
                              map_estimate)
from simtsc.models import MODEL_NAMES, RegistryError, gauge_transform, get_model

# the integrator defaults make the objective exact enough for 1e-6 comparisons
TIGHT = OptimizerConfig(rel_tol=ode.DEFAULT_RTOL, abs_tol=ode.DEFAULT_ATOL,
                        max_steps=ode.DEFAULT_MAX_STEPS)
QUICK = OptimizerConfig(evals_per_param=1000)


def noiseless(model, theta, grid=None, label=0):
    grid = model.dense_grid if grid is None else grid
    y = ode.integrate(model.system, theta, grid, measurement="partial").outputs
    return LabeledSeries(grid, y, label, np.asarray(theta, dtype=float), (0, label, 0))


def test_toy_likelihood_at_truth():
    toy = get_model("toy")
    series = noiseless(toy, (1.0, 1.0))
    value = log_likelihood((1.0, 1.0), series, NoiseSpec.partial(0.01), toy, TIGHT)
    assert value == pytest.approx(11 * (-0.5 * np.log(2 * np.pi * 0.01)), abs=1e-9)
    assert value == pytest.approx(15.2201, abs=1e-4)


def test_single_observation_with_unit_normaliser():
    toy = get_model("toy")
    series = LabeledSeries(np.array([0.0]), np.array([[1.0]]), 0)
    value = log_likelihood((2.0, 0.7), series, NoiseSpec.partial(1 / (2 * np.pi)), "toy")
    assert value == pytest.approx(0.0, abs=1e-14)


def test_full_observation_uses_diagonal_covariance():
    m = get_model("ccm2")
    theta = m.class_task.mean_0
    grid = m.dense_grid
    states = ode.integrate(m.system, theta, grid, measurement="full").states
    offset = np.array([1.0, -2.0])
    series = LabeledSeries(grid, states + offset, 0)
    var = np.array([4.0, 9.0])
    got = log_likelihood(theta, series, NoiseSpec.full(var), m, TIGHT)
    want = -0.5 * len(grid) * (np.sum(np.log(2 * np.pi * var)) + np.sum(offset ** 2 / var))
    assert got == pytest.approx(want, rel=1e-9)


def test_failed_integration_gives_minus_infinity():
    m = get_model("br")
    series = noiseless(m, m.class_task.mean_0)
    cfg = OptimizerConfig(max_steps=2)
    assert log_likelihood(m.class_task.mean_0, series, NoiseSpec.partial(1.0), m, cfg) == -np.inf


def test_likelihood_rejects_zero_variance():
    toy = get_model("toy")
    with pytest.raises(ValueError):
        log_likelihood((1, 1), noiseless(toy, (1, 1)), NoiseSpec.partial(0.0), toy)


@pytest.mark.parametrize("name", MODEL_NAMES)
def test_likelihood_is_gauge_invariant(name):
    m = get_model(name, s0=100.0)
    noise = NoiseSpec.for_model(m, "partial")
    ds = generate_dataset(m, TimeGridSpec("dense", m.dense_grid), noise, 5, 1)
    rng = np.random.default_rng(2)
    for i in range(50):
        series = ds.series[i % len(ds)]
        theta = m.roi[:, 0] + (m.roi[:, 1] - m.roi[:, 0]) * rng.random(m.param_dim)
        other = gauge_transform(m, theta, float(np.exp(rng.uniform(-0.4, 0.4))), rng)
        a = log_likelihood(theta, series, noise, m, TIGHT)
        b = log_likelihood(other, series, noise, m, TIGHT)
        assert a == pytest.approx(b, abs=1e-6)


@pytest.mark.parametrize("name", ["ccm4", "cml"])
def test_likelihood_gauge_invariance_at_default_dose(name):
    m = get_model(name)
    noise = NoiseSpec.for_model(m, "partial")
    series = generate_dataset(m, TimeGridSpec("dense", m.dense_grid), noise, 1, 1).series[0]
    rng = np.random.default_rng(3)
    for _ in range(20):
        theta = series.true_theta
        other = gauge_transform(m, theta, float(np.exp(rng.uniform(-0.4, 0.4))), rng)
        a = log_likelihood(theta, series, noise, m, TIGHT)
        b = log_likelihood(other, series, noise, m, TIGHT)
        assert abs(a - b) <= 1e-8 * abs(a)


def test_toy_inversion_recovers_product():
    toy = get_model("toy")
    series = noiseless(toy, (1.0, 1.0))
    res = map_estimate(series, toy, NoiseSpec.partial(0.01), np.random.default_rng(0))
    assert abs(res.phi[0] - 1.0) <= 1e-2
    assert res.converged and toy.in_roi(res.theta_map)
    assert res.evaluations >= 2 * 3000


def test_br_inversion_recovers_combinations():
    br = get_model("br")
    series = noiseless(br, br.class_task.mean_0)
    res = map_estimate(series, br, NoiseSpec.partial(1.0), np.random.default_rng(1), QUICK)
    want = np.array([1.25, 0.5, 0.05, 18.0, 10.0])
    assert np.max(np.abs(res.phi / want - 1.0)) <= 0.02


def test_flat_objective_is_flagged():
    toy = get_model("toy")
    series = LabeledSeries(np.array([0.0]), np.array([[1.0]]), 0)
    res = map_estimate(series, toy, NoiseSpec.partial(0.01), np.random.default_rng(0), QUICK)
    assert not res.converged
    assert toy.in_roi(res.theta_map)


def test_polish_never_worsens_annealing(monkeypatch):
    m = get_model("ccm2")
    noise = NoiseSpec.for_model(m, "partial")
    series = generate_dataset(m, TimeGridSpec("dense", m.dense_grid), noise, 1, 4).series[0]
    cfg = OptimizerConfig(evals_per_param=300)
    seen = {}
    original = inference.Objective.anneal

    def spy(self, *args):
        out = original(self, *args)
        seen["anneal"] = out[1]
        return out

    monkeypatch.setattr(inference.Objective, "anneal", spy)
    res = map_estimate(series, m, noise, np.random.default_rng(5), cfg)
    assert -res.log_likelihood <= seen["anneal"]


def test_map_estimate_is_seed_deterministic():
    m = get_model("ccm2")
    noise = NoiseSpec.for_model(m, "partial")
    series = generate_dataset(m, TimeGridSpec("dense", m.dense_grid), noise, 1, 4).series[0]
    cfg = OptimizerConfig(evals_per_param=200)
    a = map_estimate(series, m, noise, np.random.default_rng(9), cfg)
    b = map_estimate(series, m, noise, np.random.default_rng(9), cfg)
    assert a.theta_map.tobytes() == b.theta_map.tobytes()
    assert a.log_likelihood == b.log_likelihood


def test_annealing_stays_in_the_box():
    from simtsc import _kernels
    m = get_model("br")
    series = noiseless(m, m.class_task.mean_0)
    obj = inference.Objective(series, m, NoiseSpec.partial(1.0))
    rng = np.random.default_rng(0)
    n = m.param_dim
    lo, hi = m.roi[:, 0], m.roi[:, 1]
    start = lo + (hi - lo) * rng.random(n)
    best, f_best, _, _ = obj.anneal(start, obj(start), 10.0, rng.standard_normal((500, n)) * 5,
                                    rng.random(500))
    assert m.in_roi(best)
    for v in 10 * rng.standard_normal(1000):
        x = _kernels.reflect(float(v), 0.0, 1.0)
        assert 0.0 <= x <= 1.0


def test_apply_sim_dispatch():
    assert np.array_equal(apply_sim("toy", (1, 1)), [1.0])
    assert np.allclose(apply_sim("ccm2", get_model("ccm2").class_task.mean_0),
                       [-0.025, -0.089, 7.4e-4])
    assert np.allclose(apply_sim("br", get_model("br").class_task.mean_1),
                       [1.25, 0.5, 0.05, 14.4, 10])
    with pytest.raises(RegistryError):
        apply_sim("nope", (1, 1))


def test_feature_dimensions_and_dropping():
    cml = get_model("cml")
    fits = [inference.MapResult("cml", cml.class_task.mean_0, 0.0, 10, True), None]
    theta = inference.features_from_fits(fits, [0, 1], cml, "theta")
    phi = inference.features_from_fits(fits, [0, 1], cml, "phi")
    assert theta.features.shape == (1, 10) and phi.features.shape == (1, 7)
    assert phi.dropped == [1] and list(phi.labels) == [0]
    br = get_model("br")
    bad = [inference.MapResult("br", np.array([1, 1, 1, 0.0, 1, 1]), 0.0, 1, True)]
    assert inference.features_from_fits(bad, [1], br, "phi").dropped == [0]
    with pytest.raises(ValueError):
        inference.features_from_fits(fits, [0, 1], cml, "other")


def test_toy_phi_features_have_one_column():
    toy = get_model("toy")
    ds = generate_dataset(toy, TimeGridSpec("dense", toy.dense_grid), NoiseSpec.partial(0.01), 2, 0)
    fs = inference.dataset_to_features(ds, "phi", config=QUICK)
    assert fs.features.shape == (4, 1) and len(fs.dropped) == 0
    assert np.array_equal(fs.labels, ds.labels)


def test_gauge_perturbed_duplicate_gives_same_phi():
    m = get_model("ccm2")
    theta = m.class_task.mean_0
    moved = gauge_transform(m, theta, 1.2)
    z = np.random.default_rng(0).standard_normal(len(m.dense_grid)) * 10
    noise = NoiseSpec.for_model(m, "partial")
    phis = []
    for t in (theta, moved):
        series = noiseless(m, t)
        series.outputs[:, 0] += z
        phis.append(map_estimate(series, m, noise, np.random.default_rng(4), QUICK).phi)
    assert np.allclose(phis[0], phis[1], rtol=1e-3, atol=1e-6)


def test_feature_file_round_trip(tmp_path):
    fs = FeatureSet("ccm2", "phi", np.array([[0.1, -1e-300, 3.0], [np.pi, 2.5, 1e10]]),
                    np.array([0, 1]), [4], 123.5)
    path = inference.save_features(fs, tmp_path / "f.tsv")
    back = inference.load_features(path)
    assert back.features.tobytes() == fs.features.tobytes()
    assert list(back.labels) == [0, 1] and back.dropped == [4] and back.mode == "phi"
    text = path.read_text().splitlines()
    text[3] = "1\t2.0"
    with pytest.raises(ValueError, match="line 4"):
        inference.loads_features("\n".join(text))
