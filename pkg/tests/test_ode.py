import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from simtsc import ode
from simtsc.models import build_ccm_matrix, build_cml_matrix, get_model, split_ccm


# the absolute tolerances below assume a dose of 100 units
ORACLE_S0 = 100.0


def roi_sample(model, rng):
    lo, hi = model.roi[:, 0], model.roi[:, 1]
    return lo + (hi - lo) * rng.random(model.param_dim)


def linear_parts(model, theta):
    if model.name == "cml":
        K = build_cml_matrix(theta)
    else:
        n = model.state_dim
        leak, lower, upper = split_ccm(n, theta)
        K = build_ccm_matrix(n, leak, lower, upper)
    b = np.zeros(model.state_dim)
    b[0] = 1.0
    s0, k_abs = model.system.consts[-2:]
    return K, b, (s0, k_abs)


def test_toy_decay_matches_exponential():
    toy = get_model("toy")
    grid = np.round(np.arange(11) * 0.1, 12)
    traj = ode.integrate(toy.system, (1.0, 1.0), grid)
    assert traj.outputs[-1, 0] == pytest.approx(np.exp(-1.0), abs=1e-6)
    assert np.max(np.abs(traj.outputs[:, 0] - np.exp(-grid))) <= 1e-6


def test_zero_rate_gives_constant_output():
    toy = get_model("toy")
    grid = np.linspace(0, 1, 11)
    traj = ode.integrate(toy.system, (0.0, 1.0), grid)
    assert np.all(traj.outputs == 1.0)


def test_trajectory_shapes_and_measurement():
    m = get_model("ccm2")
    traj = ode.integrate(m.system, m.class_task.mean_0, m.dense_grid, measurement="full")
    assert traj.states.shape == (len(m.dense_grid), 2)
    assert np.array_equal(traj.outputs, traj.states)
    part = ode.integrate(m.system, m.class_task.mean_0, m.dense_grid)
    assert np.array_equal(part.outputs[:, 0], traj.states[:, 0])


def test_ccm2_class0_agrees_with_matrix_exponential():
    m = get_model("ccm2", s0=ORACLE_S0)
    theta = m.class_task.mean_0
    K, b, u = linear_parts(m, theta)
    oracle = ode.linear_solve(K, b, u, np.zeros(2), m.dense_grid)
    traj = ode.integrate(m.system, theta, m.dense_grid, measurement="full")
    assert np.max(np.abs(traj.states - oracle.states)) <= 1e-6


def test_cml_class0_agrees_with_matrix_exponential():
    m = get_model("cml", s0=ORACLE_S0)
    theta = m.class_task.mean_0
    K, b, u = linear_parts(m, theta)
    oracle = ode.linear_solve(K, b, u, np.zeros(4), m.dense_grid)
    traj = ode.integrate(m.system, theta, m.dense_grid, measurement="full")
    assert np.max(np.abs(traj.states - oracle.states)) <= 1e-6


def test_linear_solve_trivial_cases():
    grid = np.linspace(0, 5, 6)
    flat = ode.linear_solve(np.zeros((2, 2)), np.zeros(2), None, (1.0, 0.0), grid)
    assert np.array_equal(flat.states, np.tile([1.0, 0.0], (6, 1)))
    toy = ode.linear_solve([[-1.0]], [0.0], None, [1.0], np.array([0.0, 1.0]))
    assert toy.states[-1, 0] == pytest.approx(np.exp(-1.0), rel=1e-14)


def test_linear_solve_rejects_resonant_input():
    with pytest.raises(ode.ResonanceError):
        ode.linear_solve([[-0.05]], [1.0], (1.0, 0.05), [0.0], np.array([0.0, 1.0]))


def test_linear_solve_matches_independent_solver():
    K = np.array([[-0.3, 0.1], [0.2, -0.4]])
    grid = np.linspace(0, 10, 6)
    ref = solve_ivp(lambda t, x: K @ x + np.array([1.0, 0.0]) * 5 * 0.7 * np.exp(-0.7 * t),
                    (0, 10), [0.5, 0.0], t_eval=grid, rtol=1e-12, atol=1e-14)
    got = ode.linear_solve(K, [1.0, 0.0], (5.0, 0.7), [0.5, 0.0], grid)
    assert np.max(np.abs(got.states - ref.y.T)) <= 1e-9


@pytest.mark.parametrize("name", ["ccm2", "ccm4", "cml"])
def test_oracle_agreement_over_roi(name):
    m = get_model(name, s0=ORACLE_S0)
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        theta = roi_sample(m, rng)
        K, b, u = linear_parts(m, theta)
        try:
            oracle = ode.linear_solve(K, b, u, np.zeros(m.state_dim), m.dense_grid)
        except ode.ResonanceError:
            continue
        traj = ode.integrate(m.system, theta, m.dense_grid)
        worst = max(worst, float(np.max(np.abs(traj.outputs[:, 0] - oracle.states[:, 0]))))
    assert worst <= 1e-5


def test_default_dose_agrees_relatively():
    m = get_model("ccm4")
    theta = m.class_task.mean_0
    K, b, u = linear_parts(m, theta)
    oracle = ode.linear_solve(K, b, u, np.zeros(4), m.dense_grid)
    traj = ode.integrate(m.system, theta, m.dense_grid)
    peak = float(np.max(np.abs(oracle.states[:, 0])))
    assert np.max(np.abs(traj.outputs[:, 0] - oracle.states[:, 0])) <= 1e-7 * peak


def test_br_matches_reference_solver():
    m = get_model("br")
    theta = m.class_task.mean_0
    from simtsc.models import br_dynamics
    ref = solve_ivp(lambda t, x: br_dynamics(t, x, theta), (0, 12), theta[:2],
                    t_eval=m.dense_grid, rtol=1e-12, atol=1e-12)
    traj = ode.integrate(m.system, theta, m.dense_grid, measurement="full")
    assert np.max(np.abs(traj.states - ref.y.T)) <= 1e-6


@pytest.mark.parametrize("name", ["toy", "ccm2", "cml", "br"])
def test_halving_tolerance_changes_outputs_little(name):
    m = get_model(name)
    theta = m.class_task.mean_0
    tol = 1e-8
    a = ode.integrate(m.system, theta, m.dense_grid, rel_tol=tol, abs_tol=tol)
    b = ode.integrate(m.system, theta, m.dense_grid, rel_tol=tol / 2, abs_tol=tol / 2)
    scale = max(1.0, float(np.max(np.abs(a.outputs))))
    assert np.max(np.abs(a.outputs - b.outputs)) < 10 * tol * scale


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_integration_is_bit_deterministic(seed):
    m = get_model("ccm4")
    theta = roi_sample(m, np.random.default_rng(seed))
    a = ode.integrate(m.system, theta, m.dense_grid)
    b = ode.integrate(m.system, theta, m.dense_grid)
    assert a.outputs.tobytes() == b.outputs.tobytes()


def test_bad_grids_and_parameters_are_rejected():
    toy = get_model("toy")
    with pytest.raises(ValueError):
        ode.integrate(toy.system, (1.0, 1.0), [0.1, 0.2])
    with pytest.raises(ValueError):
        ode.integrate(toy.system, (1.0, 1.0), [0.0, 0.2, 0.2])
    with pytest.raises(ValueError):
        ode.integrate(toy.system, (np.nan, 1.0), [0.0, 1.0])
    with pytest.raises(ValueError):
        ode.integrate(toy.system, (1.0, 1.0), [0.0, 1.0], rel_tol=0.0)


def test_step_budget_failure_reports_time():
    m = get_model("br")
    with pytest.raises(ode.IntegrationError) as info:
        ode.integrate(m.system, m.class_task.mean_0, m.dense_grid, max_steps=2)
    assert 0.0 <= info.value.time < 12.0
