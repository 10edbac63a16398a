"""Numerical integration of the parametrised ODE systems.

:func:`integrate` is the adaptive Dormand-Prince 5(4) integrator used
everywhere in the pipeline.  :func:`linear_solve` evaluates the closed-form
solution of a linear system driven by an exponentially decaying input and
is only used to check the integrator.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg

from . import _kernels

DEFAULT_RTOL = 1e-8
DEFAULT_ATOL = 1e-10
DEFAULT_MAX_STEPS = 20000

_FAILURES = {
    _kernels.FAIL_UNDERFLOW: "step size underflow",
    _kernels.FAIL_MAX_STEPS: "step budget exhausted",
    _kernels.FAIL_NONFINITE: "non-finite derivative",
}


class IntegrationError(RuntimeError):
    """Raised when the integrator cannot continue; ``time`` is where it stopped."""

    def __init__(self, reason: str, time: float):
        super().__init__(f"integration failed at t={time:.6g}: {reason}")
        self.reason = reason
        self.time = time


class ResonanceError(ValueError):
    """The input decay rate coincides with an eigenvalue of -K."""


@dataclass(frozen=True)
class DynamicalSystem:
    """A parametrised ODE ``dx/dt = f(t, x; theta)`` with its measurement maps.

    The compiled right-hand side is selected by ``rhs_kind``; ``prep_kind``
    and ``consts`` translate a parameter vector into the kernel's parameter
    block and the initial state.  Input constants live in ``consts`` and are
    never part of theta.
    """

    state_dim: int
    param_dim: int
    rhs_kind: int
    prep_kind: int
    consts: np.ndarray
    input: Optional[Callable[[float], float]] = None
    block_size: int = field(default=0)

    def __post_init__(self):
        if self.block_size == 0:
            size = (self.state_dim ** 2 + 2 if self.rhs_kind == _kernels.RHS_LINEAR
                    else 6)
            object.__setattr__(self, "block_size", size)
        self.consts.setflags(write=False)

    def prepare(self, theta) -> tuple[np.ndarray, np.ndarray]:
        theta = np.ascontiguousarray(theta, dtype=float)
        if theta.shape != (self.param_dim,):
            raise ValueError(f"expected {self.param_dim} parameters, got shape {theta.shape}")
        p = np.empty(self.block_size)
        x0 = np.empty(self.state_dim)
        _kernels.prep(self.prep_kind, theta, self.consts, p, x0)
        return p, x0

    def rhs(self, t: float, x, theta) -> np.ndarray:
        p, _ = self.prepare(theta)
        dx = np.empty((1, self.state_dim))
        _kernels.rhs(self.rhs_kind, float(t), np.asarray(x, dtype=float), p, dx, 0)
        return dx[0]

    def initial_state(self, theta) -> np.ndarray:
        return self.prepare(theta)[1]

    def measurement_full(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float)

    def measurement_partial(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float)[..., :1]


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    outputs: np.ndarray


def check_grid(grid) -> np.ndarray:
    grid = np.ascontiguousarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("time grid must be a non-empty vector")
    if grid[0] != 0.0:
        raise ValueError("time grid must start at t=0")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("time grid must be strictly increasing")
    return grid


def integrate(system: DynamicalSystem, theta, grid, rel_tol: float = DEFAULT_RTOL,
              abs_tol: float = DEFAULT_ATOL, measurement: str = "partial",
              max_steps: int = DEFAULT_MAX_STEPS) -> Trajectory:
    """Integrate ``system`` at ``theta`` and sample the solution on ``grid``.

    Steps are chosen adaptively; states at the grid times come from the
    method's dense output.

    Raises
    ------
    IntegrationError
        On step-size underflow, an exhausted step budget or a non-finite
        derivative at an accepted state.
    """
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    if rel_tol <= 0 or abs_tol <= 0:
        raise ValueError("tolerances must be positive")
    grid = check_grid(grid)
    p, x0 = system.prepare(theta)
    states = np.empty((grid.size, system.state_dim))
    status, t_fail = _kernels.dopri5(system.rhs_kind, p, x0, grid, float(rel_tol),
                                     float(abs_tol), int(max_steps), states)
    if status != _kernels.OK:
        raise IntegrationError(_FAILURES[status], float(t_fail))
    if measurement == "partial":
        outputs = system.measurement_partial(states)
    elif measurement == "full":
        outputs = system.measurement_full(states)
    else:
        raise ValueError(f"unknown measurement {measurement!r}")
    return Trajectory(grid, states, outputs.copy())


def linear_solve(K, b_in, u: Optional[Sequence[float]], x0, grid) -> Trajectory:
    """Exact solution of ``dx/dt = K x + b u(t)`` with ``u = S0 k e^{-k t}``.

    ``u`` is ``(S0, k_abs)`` or ``None`` for an unforced system.  With
    ``M = (K + k I)^{-1}`` the forced part is ``S0 k M (e^{Kt} - e^{-kt} I) b``.
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    d = K.shape[0]
    b_in = np.asarray(b_in, dtype=float).reshape(d)
    x0 = np.asarray(x0, dtype=float).reshape(d)
    grid = check_grid(grid)
    if not np.all(np.isfinite(K)):
        raise ValueError("K must be finite")

    forced = u is not None and u[0] != 0.0
    if forced:
        s0, k_abs = float(u[0]), float(u[1])
        eig = np.linalg.eigvals(K)
        if np.min(np.abs(eig + k_abs)) < 1e-12:
            raise ResonanceError(f"k_abs={k_abs} is an eigenvalue of -K")
        M = np.linalg.solve(K + k_abs * np.eye(d), np.eye(d))

    states = np.empty((grid.size, d))
    for i, t in enumerate(grid):
        E = linalg.expm(K * t)
        x = E @ x0
        if forced:
            x = x + s0 * k_abs * (M @ ((E - np.exp(-k_abs * t) * np.eye(d)) @ b_in))
        states[i] = x
    return Trajectory(grid, states, states[:, :1].copy())
