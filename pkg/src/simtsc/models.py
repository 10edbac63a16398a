"""The five example systems: dynamics, regions of interest, class
distributions, identifiable-combination maps and gauge transformations.

Parameter orderings
-------------------
toy   (a, b)
ccmN  (k01..k0N, k12, k23, .., k_{N-1,N}, k21, k32, .., k_{N,N-1})
cml   (k01, k02, k03, k04, k12, k21, k23, k42, k34, k43)
br    (b1, b2, mu_m, K_s, Y, K_d)

``k_ij`` is the transfer rate from compartment j into compartment i and
``k_0i`` the leakage out of compartment i.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Callable, Optional

import numpy as np

from . import _kernels
from .ode import DynamicalSystem

MODEL_NAMES = ("toy", "ccm2", "ccm4", "cml", "br")

# Prednisone absorption input u(t) = S0 * k_abs * exp(-k_abs t) into compartment 1.
DEFAULT_S0 = 1.0e4
DEFAULT_K_ABS = 0.05

GAUGE_RETRIES = 100


class RegistryError(KeyError):
    def __str__(self):
        return f"unknown model {self.args[0]!r}; choose from {', '.join(MODEL_NAMES)}"


class DomainError(ValueError):
    pass


class GaugeNotFoundError(RuntimeError):
    pass


@lru_cache(maxsize=None)
def load_constants() -> dict:
    text = resources.files("simtsc").joinpath("constants.json").read_text()
    return json.loads(text)


@dataclass(frozen=True)
class ClassTask:
    mean_0: np.ndarray
    mean_1: np.ndarray
    cov_0: np.ndarray
    cov_1: np.ndarray
    n_train: int
    n_test: int

    def mean(self, label: int) -> np.ndarray:
        return self.mean_1 if label else self.mean_0

    def cov(self, label: int) -> np.ndarray:
        return self.cov_1 if label else self.cov_0


@dataclass(frozen=True)
class ModelDefinition:
    name: str
    system: DynamicalSystem
    param_names: tuple
    roi: np.ndarray
    sim_dim: int
    sim_map: Callable[[np.ndarray], np.ndarray]
    class_task: ClassTask
    dense_grid: np.ndarray
    noise_fo: np.ndarray
    noise_po: float
    sigma_range: tuple
    n_min: int
    n_max: int

    @property
    def param_dim(self) -> int:
        return self.system.param_dim

    @property
    def state_dim(self) -> int:
        return self.system.state_dim

    def in_roi(self, theta, atol: float = 0.0) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.roi[:, 0] - atol)
                    and np.all(theta <= self.roi[:, 1] + atol))


# -- identifiable combinations ----------------------------------------------

def sim_toy(theta) -> np.ndarray:
    a, b = np.asarray(theta, dtype=float)
    return np.array([a * b])


def _check_rates(*groups):
    for g in groups:
        if np.any(np.asarray(g) < 0):
            raise DomainError("transfer and leakage rates must be non-negative")


def build_ccm_matrix(n: int, leak, lower, upper) -> np.ndarray:
    """Tridiagonal rate matrix of the n-compartment catenary model.

    ``leak`` holds k_0i, ``lower`` holds k_{i+1,i} and ``upper`` k_{i,i+1}.
    """
    leak, lower, upper = (np.asarray(v, dtype=float) for v in (leak, lower, upper))
    if n < 2 or leak.shape != (n,) or lower.shape != (n - 1,) or upper.shape != (n - 1,):
        raise ValueError("need n >= 2 with n leakages and n-1 rates each way")
    _check_rates(leak, lower, upper)
    K = np.diag(lower, -1) + np.diag(upper, 1)
    K[np.diag_indices(n)] = -(leak + K.sum(axis=0))
    return K


def split_ccm(n: int, theta):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (3 * n - 2,):
        raise ValueError(f"ccm{n} expects {3 * n - 2} rates")
    return theta[:n], theta[2 * n - 1:], theta[n:2 * n - 1]


def sim_ccm(n: int, theta) -> np.ndarray:
    leak, lower, upper = split_ccm(n, theta)
    K = build_ccm_matrix(n, leak, lower, upper)
    return np.concatenate([np.diag(K), lower * upper])


def build_cml_matrix(theta) -> np.ndarray:
    k01, k02, k03, k04, k12, k21, k23, k42, k34, k43 = np.asarray(theta, dtype=float)
    _check_rates(theta)
    return np.array([
        [-(k01 + k21), k12, 0.0, 0.0],
        [k21, -(k02 + k12 + k42), k23, 0.0],
        [0.0, 0.0, -(k03 + k23 + k43), k34],
        [0.0, k42, k43, -(k04 + k34)],
    ])


def sim_cml(theta) -> np.ndarray:
    k01, k02, k03, k04, k12, k21, k23, k42, k34, k43 = np.asarray(theta, dtype=float)
    return np.array([
        k12 * k21,
        k34 * k43,
        k01 + k21,
        k02 + k12 + k42,
        k03 + k23 + k43,
        k04 + k34,
        k23 * k42 * k34,
    ])


def sim_cml_laplace(theta) -> np.ndarray:
    """Transfer-function coefficients of the loop model, written out in full."""
    k01, k02, k03, k04, k12, k21, k23, k42, k34, k43 = np.asarray(theta, dtype=float)
    p1 = (k04 * k12 * k23 + k12 * k23 * k34 + k04 * k23 * k42 + k04 * k12 * k43
          + k03 * (k04 + k34) * (k12 + k42) + k04 * k42 * k43
          + k02 * (k23 * k34 + k03 * (k04 + k34) + k04 * (k23 + k43)))
    p2 = (k04 * k12 + k04 * k23 + k12 * k23 + k12 * k34 + k23 * k34
          + k04 * k42 + k23 * k42 + k34 * k42
          + k03 * (k04 + k12 + k34 + k42) + k04 * k43 + k12 * k43
          + k42 * k43 + k02 * (k03 + k04 + k23 + k34 + k43))
    p3 = k02 + k03 + k04 + k12 + k23 + k34 + k42 + k43
    p4 = (k21 * (k02 * k23 * k34 + k02 * k03 * (k04 + k34)
                 + k03 * (k04 + k34) * k42 + k02 * k04 * (k23 + k43)
                 + k04 * k42 * (k23 + k43))
          + k01 * (k04 * k12 * k23 + k12 * k23 * k34 + k04 * k23 * k42
                   + k03 * (k04 + k34) * (k12 + k42) + k04 * k12 * k43
                   + k04 * k42 * k43
                   + k02 * (k23 * k34 + k03 * (k04 + k34) + k04 * (k23 + k43))))
    p5 = (k03 * k04 * k12 + k03 * k04 * k21 + k04 * k12 * k23 + k04 * k21 * k23
          + k03 * k12 * k34 + k03 * k21 * k34 + k12 * k23 * k34 + k21 * k23 * k34
          + k03 * k04 * k42 + k03 * k21 * k42 + k04 * k21 * k42 + k04 * k23 * k42
          + k21 * k23 * k42 + k03 * k34 * k42 + k21 * k34 * k42 + k04 * k12 * k43
          + k04 * k21 * k43 + k04 * k42 * k43 + k21 * k42 * k43
          + k02 * (k21 * k23 + k21 * k34 + k23 * k34 + k03 * (k04 + k21 + k34)
                   + k21 * k43 + k04 * (k21 + k23 + k43))
          + k01 * (k04 * k12 + k04 * k23 + k12 * k23 + k12 * k34 + k23 * k34
                   + k04 * k42 + k23 * k42 + k34 * k42
                   + k03 * (k04 + k12 + k34 + k42) + k04 * k43 + k12 * k43
                   + k42 * k43 + k02 * (k03 + k04 + k23 + k34 + k43)))
    p6 = (k03 * k04 + k03 * k12 + k04 * k12 + k03 * k21 + k04 * k21
          + k04 * k23 + k12 * k23 + k21 * k23 + k03 * k34 + k12 * k34
          + k21 * k34 + k23 * k34 + k03 * k42 + k04 * k42 + k21 * k42
          + k23 * k42 + k34 * k42 + k04 * k43 + k12 * k43 + k21 * k43
          + k42 * k43 + k02 * (k03 + k04 + k21 + k23 + k34 + k43)
          + k01 * (k02 + k03 + k04 + k12 + k23 + k34 + k42 + k43))
    p7 = k01 + k02 + k03 + k04 + k12 + k21 + k23 + k34 + k42 + k43
    return np.array([p1, p2, p3, p4, p5, p6, p7])


def sim_br(theta) -> np.ndarray:
    b1, b2, mu_m, k_s, y, k_d = np.asarray(theta, dtype=float)
    if k_s == 0:
        raise DomainError("K_s must be positive")
    return np.array([b1, mu_m, k_d, b2 * y, b2 / k_s])


def br_dynamics(t, state, theta) -> np.ndarray:
    """Monod growth with decay: returns (dx/dt, ds/dt)."""
    x, s = state
    b1, b2, mu_m, k_s, y, k_d = np.asarray(theta, dtype=float)
    if y == 0:
        raise DomainError("yield coefficient Y must be non-zero")
    if k_s + s <= 0:
        raise DomainError("K_s + s must be positive")
    growth = mu_m * s * x / (k_s + s)
    return np.array([growth - k_d * x, -growth / y])


# -- gauge transformations ---------------------------------------------------

def _gauge_toy(theta, scales):
    a, b = theta
    return np.array([a * scales[0], b / scales[0]])


def _gauge_ccm(n, theta, scales):
    leak, lower, upper = split_ccm(n, theta)
    diag = -(leak + np.concatenate([lower, [0.0]]) + np.concatenate([[0.0], upper]))
    lower = lower / scales
    upper = upper * scales
    leak = -diag - np.concatenate([lower, [0.0]]) - np.concatenate([[0.0], upper])
    return np.concatenate([leak, upper, lower])


def _gauge_cml(theta, scales):
    alpha, beta = scales
    phi = sim_cml(theta)
    k12, k21 = theta[4] * alpha, theta[5] / alpha
    k34, k43 = theta[8] * beta, theta[9] / beta
    k23, k42 = theta[6] / beta, theta[7]
    k01 = phi[2] - k21
    k02 = phi[3] - k12 - k42
    k03 = phi[4] - k23 - k43
    k04 = phi[5] - k34
    return np.array([k01, k02, k03, k04, k12, k21, k23, k42, k34, k43])


def _gauge_br(theta, scales):
    b1, b2, mu_m, k_s, y, k_d = theta
    a = scales[0]
    return np.array([b1, a * b2, mu_m, a * k_s, y / a, k_d])


_GAUGE_DOF = {"toy": 1, "ccm2": 1, "ccm4": 3, "cml": 2, "br": 1}


def gauge_transform(model, theta, alpha: float, rng: Optional[np.random.Generator] = None):
    """Move theta along its equivalence class without changing sim_map(theta).

    The first degree of freedom uses ``alpha``; further ones use
    ``alpha**u`` with u ~ U(-1, 1) from ``rng`` (or ``alpha`` when rng is
    None).  When the image leaves the ROI or has a negative rate the
    exponent is halved, up to 100 times.
    """
    if isinstance(model, str):
        model = get_model(model)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    theta = np.asarray(theta, dtype=float)
    dof = _GAUGE_DOF[model.name]
    powers = np.ones(dof)
    if dof > 1 and rng is not None:
        powers[1:] = rng.uniform(-1.0, 1.0, size=dof - 1)
    log_alpha = np.log(alpha)
    for _ in range(GAUGE_RETRIES):
        scales = np.exp(log_alpha * powers)
        if model.name == "toy":
            out = _gauge_toy(theta, scales)
        elif model.name == "br":
            out = _gauge_br(theta, scales)
        elif model.name == "cml":
            out = _gauge_cml(theta, scales)
        else:
            out = _gauge_ccm(int(model.name[3:]), theta, scales)
        if model.in_roi(out) and np.all(out >= 0):
            return out
        log_alpha /= 2.0
    raise GaugeNotFoundError(f"no valid gauge move for {model.name} near theta={theta}")


# -- registry ----------------------------------------------------------------

def _grid(spec) -> np.ndarray:
    n = int(round((spec["stop"] - spec["start"]) / spec["step"])) + 1
    return np.round(spec["start"] + spec["step"] * np.arange(n), 12)


def _sim_for(name):
    if name == "toy":
        return sim_toy
    if name == "cml":
        return sim_cml
    if name == "br":
        return sim_br
    n = int(name[3:])
    return lambda theta: sim_ccm(n, theta)


def _system_for(name, n_params, s0, k_abs, x0=None):
    def decaying_input(t):
        return s0 * k_abs * np.exp(-k_abs * t)

    if name == "toy":
        consts = np.array([float(x0[0])])
        return DynamicalSystem(1, n_params, _kernels.RHS_LINEAR, _kernels.PREP_TOY, consts)
    if name == "br":
        return DynamicalSystem(2, n_params, _kernels.RHS_BATCH, _kernels.PREP_BR, np.zeros(1))
    if name == "cml":
        return DynamicalSystem(4, n_params, _kernels.RHS_LINEAR, _kernels.PREP_CML,
                               np.array([s0, k_abs]), input=decaying_input)
    n = int(name[3:])
    return DynamicalSystem(n, n_params, _kernels.RHS_LINEAR, _kernels.PREP_CCM,
                           np.array([float(n), s0, k_abs]), input=decaying_input)


def get_model(name: str, s0: float = DEFAULT_S0, k_abs: float = DEFAULT_K_ABS) -> ModelDefinition:
    """Look up one of the registered systems; input constants are overridable."""
    return _build_model(name, float(s0), float(k_abs))


@lru_cache(maxsize=None)
def _build_model(name, s0, k_abs):
    table = load_constants()
    if name not in table:
        raise RegistryError(name)
    c = table[name]
    n_params = len(c["param_names"])
    task = ClassTask(
        mean_0=np.array(c["mean_0"], dtype=float),
        mean_1=np.array(c["mean_1"], dtype=float),
        cov_0=np.diag(np.array(c["cov_diag_0"], dtype=float)),
        cov_1=np.diag(np.array(c["cov_diag_1"], dtype=float)),
        n_train=int(c["n_train"]),
        n_test=int(c["n_test"]),
    )
    sim = _sim_for(name)
    system = _system_for(name, n_params, s0, k_abs, c.get("x0"))
    sim_dim = len(sim(task.mean_0))
    return ModelDefinition(
        name=name,
        system=system,
        param_names=tuple(c["param_names"]),
        roi=np.array(c["roi"], dtype=float),
        sim_dim=sim_dim,
        sim_map=sim,
        class_task=task,
        dense_grid=_grid(c["dense_grid"]),
        noise_fo=np.array(c["r_fo"], dtype=float),
        noise_po=float(c["r_po"]),
        sigma_range=tuple(float(s) for s in c["sigma_range"]),
        n_min=int(c["n_min"]),
        n_max=int(c["n_max"]),
    )
