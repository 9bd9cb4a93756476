"""Benchmark autonomous systems with stochastic parameters, and RK4 simulation.

Every right-hand side takes states of shape ``(..., d)`` so batches of
initial conditions integrate together. All equilibria sit at the origin.

Parameter orderings:

* ``sp``   (g, l, b)           -- simple pendulum, mass taken from the system constants
* ``dp``   (g, l1, l2, m1, m2, b1, b2)
* ``mg``   (D1, ..., D5)       -- droop coefficients of the five-microgrid network
* ``seir`` (beta11, beta22, gamma1, gamma2)
* ``pde``  (alpha_diff,)       -- 10x10 reaction-diffusion surrogate
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, DistributionError, IntegrationError, ParameterError, SingularityError

SYSTEM_NAMES = ("sp", "dp", "mg", "seir", "pde")


# ---------------------------------------------------------------------------
# right-hand sides

def rhs_simple_pendulum(x: np.ndarray, g: float, l: float, b: float, m: float = 0.1) -> np.ndarray:
    if l <= 0 or m <= 0:
        raise ParameterError(f"pendulum needs l > 0 and m > 0 (got l={l}, m={m})")
    x = np.asarray(x, dtype=np.float64)
    theta, omega = x[..., 0], x[..., 1]
    return np.stack([omega, -(g / l) * np.sin(theta) - (b / (m * l * l)) * omega], axis=-1)


def rhs_double_pendulum(x: np.ndarray, g: float, l1: float, l2: float, m1: float, m2: float,
                        b1: float, b2: float) -> np.ndarray:
    if min(l1, l2, m1, m2) <= 0:
        raise ParameterError("double pendulum lengths and masses must be positive")
    x = np.asarray(x, dtype=np.float64)
    x1, x2, x3, x4 = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    den = 2 * m1 + m2 - m2 * np.cos(2 * x1 - 2 * x3)
    if np.any(np.abs(den) < 1e-12):
        raise SingularityError(f"double pendulum denominator vanishes at state {x.tolist()}")
    s13 = np.sin(x1 - x3)
    c13 = np.cos(x1 - x3)
    dx2 = (-g * (2 * m1 + m2) * np.sin(x1) - m2 * g * np.sin(x1 - 2 * x3)
           - 2 * s13 * m2 * (x4 ** 2 * l2 + x2 ** 2 * l1 * c13)) / (l1 * den) - b1 * x2
    dx4 = (2 * s13 * (x2 ** 2 * l1 * (m1 + m2) + g * (m1 + m2) * np.cos(x1)
                      + x4 ** 2 * l2 * m2 * c13)) / (l2 * den) - b2 * x4
    return np.stack([x2, dx2, x4, dx4], axis=-1)


@dataclass(frozen=True)
class MicrogridNetwork:
    """Constant part of the droop-controlled network (per-unit quantities).

    The default is a synthetic 5-bus ring, not data from a real feeder.
    """

    Y: np.ndarray            # |Y_ik|, symmetric, diagonal ignored
    gamma: np.ndarray        # admittance angles gamma_ik
    G_diag: np.ndarray       # G_ii
    E: np.ndarray            # nominal voltage magnitudes E*_i
    J: np.ndarray            # tracking time constants J_delta_i
    delta_star: np.ndarray   # angle set points

    @classmethod
    def ring(cls, n: int = 5, y: float = 1.0, g_ii: float = 0.1) -> "MicrogridNetwork":
        Y = np.zeros((n, n))
        for i in range(n):
            Y[i, (i + 1) % n] = Y[(i + 1) % n, i] = y
        return cls(Y=Y, gamma=np.full((n, n), np.pi / 2), G_diag=np.full(n, g_ii),
                   E=np.ones(n), J=np.ones(n), delta_star=np.zeros(n))

    def active_power(self, delta: np.ndarray) -> np.ndarray:
        E = self.E
        d_ik = delta[..., :, None] - delta[..., None, :]
        off = 1.0 - np.eye(len(E))
        terms = (E[:, None] * E[None, :]) * self.Y * np.cos(d_ik - self.gamma) * off
        return terms.sum(axis=-1) + E ** 2 * self.G_diag

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("Y", "gamma", "G_diag", "E", "J", "delta_star")}

    @classmethod
    def from_dict(cls, d: dict) -> "MicrogridNetwork":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


def rhs_microgrid(x: np.ndarray, droop: np.ndarray, network: MicrogridNetwork) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    droop = np.asarray(droop, dtype=np.float64)
    p_star = network.active_power(network.delta_star)
    dP = network.active_power(network.delta_star + x) - p_star
    return (-droop * x - dP) / network.J


def rhs_seir_shifted(x: np.ndarray, beta11: float, beta22: float, gamma1: float, gamma2: float,
                     beta12: float = 0.01, beta21: float = 0.01, sigma: float = 0.2,
                     v1: float = 0.05, v2: float = 0.05) -> np.ndarray:
    """Two-population SEIR with removed fractions tracked as R - 1."""
    x = np.asarray(x, dtype=np.float64)
    S1, E1, I1, S2, E2, I2 = x[..., 0], x[..., 1], x[..., 2], x[..., 4], x[..., 5], x[..., 6]
    inf1 = beta11 * S1 * I1 + beta12 * S1 * I2
    inf2 = beta22 * S2 * I2 + beta21 * S2 * I1
    return np.stack([
        -inf1 - v1 * S1,
        inf1 - sigma * E1,
        sigma * E1 - gamma1 * I1,
        gamma1 * I1 + v1 * S1,
        -inf2 - v2 * S2,
        inf2 - sigma * E2,
        sigma * E2 - gamma2 * I2,
        gamma2 * I2 + v2 * S2,
    ], axis=-1)


def grid_laplacian(n: int = 10, dx: float = 1.0) -> np.ndarray:
    """5-point Laplacian on an n x n grid with zero-flux boundaries.

    Mirrored ghost cells copy the boundary value, so each missing neighbour
    drops out of the stencil. The matrix is symmetric and every row sums to 0.
    Nodes are ordered row-major (u_11, u_12, ..., u_nn).
    """
    N = n * n
    L = np.zeros((N, N))
    for i in range(n):
        for j in range(n):
            k = i * n + j
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ii, jj = i + di, j + dj
                if 0 <= ii < n and 0 <= jj < n:
                    L[k, ii * n + jj] += 1.0
                    L[k, k] -= 1.0
    return L / (dx * dx)


_LAPLACIAN = grid_laplacian()


def rhs_pde_rd(x: np.ndarray, alpha_diff: float, laplacian: np.ndarray = _LAPLACIAN) -> np.ndarray:
    if alpha_diff <= 0:
        raise ParameterError("diffusion coefficient must be positive")
    x = np.asarray(x, dtype=np.float64)
    return alpha_diff * (x @ laplacian.T) - x * (1.0 + x * x)


# ---------------------------------------------------------------------------
# system specifications

@dataclass
class ParameterSample:
    values: np.ndarray
    sample_id: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)


@dataclass
class SystemSpec:
    """A benchmark system: dimension, vector field, parameter law, time step."""

    name: str
    state_dim: int
    param_names: tuple
    param_mean: np.ndarray
    param_cov_diag: np.ndarray
    dt: float
    constants: dict = field(default_factory=dict)
    _rhs: Callable = field(default=None, repr=False)
    positive: tuple = ()   # indices of parameters that must stay > 0

    def __post_init__(self):
        self.param_mean = np.asarray(self.param_mean, dtype=np.float64)
        self.param_cov_diag = np.asarray(self.param_cov_diag, dtype=np.float64)
        if self.dt <= 0:
            raise ContractError("dt must be positive")

    @property
    def equilibrium(self) -> np.ndarray:
        return np.zeros(self.state_dim)

    @property
    def num_params(self) -> int:
        return len(self.param_names)

    def rhs(self, x: np.ndarray, params) -> np.ndarray:
        p = _values(params)
        if p.shape != (self.num_params,):
            raise ParameterError(f"{self.name} takes {self.num_params} parameters, got shape {p.shape}")
        return self._rhs(x, p, self.constants)

    def is_physical(self, values: np.ndarray) -> bool:
        return bool(np.all(values[list(self.positive)] > 0)) if self.positive else True

    def describe(self) -> dict:
        consts = {}
        for k, v in self.constants.items():
            consts[k] = v.to_dict() if isinstance(v, MicrogridNetwork) else v
        return {"name": self.name, "state_dim": self.state_dim, "dt": self.dt,
                "param_names": list(self.param_names), "param_mean": self.param_mean.tolist(),
                "param_cov_diag": self.param_cov_diag.tolist(), "constants": consts}


def _values(params) -> np.ndarray:
    return params.values if isinstance(params, ParameterSample) else np.asarray(params, dtype=np.float64)


def _sp_rhs(x, p, c):
    return rhs_simple_pendulum(x, p[0], p[1], p[2], m=c["mass"])


def _dp_rhs(x, p, c):
    return rhs_double_pendulum(x, *p)


def _mg_rhs(x, p, c):
    return rhs_microgrid(x, p, c["network"])


def _seir_rhs(x, p, c):
    return rhs_seir_shifted(x, *p, beta12=c["beta12"], beta21=c["beta21"], sigma=c["sigma"],
                            v1=c["v1"], v2=c["v2"])


def _pde_rhs(x, p, c):
    return rhs_pde_rd(x, p[0])


def make_system(name: str, dt: float | None = None, **overrides) -> SystemSpec:
    """Build one of the five benchmark systems with its default constants.

    ``overrides`` replace entries in the system's constants (e.g. ``mass``
    for ``sp``, ``v1``/``v2`` for ``seir``, ``network`` for ``mg``).
    """
    name = name.lower().replace("-", "_")
    name = {"pde_sm": "pde", "simple_pendulum": "sp", "double_pendulum": "dp"}.get(name, name)
    if name == "sp":
        consts = {"mass": 0.1}
        spec = SystemSpec("sp", 2, ("g", "l", "b"), [9.8, 3.0, 0.5], [1.0, 1.0, 0.01], 0.2,
                          consts, _sp_rhs, positive=(0, 1, 2))
    elif name == "dp":
        spec = SystemSpec("dp", 4, ("g", "l1", "l2", "m1", "m2", "b1", "b2"),
                          [9.8, 3.0, 3.0, 1.0, 1.0, 0.5, 0.5],
                          [0.5, 0.5, 0.5, 0.2, 0.2, 0.01, 0.01], 0.01, {}, _dp_rhs,
                          positive=(0, 1, 2, 3, 4, 5, 6))
    elif name == "mg":
        spec = SystemSpec("mg", 5, tuple(f"D{i + 1}" for i in range(5)), [2.0] * 5, [0.2] * 5, 0.01,
                          {"network": MicrogridNetwork.ring()}, _mg_rhs, positive=(0, 1, 2, 3, 4))
    elif name == "seir":
        consts = {"beta12": 0.01, "beta21": 0.01, "sigma": 0.2, "v1": 0.05, "v2": 0.05}
        spec = SystemSpec("seir", 8, ("beta11", "beta22", "gamma1", "gamma2"), [0.2, 0.2, 0.75, 0.75],
                          [0.007] * 4, 0.01, consts, _seir_rhs, positive=(0, 1, 2, 3))
    elif name == "pde":
        spec = SystemSpec("pde", 100, ("alpha_diff",), [1.2], [0.3], 0.001, {}, _pde_rhs, positive=(0,))
    else:
        raise ContractError(f"unknown system {name!r}; expected one of {', '.join(SYSTEM_NAMES)}")
    for k, v in overrides.items():
        if k not in spec.constants:
            raise ContractError(f"system {spec.name!r} has no constant {k!r}")
        if k == "network" and isinstance(v, dict):
            v = MicrogridNetwork.from_dict(v)
        spec.constants[k] = v
    if dt is not None:
        if dt <= 0:
            raise ContractError("dt must be positive")
        spec.dt = float(dt)
    return spec


def system_from_description(desc: dict) -> SystemSpec:
    consts = dict(desc.get("constants", {}))
    return make_system(desc["name"], dt=desc["dt"], **consts)


def sample_parameters(spec: SystemSpec, count: int, seed: int | np.random.Generator,
                      max_rejections: int = 1000, start_id: int = 0) -> list[ParameterSample]:
    """i.i.d. diagonal-Gaussian parameter draws, resampling non-physical ones."""
    if count < 1:
        raise ContractError("count must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    std = np.sqrt(spec.param_cov_diag)
    out = []
    for k in range(count):
        for _ in range(max_rejections + 1):
            v = spec.param_mean + std * rng.standard_normal(spec.num_params)
            if spec.is_physical(v):
                break
        else:
            raise DistributionError(f"{spec.name}: more than {max_rejections} consecutive rejected draws")
        out.append(ParameterSample(v, start_id + k))
    return out


# ---------------------------------------------------------------------------
# integration

def rk4_step(rhs: Callable[[np.ndarray], np.ndarray], x: np.ndarray, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step of ``dx/dt = rhs(x)``."""
    if dt <= 0:
        raise ContractError("dt must be positive")
    k1 = rhs(x)
    k2 = rhs(x + 0.5 * dt * k1)
    k3 = rhs(x + 0.5 * dt * k2)
    k4 = rhs(x + dt * k3)
    for k in (k1, k2, k3, k4):
        if not np.all(np.isfinite(k)):
            raise IntegrationError("non-finite RK4 stage")
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step(spec: SystemSpec, x: np.ndarray, params, dt: float | None = None) -> np.ndarray:
    p = _values(params)
    return rk4_step(lambda y: spec.rhs(y, p), np.asarray(x, dtype=np.float64), spec.dt if dt is None else dt)


@dataclass
class Trajectory:
    states: np.ndarray          # (num_steps + 1, d)
    dt: float
    param_ref: int = 0
    diverged: bool = False

    def __len__(self) -> int:
        return len(self.states)


def rollout(spec: SystemSpec, params, x0: np.ndarray, num_steps: int, dt: float | None = None) -> Trajectory:
    """Ground-truth trajectory; ``x0`` may carry leading batch axes, time is axis 0 of the result."""
    if num_steps < 0:
        raise ContractError("num_steps must be >= 0")
    x = np.asarray(x0, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ContractError("initial state must be finite")
    p = _values(params)
    h = spec.dt if dt is None else dt
    states = [x]
    f = lambda y: spec.rhs(y, p)
    for _ in range(num_steps):
        x = rk4_step(f, x, h)
        states.append(x)
    sid = params.sample_id if isinstance(params, ParameterSample) else 0
    return Trajectory(np.stack(states), h, sid)
