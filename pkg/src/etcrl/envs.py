"""Noisy discrete-time plants: inverted pendulum (balance, swing-up) and cart-pole.

State convention: angles are measured from the upright position and kept in
(-pi, pi].  All dynamics functions accept a single state vector or a stack of
states with the state dimension last.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

TASKS = ("balance", "swingup", "cartpole")

NOISE_STD = 1e-4


def angle_wrap(theta):
    """Map angles into (-pi, pi]."""
    theta = np.asarray(theta, dtype=np.float64)
    wrapped = theta - 2.0 * np.pi * np.ceil((theta - np.pi) / (2.0 * np.pi))
    return float(wrapped) if wrapped.ndim == 0 else wrapped


@dataclass(frozen=True)
class PlantParams:
    dt: float = 0.05
    mass: float = 1.0
    length: float = 1.0
    gravity: float = 9.81
    cart_mass: float | None = None
    u_max: float = 2.0
    max_speed: float | None = 8.0
    # diagonal variances of process, measurement and initial-state noise
    process_var: tuple[float, ...] = (NOISE_STD**2, NOISE_STD**2)
    measure_var: tuple[float, ...] = (NOISE_STD**2, NOISE_STD**2)
    init_var: tuple[float, ...] = (NOISE_STD**2, NOISE_STD**2)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.u_max > 0:
            raise ValueError(f"u_max must be positive, got {self.u_max}")
        for name in ("mass", "length", "gravity"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_speed is not None and not self.max_speed > 0:
            raise ValueError("max_speed must be positive")
        if self.cart_mass is not None and not self.cart_mass > 0:
            raise ValueError("cart_mass must be positive")
        for name in ("process_var", "measure_var", "init_var"):
            var = tuple(float(v) for v in getattr(self, name))
            if any(v < 0 or not np.isfinite(v) for v in var):
                raise ValueError(f"{name} entries must be finite and >= 0")
            object.__setattr__(self, name, var)

    def noise_free(self) -> "PlantParams":
        n = len(self.process_var)
        return replace(self, process_var=(0.0,) * n, measure_var=(0.0,) * n, init_var=(0.0,) * n)


def pendulum_params(**overrides) -> PlantParams:
    return PlantParams(**overrides)


def cartpole_params(**overrides) -> PlantParams:
    var = (NOISE_STD**2,) * 4
    base = dict(
        dt=0.025,
        mass=0.1,
        length=0.5,
        gravity=9.8,
        cart_mass=1.0,
        u_max=10.0,
        max_speed=None,
        process_var=var,
        measure_var=var,
        init_var=var,
    )
    base.update(overrides)
    return PlantParams(**base)


@dataclass
class RewardWeights:
    Q: np.ndarray
    R: np.ndarray
    lam: float = 1.0
    alive_bonus: float = 0.0

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=np.float64))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=np.float64))
        for name, M in (("Q", self.Q), ("R", self.R)):
            if M.shape[0] != M.shape[1] or not np.allclose(M, M.T):
                raise ValueError(f"{name} must be square and symmetric")
            if np.linalg.eigvalsh(M).min() < -1e-12:
                raise ValueError(f"{name} must be positive semidefinite")
        if self.lam < 0:
            raise ValueError("communication penalty must be >= 0")


def reward(x, u, gamma, weights: RewardWeights, terminated=False):
    """-x'Qx - u'Ru - lam*gamma, plus the alive bonus unless the episode just terminated."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    r = (
        -np.einsum("...i,ij,...j->...", x, weights.Q, x)
        - np.einsum("...i,ij,...j->...", u, weights.R, u)
        - weights.lam * np.asarray(gamma, dtype=np.float64)
    )
    r = r + weights.alive_bonus * (1.0 - np.asarray(terminated, dtype=np.float64))
    return float(r) if np.ndim(r) == 0 else r


class Plant:
    """Common noise and bookkeeping around a deterministic step map ``f``."""

    n_state: int
    n_input: int = 1
    angle_index: int
    task: str

    def __init__(self, params: PlantParams):
        if len(params.process_var) != self.n_state:
            raise ValueError(f"{type(self).__name__} needs {self.n_state} noise variances")
        self.params = params
        self._sd_p = np.sqrt(np.asarray(params.process_var))
        self._sd_m = np.sqrt(np.asarray(params.measure_var))
        self._sd_0 = np.sqrt(np.asarray(params.init_var))

    @property
    def u_max(self) -> float:
        return self.params.u_max

    def clamp(self, u):
        return np.clip(u, -self.params.u_max, self.params.u_max)

    def f(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def dynamics(self, x, u) -> np.ndarray:
        """Deterministic part of the step with input clamping and angle wrapping."""
        x = np.asarray(x, dtype=np.float64)
        u = self.clamp(np.asarray(u, dtype=np.float64))
        nxt = self.f(x, u)
        nxt[..., self.angle_index] = angle_wrap(nxt[..., self.angle_index])
        return nxt

    def _noise(self, sd: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        # always draw, so streams stay aligned whether or not noise is switched on
        return sd * rng.standard_normal(self.n_state)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        x = self._noise(self._sd_0, rng)
        if self.task == "swingup":
            x[self.angle_index] += np.pi
        x[self.angle_index] = angle_wrap(x[self.angle_index])
        return x

    def measure(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        y = x + self._noise(self._sd_m, rng)
        y[self.angle_index] = angle_wrap(y[self.angle_index])
        return y

    def step(self, x, u, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Advance one sample period; returns ``(next_state, observation)``."""
        nxt = self.dynamics(x, u) + self._noise(self._sd_p, rng)
        nxt[self.angle_index] = angle_wrap(nxt[self.angle_index])
        if not np.all(np.isfinite(nxt)):
            raise EpisodeFault(f"non-finite plant state {nxt}")
        return nxt, self.measure(nxt, rng)

    def features(self, y: np.ndarray) -> np.ndarray:
        """Observation embedding handed to learning agents."""
        return np.asarray(y, dtype=np.float64)

    @property
    def n_features(self) -> int:
        return self.n_state

    def terminated(self, x) -> bool:
        return False

    def angle(self, x) -> np.ndarray:
        return np.asarray(x)[..., self.angle_index]


class EpisodeFault(RuntimeError):
    """The closed loop produced a non-finite state or action."""


class Pendulum(Plant):
    """Rod pendulum driven by a torque at the pivot, theta = 0 upright."""

    n_state = 2
    angle_index = 0

    def __init__(self, params: PlantParams | None = None, task: str = "balance"):
        if task not in ("balance", "swingup"):
            raise ValueError(f"pendulum task must be balance or swingup, got {task!r}")
        super().__init__(params or PlantParams())
        self.task = task

    def f(self, x, u):
        p = self.params
        th = x[..., 0]
        thd = x[..., 1] + (
            3.0 * p.gravity / (2.0 * p.length) * np.sin(th) + 3.0 / (p.mass * p.length**2) * u[..., 0]
        ) * p.dt
        if p.max_speed is not None:
            thd = np.clip(thd, -p.max_speed, p.max_speed)
        return np.stack([th + thd * p.dt, thd], axis=-1)

    def energy(self, x) -> np.ndarray:
        p = self.params
        inertia = p.mass * p.length**2 / 3.0
        x = np.asarray(x)
        return 0.5 * inertia * x[..., 1] ** 2 + p.mass * p.gravity * 0.5 * p.length * np.cos(x[..., 0])

    def features(self, y):
        y = np.asarray(y, dtype=np.float64)
        if self.task == "balance":
            return y
        return np.stack([np.cos(y[..., 0]), np.sin(y[..., 0]), y[..., 1]], axis=-1)

    @property
    def n_features(self) -> int:
        return 2 if self.task == "balance" else 3


class CartPole(Plant):
    """Cart-pole with a continuous horizontal force; state (pos, vel, theta, theta_dot)."""

    n_state = 4
    angle_index = 2
    task = "cartpole"
    theta_limit = 0.21
    position_limit = 2.4

    def __init__(self, params: PlantParams | None = None):
        params = params or cartpole_params()
        if params.cart_mass is None:
            raise ValueError("cart-pole needs cart_mass")
        super().__init__(params)

    def f(self, x, u):
        p = self.params
        total = p.mass + p.cart_mass
        pml = p.mass * p.length
        pos, vel, th, thd = (x[..., i] for i in range(4))
        force = u[..., 0]
        sin, cos = np.sin(th), np.cos(th)
        temp = (force + pml * thd**2 * sin) / total
        th_acc = (p.gravity * sin - cos * temp) / (p.length * (4.0 / 3.0 - p.mass * cos**2 / total))
        x_acc = temp - pml * th_acc * cos / total
        vel = vel + x_acc * p.dt
        thd = thd + th_acc * p.dt
        return np.stack([pos + vel * p.dt, vel, th + thd * p.dt, thd], axis=-1)

    def terminated(self, x) -> bool:
        x = np.asarray(x)
        return bool(abs(x[2]) > self.theta_limit or abs(x[0]) > self.position_limit)


def make_plant(task: str, params: PlantParams | None = None) -> Plant:
    if task in ("balance", "swingup"):
        return Pendulum(params, task)
    if task == "cartpole":
        return CartPole(params)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def default_params(task: str) -> PlantParams:
    return cartpole_params() if task == "cartpole" else pendulum_params()


def default_weights(task: str, lam: float = 1.0) -> RewardWeights:
    if task == "cartpole":
        return RewardWeights(np.diag([1.0, 0.1, 1.0, 0.1]), np.array([[0.01]]), lam, alive_bonus=1.0)
    return RewardWeights(np.diag([1.0, 0.1]), np.array([[0.1]]), lam, alive_bonus=0.0)
