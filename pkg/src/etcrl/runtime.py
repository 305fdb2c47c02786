"""Event-triggered closed loop: zero-order hold at the actuator, episode logs, metrics."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .envs import EpisodeFault, Plant, RewardWeights, reward
from .fileio import atomic_write_text


class Actuator:
    """Holds the last received input and the observation it was computed from."""

    def __init__(self, n_input: int, n_state: int, u_max: float = np.inf):
        self.u_max = u_max
        self.u_prev = np.zeros(n_input)
        self.x_hat = np.zeros(n_state)

    def reset(self) -> None:
        self.u_prev = np.zeros_like(self.u_prev)
        self.x_hat = np.zeros_like(self.x_hat)

    def apply(self, gamma: int, u_new, x_now) -> np.ndarray:
        if gamma:
            self.u_prev = np.clip(np.asarray(u_new, dtype=np.float64), -self.u_max, self.u_max).reshape(
                self.u_prev.shape
            )
            self.x_hat = np.array(x_now, dtype=np.float64)
        return self.u_prev.copy()


@dataclass
class AgentState:
    """What a policy sees at step k.

    ``obs`` is the feature embedding of the noisy observation ``y``; ``x_hat``
    is the observation at the last communication (used by relative trigger
    laws); ``u_candidate`` is the frozen controller's proposal in separated mode.
    """

    obs: np.ndarray
    y: np.ndarray
    u_prev: np.ndarray
    x_hat: np.ndarray
    k: int
    u_candidate: np.ndarray | None = None

    def vector(self) -> np.ndarray:
        return np.concatenate([self.obs, self.u_prev])


# policy(state) -> (gamma, u) or (gamma, u, raw_action)
Policy = Callable[[AgentState], tuple]


class EtcEnv:
    """A plant closed over a zero-order-hold actuator, stepped one decision at a time.

    Communication is forced at the first step of every episode.
    """

    def __init__(self, plant: Plant, weights: RewardWeights, horizon: int = 500):
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        self.plant = plant
        self.weights = weights
        self.horizon = horizon
        self.actuator = Actuator(plant.n_input, plant.n_state, plant.u_max)
        self.rng: np.random.Generator | None = None
        self.x: np.ndarray | None = None
        self.y: np.ndarray | None = None
        self.k = 0

    @property
    def state_dim(self) -> int:
        return self.plant.n_features + self.plant.n_input

    def agent_state(self) -> AgentState:
        return AgentState(
            self.plant.features(self.y), self.y.copy(), self.actuator.u_prev.copy(),
            self.actuator.x_hat.copy(), self.k,
        )

    def reset(self, rng: np.random.Generator) -> AgentState:
        self.rng = rng
        self.actuator.reset()
        self.k = 0
        self.x = self.plant.reset(rng)
        self.y = self.plant.measure(self.x, rng)
        return self.agent_state()

    def step(self, gamma: int, u_new) -> tuple[AgentState, float, bool, dict]:
        """Apply one decision; returns ``(next_state, reward, terminated, info)``.

        ``info`` carries the pre-step true state ``x``, observation ``y``, the
        executed input ``u`` and the effective ``gamma``.  The caller enforces
        the horizon; ``truncated`` in ``info`` flags the last step.
        """
        u_new = np.asarray(u_new, dtype=np.float64)
        if not np.all(np.isfinite(u_new)):
            raise EpisodeFault(f"policy produced non-finite input {u_new}")
        gamma = 1 if self.k == 0 else int(bool(gamma))
        x, y = self.x, self.y
        u = self.actuator.apply(gamma, u_new, y)
        x_next, y_next = self.plant.step(x, u, self.rng)
        done = self.plant.terminated(x_next)
        r = reward(x, u, gamma, self.weights, terminated=done)
        self.x, self.y = x_next, y_next
        self.k += 1
        info = {"x": x, "y": y, "u": u, "gamma": gamma, "truncated": self.k >= self.horizon}
        return self.agent_state(), r, done, info


@dataclass
class EpisodeLog:
    x: np.ndarray  # (T, n) true state at each decision
    y: np.ndarray  # (T, n) observation at each decision
    raw: np.ndarray  # (T, m) raw policy output, NaN where the policy gave none
    u: np.ndarray  # (T, l) applied input
    gamma: np.ndarray  # (T,)
    reward: np.ndarray  # (T,)
    terminated: bool = False
    final_x: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.gamma)

    @property
    def comm_count(self) -> int:
        return int(self.gamma.sum())

    @property
    def comm_rate(self) -> float:
        return self.comm_count / len(self)

    def discounted_return(self, zeta: float = 1.0) -> float:
        return float(np.sum(self.reward * zeta ** np.arange(len(self))))

    def to_csv(self, path=None) -> str:
        n, l = self.x.shape[1], self.u.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["step"] + [f"x{i}" for i in range(n)] + [f"y{i}" for i in range(n)]
        header += ["u_applied"] if l == 1 else [f"u_applied{i}" for i in range(l)]
        w.writerow(header + ["gamma", "reward"])
        for k in range(len(self)):
            w.writerow(
                [k]
                + [repr(float(v)) for v in self.x[k]]
                + [repr(float(v)) for v in self.y[k]]
                + [repr(float(v)) for v in self.u[k]]
                + [int(self.gamma[k]), repr(float(self.reward[k]))]
            )
        text = buf.getvalue()
        if path is not None:
            atomic_write_text(path, text)
        return text


def _unpack(action) -> tuple[int, np.ndarray, np.ndarray | None]:
    if len(action) == 3:
        gamma, u, raw = action
    else:
        (gamma, u), raw = action, None
    return int(gamma), np.atleast_1d(np.asarray(u, dtype=np.float64)), raw


def run_episode(env: EtcEnv, policy: Policy, T: int, rng: np.random.Generator) -> EpisodeLog:
    """Closed-loop rollout of ``policy`` for at most ``T`` steps with ZOH actuation."""
    if T < 1:
        raise ValueError("T must be >= 1")
    s = env.reset(rng)
    xs, ys, raws, us, gs, rs = [], [], [], [], [], []
    done = False
    for _ in range(T):
        gamma, u_new, raw = _unpack(policy(s))
        s, r, done, info = env.step(gamma, u_new)
        xs.append(info["x"])
        ys.append(info["y"])
        raws.append(raw)
        us.append(info["u"])
        gs.append(info["gamma"])
        rs.append(r)
        if done:
            break
    width = max((len(np.atleast_1d(a)) for a in raws if a is not None), default=0)
    raw_arr = np.full((len(gs), width), np.nan)
    for k, a in enumerate(raws):
        if a is not None:
            raw_arr[k] = a
    return EpisodeLog(
        np.array(xs), np.array(ys), raw_arr, np.array(us), np.array(gs, dtype=np.int64),
        np.array(rs), terminated=done, final_x=env.x.copy(),
    )


def moving_avg_comm(gammas: Sequence[float], window: int = 50) -> np.ndarray:
    """Trailing mean of the communication decisions over at most ``window`` steps."""
    if window < 1:
        raise ValueError("window must be >= 1")
    g = np.asarray(gammas, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(g)])
    k = np.arange(1, len(g) + 1)
    lo = np.maximum(k - window, 0)
    return (c[k] - c[lo]) / (k - lo)


def quadratic_cost(log: EpisodeLog, Q, R) -> float:
    """Sum over the episode of x'Qx + u'Ru using the executed inputs."""
    if len(log) == 0:
        raise ValueError("empty episode log")
    Q = np.atleast_2d(Q)
    R = np.atleast_2d(R)
    return float(
        np.einsum("ki,ij,kj->", log.x, Q, log.x) + np.einsum("ki,ij,kj->", log.u, R, log.u)
    )


def max_abs_angle(log: EpisodeLog, angle_index: int = 0) -> float:
    angles = np.abs(log.x[:, angle_index])
    if log.final_x is not None:
        angles = np.append(angles, abs(log.final_x[angle_index]))
    return float(angles.max())


def check_log_invariants(log: EpisodeLog, weights: RewardWeights | None = None) -> None:
    """Assert ZOH and bookkeeping invariants on a logged episode.

    With ``weights`` the logged rewards are also recomputed from the logged
    state, applied input and decision.
    """
    T = len(log)
    for name in ("x", "y", "raw", "u", "reward"):
        if len(getattr(log, name)) != T:
            raise AssertionError(f"log field {name} has wrong length")
    if not set(np.unique(log.gamma)) <= {0, 1}:
        raise AssertionError("gamma must be binary")
    if T and log.gamma[0] != 1:
        raise AssertionError("first step must communicate")
    held = log.gamma[1:] == 0
    if not np.array_equal(log.u[1:][held], log.u[:-1][held]):
        raise AssertionError("zero-order hold violated: input changed without communication")
    if log.comm_count != int(np.sum(log.gamma)):
        raise AssertionError("communication count mismatch")
    if not 0.0 <= log.comm_rate <= 1.0:
        raise AssertionError("communication rate outside [0, 1]")
    if weights is not None and T:
        done = np.zeros(T, dtype=bool)
        done[-1] = log.terminated
        expect = reward(log.x, log.u, log.gamma, weights, terminated=done)
        if not np.allclose(log.reward, expect, rtol=1e-12, atol=1e-12):
            raise AssertionError("logged reward does not match the applied input and decision")


def episode_stable(log: EpisodeLog, plant: Plant, T: int, angle_bound: float = 0.2, final_window: int = 100) -> bool:
    """Success flag of one episode.

    Balance and cart-pole must run all T steps with |angle| <= angle_bound
    throughout; swing-up only needs the bound over the last ``final_window`` steps.
    """
    if len(log) != T:
        return False
    if getattr(plant, "task", None) == "swingup":
        angles = np.abs(np.append(log.x[-final_window:, plant.angle_index], log.final_x[plant.angle_index]))
        return bool(angles.max() <= angle_bound)
    return max_abs_angle(log, plant.angle_index) <= angle_bound
