"""Model-based event-triggered baselines: linearization, LQR and fixed-threshold triggers."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .envs import Plant, RewardWeights
from .rng import stream
from .runtime import AgentState, EtcEnv, check_log_invariants, episode_stable, quadratic_cost, run_episode

LAWS = ("norm", "input_relative", "state_relative")


@dataclass
class LinearModel:
    A: np.ndarray
    B: np.ndarray


@dataclass
class LqrDesign:
    K: np.ndarray  # u = K x
    P: np.ndarray
    spectral_radius: float


class DareError(RuntimeError):
    pass


def linearize(plant: Plant, x_star, u_star, eps: float = 1e-6) -> LinearModel:
    """Central-difference Jacobians of the noise-free step map around (x*, u*)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x_star = np.asarray(x_star, dtype=np.float64)
    u_star = np.atleast_1d(np.asarray(u_star, dtype=np.float64))
    n, m = x_star.size, u_star.size
    ai = plant.angle_index

    def diff(a, b):
        d = (a - b) / (2.0 * eps)
        # a probe may straddle the +-pi seam
        d[ai] = np.angle(np.exp(1j * (a[ai] - b[ai]))) / (2.0 * eps)
        return d

    A = np.empty((n, n))
    for j in range(n):
        dx = np.zeros(n)
        dx[j] = eps
        A[:, j] = diff(plant.f(x_star + dx, u_star), plant.f(x_star - dx, u_star))
    B = np.empty((n, m))
    for j in range(m):
        du = np.zeros(m)
        du[j] = eps
        B[:, j] = diff(plant.f(x_star, u_star + du), plant.f(x_star, u_star - du))
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise ValueError("non-finite linearization probe")
    return LinearModel(A, B)


def solve_dare(A, B, Q, R, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Discrete algebraic Riccati equation by value iteration, starting from P = Q.

    Stops when the largest entry change drops below ``tol * max(1, max|P|)``,
    so large solutions are not held to an absolute tolerance below float spacing.
    """
    A, B, Q, R = (np.atleast_2d(np.asarray(M, dtype=np.float64)) for M in (A, B, Q, R))
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
            gain = np.linalg.solve(R + BtP @ B, BtP @ A)
            P_next = Q + A.T @ P @ A - A.T @ P @ B @ gain
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            raise DareError("Riccati iteration diverged")
        if np.max(np.abs(P_next - P)) < tol * max(1.0, np.max(np.abs(P_next))):
            return P_next
        P = P_next
    raise DareError(f"Riccati iteration did not converge in {max_iter} iterations")


def dare_residual(P, A, B, Q, R) -> float:
    A, B, Q, R = (np.atleast_2d(M) for M in (A, B, Q, R))
    rhs = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return float(np.max(np.abs(P - rhs)))


def lqr_gain(A, B, Q, R, tol: float = 1e-12, max_iter: int = 100_000) -> LqrDesign:
    A, B, Q, R = (np.atleast_2d(np.asarray(M, dtype=np.float64)) for M in (A, B, Q, R))
    P = solve_dare(A, B, Q, R, tol, max_iter)
    S = R + B.T @ P @ B
    if abs(np.linalg.det(S)) < 1e-300 or np.linalg.cond(S) > 1e14:
        raise np.linalg.LinAlgError("R + B'PB is singular")
    K = -np.linalg.solve(S, B.T @ P @ A)
    rho = float(np.max(np.abs(np.linalg.eigvals(A + B @ K))))
    if rho >= 1.0:
        raise DareError(f"LQR closed loop not stable (spectral radius {rho})")
    return LqrDesign(K, P, rho)


def upright_lqr(plant: Plant, weights: RewardWeights) -> LqrDesign:
    """LQR designed on the linearization about the upright equilibrium with zero input."""
    model = linearize(plant, np.zeros(plant.n_state), np.zeros(plant.n_input))
    return lqr_gain(model.A, model.B, weights.Q, weights.R)


def trigger_norm(x, delta: float) -> int:
    return int(np.linalg.norm(x) > delta)


def trigger_input_relative(K, x_hat, x, delta: float) -> int:
    K = np.atleast_2d(K)
    Kx = K @ np.asarray(x)
    return int(np.linalg.norm(K @ np.asarray(x_hat) - Kx) > delta * np.linalg.norm(Kx))


def trigger_state_relative(x_hat, x, delta: float) -> int:
    x = np.asarray(x)
    return int(np.linalg.norm(np.asarray(x_hat) - x) > delta * np.linalg.norm(x))


class TriggeredLqr:
    """Policy that sends u = K y whenever the chosen trigger law fires."""

    def __init__(self, K, law: str, delta: float):
        if law not in LAWS:
            raise ValueError(f"unknown trigger law {law!r}; expected one of {LAWS}")
        self.K = np.atleast_2d(np.asarray(K, dtype=np.float64))
        self.law = law
        self.delta = float(delta)

    def decide(self, s: AgentState) -> int:
        if self.law == "norm":
            return trigger_norm(s.y, self.delta)
        if self.law == "input_relative":
            return trigger_input_relative(self.K, s.x_hat, s.y, self.delta)
        return trigger_state_relative(s.x_hat, s.y, self.delta)

    def __call__(self, s: AgentState):
        return self.decide(s), self.K @ s.y


class AlwaysLqr:
    """Time-triggered reference: communicate K y at every step."""

    def __init__(self, K):
        self.K = np.atleast_2d(np.asarray(K, dtype=np.float64))

    def __call__(self, s: AgentState):
        return 1, self.K @ s.y


@dataclass
class SweepRow:
    delta: float
    mean_cost: float
    mean_comm: float
    stable: bool
    stable_fraction: float


def default_delta_grid(law: str, n: int = 20) -> np.ndarray:
    """Log-spaced thresholds; relative laws are spaced in 1 - delta.

    A relative law with delta >= 1 stops firing once the state runs away from
    the held one, so the useful range sits just below 1.
    """
    if law == "norm":
        # beyond ~0.5 the pendulum falls and the rate climbs again
        return np.logspace(-4, np.log10(0.5), n)
    if law in ("input_relative", "state_relative"):
        return np.sort(1.0 - np.logspace(np.log10(0.95), -2, n))
    raise ValueError(f"unknown trigger law {law!r}")


def delta_sweep(
    env: EtcEnv,
    K,
    law: str,
    deltas: Sequence[float],
    seeds: Sequence[int] = range(20),
    T: int = 500,
    master_seed: int = 0,
    angle_bound: float = 0.2,
    check: bool = True,
) -> list[SweepRow]:
    """Mean cost and communication rate of a triggered LQR over a threshold grid.

    Every threshold sees the same noise realizations: episode ``e`` in
    ``seeds`` draws from ``stream(master_seed, "eval", e)``, as in evaluation runs.
    """
    if len(deltas) == 0 or len(seeds) == 0:
        raise ValueError("empty sweep grid")
    rows = []
    for delta in sorted(float(d) for d in deltas):
        policy = TriggeredLqr(K, law, delta)
        costs, comms, ok = [], [], []
        for e in seeds:
            log = run_episode(env, policy, T, stream(master_seed, "eval", e))
            if check:
                check_log_invariants(log, env.weights)
            costs.append(quadratic_cost(log, env.weights.Q, env.weights.R))
            comms.append(log.comm_rate)
            ok.append(episode_stable(log, env.plant, T, angle_bound))
        frac = float(np.mean(ok))
        rows.append(SweepRow(delta, float(np.mean(costs)), float(np.mean(comms)), frac == 1.0, frac))
    return rows


def max_stable_savings(rows: Sequence[SweepRow], min_stable_fraction: float = 0.9) -> float:
    """Largest 1 - comm rate among thresholds that keep enough episodes stable (0 if none)."""
    ok = [1.0 - r.mean_comm for r in rows if r.stable_fraction >= min_stable_fraction]
    return max(ok, default=0.0)


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["delta", "mean_cost", "mean_comm", "stable"])
    for r in rows:
        w.writerow([repr(r.delta), repr(r.mean_cost), repr(r.mean_comm), int(r.stable)])
    return buf.getvalue()
