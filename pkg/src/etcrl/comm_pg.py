"""Learning only the communication decision on top of a frozen controller.

A sigmoid network outputs the probability of transmitting the controller's
current proposal given (observation, proposal, held input).  It is trained
with the likelihood-ratio policy gradient using discounted reward-to-go and a
batch-mean baseline.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import Plant, RewardWeights, angle_wrap, reward
from .nn import AdamState, Mlp, adam_step, backward, forward
from .rng import stream
from .runtime import AgentState

P_MIN = 1e-6
P_MAX = 1.0 - 1e-6


class FrozenController:
    """Read-only controller: an LQR gain or a trained DDPG actor used with full communication."""

    def __init__(self, kind: str, K=None, actor: Mlp | None = None, plant: Plant | None = None):
        if kind == "lqr_gain":
            if K is None:
                raise ValueError("lqr_gain controller needs K")
            self.K = np.array(np.atleast_2d(K), dtype=np.float64)
            self.K.flags.writeable = False
        elif kind == "ddpg_actor_full_comm":
            if actor is None or plant is None:
                raise ValueError("ddpg controller needs the actor and the plant")
            self.actor = actor.copy()
            self.actor.theta.flags.writeable = False
            self.plant = plant
        else:
            raise ValueError(f"unknown controller kind {kind!r}")
        self.kind = kind

    @classmethod
    def lqr(cls, K) -> "FrozenController":
        return cls("lqr_gain", K=K)

    def __call__(self, y: np.ndarray, u_prev: np.ndarray) -> np.ndarray:
        """Input proposal for one observation (1-D) or a batch of them (2-D)."""
        if self.kind == "lqr_gain":
            # elementwise form so a batch row is bit-identical to the single-row result
            return (y[..., None, :] * self.K).sum(-1)
        single = y.ndim == 1
        inp = np.hstack([np.atleast_2d(self.plant.features(y)), np.atleast_2d(u_prev)])
        u = forward(self.actor, inp)[0][:, 2:3]
        return u[0] if single else u

    def fingerprint(self) -> bytes:
        return (self.K if self.kind == "lqr_gain" else self.actor.theta).tobytes()


class GatePolicy:
    """Bernoulli communication gate; inputs are scaled elementwise by ``input_scale``."""

    def __init__(self, n_inputs: int, hidden=(64, 64), input_scale=None, rng=None):
        self.net = Mlp([n_inputs, *hidden, 1], "relu", "sigmoid", None, rng)
        self.input_scale = np.ones(n_inputs) if input_scale is None else np.asarray(input_scale, float)

    def features(self, obs, u_now, u_prev) -> np.ndarray:
        return np.hstack([np.atleast_2d(obs), np.atleast_2d(u_now), np.atleast_2d(u_prev)]) * self.input_scale

    def prob(self, inputs: np.ndarray) -> np.ndarray:
        """Clamped P(gamma = 1) for a batch of already-scaled inputs."""
        return np.clip(forward(self.net, inputs)[0][:, 0], P_MIN, P_MAX)


def gate_prob(policy: GatePolicy, x, u_now, u_prev) -> float:
    return float(policy.prob(policy.features(x, u_now, u_prev))[0])


def sample_gate(p: float, rng: np.random.Generator) -> tuple[int, float]:
    """Draw gamma ~ Bernoulli(p); returns ``(gamma, log_prob)``."""
    p = float(np.clip(p, P_MIN, P_MAX))
    gamma = int(rng.random() < p)
    return gamma, float(np.log(p if gamma else 1.0 - p))


def returns_to_go(rewards: np.ndarray, zeta: float) -> np.ndarray:
    G = np.empty(len(rewards))
    acc = 0.0
    for k in range(len(rewards) - 1, -1, -1):
        acc = rewards[k] + zeta * acc
        G[k] = acc
    return G


@dataclass
class GateEpisode:
    inputs: np.ndarray  # (T, d) scaled gate inputs
    gamma: np.ndarray  # (T,)
    reward: np.ndarray  # (T,)
    learn: np.ndarray  # (T,) bool, False where the decision was forced
    log_prob: np.ndarray  # (T,)


def _batch_arrays(policy: GatePolicy, episodes: list[GateEpisode], zeta: float):
    if not episodes:
        raise ValueError("reinforce update needs at least one episode")
    G = np.concatenate([returns_to_go(ep.reward, zeta) for ep in episodes])
    X = np.concatenate([ep.inputs for ep in episodes])
    g = np.concatenate([ep.gamma for ep in episodes]).astype(np.float64)
    mask = np.concatenate([ep.learn for ep in episodes])
    return X, g, G, mask


def reinforce_gradient(policy: GatePolicy, X, gamma, G, mask, n_episodes: int) -> np.ndarray:
    """Gradient of sum_k (G_k - mean G) log pi(gamma_k | s_k), averaged over episodes."""
    adv = (G - G[mask].mean()) * mask
    out, cache = forward(policy.net, X)
    p_raw = out[:, 0]
    inside = (p_raw > P_MIN) & (p_raw < P_MAX)
    p = np.clip(p_raw, P_MIN, P_MAX)
    dlogp_dp = gamma / p - (1.0 - gamma) / (1.0 - p)
    grad_out = (adv * dlogp_dp * inside / n_episodes)[:, None]
    grads, _ = backward(policy.net, cache, grad_out, input_grad=False)
    return grads


def surrogate(policy: GatePolicy, X, gamma, G, mask, n_episodes: int) -> float:
    adv = (G - G[mask].mean()) * mask
    p = policy.prob(X)
    logp = np.where(gamma > 0.5, np.log(p), np.log(1.0 - p))
    return float(np.sum(adv * logp) / n_episodes)


def reinforce_update(policy: GatePolicy, episodes: list[GateEpisode], zeta: float, opt: AdamState) -> float:
    """One Adam ascent step on the policy-gradient surrogate; returns the mean episode return."""
    X, g, G, mask = _batch_arrays(policy, episodes, zeta)
    grads = reinforce_gradient(policy, X, g, G, mask, len(episodes))
    adam_step(policy.net, -grads, opt)
    return float(np.mean([ep.reward.sum() for ep in episodes]))


@dataclass
class GateConfig:
    hidden: tuple[int, ...] = (64, 64)
    batch_episodes: int = 10
    lr: float = 1e-3
    zeta: float = 0.99
    iterations: int = 100
    horizon: int = 500
    angle_bound: float = 0.2

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.batch_episodes < 1 or self.horizon < 1 or self.iterations < 0:
            raise ValueError("batch_episodes and horizon must be >= 1, iterations >= 0")
        if not 0.0 < self.zeta <= 1.0:
            raise ValueError("zeta must lie in (0, 1]")


@dataclass
class GateTrainLog:
    mean_return: list = field(default_factory=list)
    comm_rate: list = field(default_factory=list)
    cost: list = field(default_factory=list)

    def rows(self):
        for i in range(len(self.mean_return)):
            yield {"iteration": i, "return": self.mean_return[i], "comm_rate": self.comm_rate[i], "cost": self.cost[i]}


class UnstableController(RuntimeError):
    pass


def rollout_batch(
    plant: Plant,
    weights: RewardWeights,
    controller: FrozenController,
    gate,
    T: int,
    env_rngs: list[np.random.Generator],
    gate_rng: np.random.Generator | None = None,
) -> dict:
    """Lockstep rollouts of several episodes through the ZOH actuator.

    ``gate`` is a :class:`GatePolicy` (sampled with ``gate_rng``), the string
    ``"always"`` or a callable ``(features) -> gamma array``.  Episode ``b``
    draws plant noise from ``env_rngs[b]`` in the same order as
    :func:`runtime.run_episode`.
    """
    B = len(env_rngs)
    n, l = plant.n_state, plant.n_input
    x = np.stack([plant.reset(r) for r in env_rngs]) if B else np.zeros((0, n))
    y = np.stack([plant.measure(x[b], env_rngs[b]) for b in range(B)])
    u_prev = np.zeros((B, l))
    alive = np.ones(B, dtype=bool)
    xs, us, gs, rs, inputs, learn, alive_hist = [], [], [], [], [], [], []
    sd_p = np.sqrt(np.asarray(plant.params.process_var))
    for k in range(T):
        u_now = plant.clamp(controller(y, u_prev))
        if isinstance(gate, GatePolicy):
            feats = gate.features(plant.features(y), u_now, u_prev)
            p = gate.prob(feats)
            gamma = (gate_rng.random(B) < p).astype(np.int64)
            inputs.append(feats)
        elif gate == "always":
            gamma = np.ones(B, dtype=np.int64)
        else:
            gamma = np.asarray(gate(plant.features(y), u_now, u_prev), dtype=np.int64)
        learn.append(np.full(B, k > 0) & alive)
        if k == 0:
            gamma = np.ones(B, dtype=np.int64)
        u = np.where(gamma[:, None] == 1, u_now, u_prev)
        x_next = plant.dynamics(x, u)
        for b in range(B):
            x_next[b] += sd_p * env_rngs[b].standard_normal(n)
        x_next[:, plant.angle_index] = angle_wrap(x_next[:, plant.angle_index])
        done = np.array([plant.terminated(x_next[b]) for b in range(B)])
        r = reward(x, u, gamma, weights, terminated=done)
        xs.append(x)
        us.append(u)
        gs.append(gamma * alive)
        rs.append(np.where(alive, r, 0.0))
        alive_hist.append(alive.copy())
        alive = alive & ~done
        y = np.stack([plant.measure(x_next[b], env_rngs[b]) for b in range(B)])
        x, u_prev = x_next, u
    return {
        "x": np.stack(xs, 1),
        "u": np.stack(us, 1),
        "gamma": np.stack(gs, 1),
        "reward": np.stack(rs, 1),
        "inputs": np.stack(inputs, 1) if inputs else None,
        "learn": np.stack(learn, 1),
        "alive": np.stack(alive_hist, 1),
        "final_x": x,
    }


def episode_costs(batch: dict, weights: RewardWeights) -> np.ndarray:
    x, u, alive = batch["x"], batch["u"], batch["alive"]
    c = np.einsum("bki,ij,bkj->bk", x, weights.Q, x) + np.einsum("bki,ij,bkj->bk", u, weights.R, u)
    return (c * alive).sum(1)


def calibrate(plant: Plant, weights: RewardWeights, controller: FrozenController, T: int, seed: int,
              angle_bound: float) -> np.ndarray:
    """Always-communicate check of the controller; returns gate input scales (1/std)."""
    batch = rollout_batch(plant, weights, controller, "always", T, [stream(seed, "calibrate", i) for i in range(4)])
    angles = np.abs(batch["x"][..., plant.angle_index])
    if not np.all(np.isfinite(batch["x"])) or (plant.task == "balance" and angles.max() > angle_bound):
        raise UnstableController("controller does not stabilise the plant with full communication")
    y = batch["x"]
    u = batch["u"]
    u_prev = np.concatenate([np.zeros_like(u[:, :1]), u[:, :-1]], axis=1)
    feats = np.concatenate([plant.features(y), u, u_prev], axis=-1).reshape(-1, plant.n_features + 2 * plant.n_input)
    sd = feats.std(axis=0)
    return 1.0 / np.where(sd > 0, sd, 1.0)


def train_gate(
    plant: Plant,
    weights: RewardWeights,
    controller: FrozenController,
    config: GateConfig | None = None,
    seed: int = 0,
) -> tuple[GatePolicy, GateTrainLog]:
    """Roll out batches with the frozen controller and update the gate after each batch."""
    config = config or GateConfig()
    scale = calibrate(plant, weights, controller, config.horizon, seed, config.angle_bound)
    n_in = plant.n_features + 2 * plant.n_input
    gate = GatePolicy(n_in, config.hidden, scale, stream(seed, "gate_init"))
    opt = AdamState(gate.net.theta.size, lr=config.lr)
    gate_rng = stream(seed, "gate_sample")
    log = GateTrainLog()
    for it in range(config.iterations):
        rngs = [stream(seed, "gate_env", it * config.batch_episodes + b) for b in range(config.batch_episodes)]
        batch = rollout_batch(plant, weights, controller, gate, config.horizon, rngs, gate_rng)
        episodes = []
        for b in range(config.batch_episodes):
            alive = batch["alive"][b]
            g = batch["gamma"][b]
            p = gate.prob(batch["inputs"][b])
            episodes.append(GateEpisode(
                batch["inputs"][b][alive], g[alive], batch["reward"][b][alive], batch["learn"][b][alive],
                np.where(g[alive] == 1, np.log(p[alive]), np.log(1.0 - p[alive])),
            ))
        log.mean_return.append(reinforce_update(gate, episodes, config.zeta, opt))
        log.comm_rate.append(float(np.mean([ep.gamma.mean() for ep in episodes])))
        log.cost.append(float(episode_costs(batch, weights).mean()))
    return gate, log


class GatedController:
    """Evaluation policy: frozen controller behind a gate thresholded at p > 0.5 (or sampled)."""

    def __init__(self, plant: Plant, controller: FrozenController, gate: GatePolicy,
                 stochastic: bool = False, rng: np.random.Generator | None = None, threshold: float = 0.5):
        self.plant = plant
        self.controller = controller
        self.gate = gate
        self.stochastic = stochastic
        self.rng = rng
        self.threshold = threshold

    def __call__(self, s: AgentState):
        u_now = self.plant.clamp(self.controller(s.y, s.u_prev))
        p = gate_prob(self.gate, s.obs, u_now, s.u_prev)
        if self.stochastic:
            gamma = sample_gate(p, self.rng)[0]
        else:
            gamma = int(p > self.threshold)
        return gamma, u_now, np.array([p])
