"""Parameterized-action DDPG that learns when to communicate and what input to send.

The actor maps the agent state (observation features, last applied input) to
``(d1, d2, u)``; the agent communicates iff ``d1 > d2`` and ``u`` is the
control parameter of the communicate action.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .nn import AdamState, Mlp, NonFiniteError, adam_step, backward, forward, soft_update
from .fileio import atomic_write_bytes, atomic_write_text
from .rng import generator_state, set_generator_state, stream
from .runtime import AgentState, EtcEnv, episode_stable, run_episode

ACTION_DIM = 3  # d1, d2, u


@dataclass
class DdpgConfig:
    hidden: tuple[int, ...] = (64, 64)
    zeta: float = 0.99
    kappa: float = 0.005
    batch_size: int = 64
    buffer_size: int = 100_000
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_anneal_frac: float = 0.2
    ou_theta: float = 0.15
    ou_sigma_frac: float = 0.2
    warmup: int = 1000
    reward_scale: float = 0.1
    invert_gradients: bool = True
    episodes: int = 100
    horizon: int = 500

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 < self.zeta <= 1.0:
            raise ValueError("zeta must lie in (0, 1]")
        if not 0.0 < self.kappa <= 1.0:
            raise ValueError("kappa must lie in (0, 1]")
        if not 0.0 <= self.eps_end <= self.eps_start <= 1.0:
            raise ValueError("need 0 <= eps_end <= eps_start <= 1")
        for name in ("batch_size", "buffer_size", "horizon"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.episodes < 0 or self.warmup < 0:
            raise ValueError("episodes and warmup must be >= 0")

    @property
    def total_steps(self) -> int:
        return self.episodes * self.horizon

    def epsilon(self, step: int) -> float:
        anneal = self.eps_anneal_frac * self.total_steps
        if anneal <= 0:
            return self.eps_end
        frac = min(step / anneal, 1.0)
        return self.eps_start + frac * (self.eps_end - self.eps_start)


class ReplayBuffer:
    """Fixed-capacity ring of transitions, sampled uniformly with replacement."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int = ACTION_DIM):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity)
        self.size = 0
        self._next = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s, a, r, s2, done) -> None:
        i = self._next
        self.s[i], self.a[i], self.r[i], self.s2[i], self.done[i] = s, a, r, s2, float(done)
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return {"s": self.s[idx], "a": self.a[idx], "r": self.r[idx], "s2": self.s2[idx], "done": self.done[idx]}

    def ordered(self) -> dict:
        """Contents from oldest to newest."""
        if self.size < self.capacity:
            idx = np.arange(self.size)
        else:
            idx = (np.arange(self.capacity) + self._next) % self.capacity
        return {"s": self.s[idx], "a": self.a[idx], "r": self.r[idx], "s2": self.s2[idx], "done": self.done[idx]}


class OuNoise:
    """x <- x + theta*(mu - x) + sigma*N(0, 1), with mu = 0."""

    def __init__(self, dim: int, theta: float = 0.15, sigma: float = 0.2):
        self.theta = theta
        self.sigma = sigma
        self.state = np.zeros(dim)

    def reset(self) -> None:
        self.state = np.zeros_like(self.state)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        self.state = self.state - self.theta * self.state + self.sigma * rng.standard_normal(self.state.shape)
        return self.state


def build_actor(state_dim: int, hidden, u_max: float, rng=None) -> Mlp:
    return Mlp(
        [state_dim, *hidden, ACTION_DIM], "relu", ("linear", "linear", "tanh"), (1.0, 1.0, u_max), rng
    )


def build_critic(state_dim: int, hidden, rng=None) -> Mlp:
    return Mlp([state_dim + ACTION_DIM, *hidden, 1], "relu", "linear", None, rng)


class DdpgAgent:
    def __init__(self, state_dim: int, u_max: float, config: DdpgConfig | None = None, seed: int = 0):
        self.config = config or DdpgConfig()
        self.state_dim = state_dim
        self.u_max = u_max
        init = stream(seed, "init")
        self.actor = build_actor(state_dim, self.config.hidden, u_max, init)
        self.critic = build_critic(state_dim, self.config.hidden, init)
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.actor_opt = AdamState(self.actor.theta.size, lr=self.config.lr_actor)
        self.critic_opt = AdamState(self.critic.theta.size, lr=self.config.lr_critic)
        self.buffer = ReplayBuffer(self.config.buffer_size, state_dim)
        self.noise = OuNoise(1, self.config.ou_theta, self.config.ou_sigma_frac * u_max)
        self.explore_rng = stream(seed, "explore")
        self.replay_rng = stream(seed, "replay")
        self.steps = 0

    def networks(self) -> dict[str, Mlp]:
        return {
            "actor": self.actor,
            "critic": self.critic,
            "target_actor": self.target_actor,
            "target_critic": self.target_critic,
        }

    def act(self, s: AgentState):
        """Greedy policy: communicate iff d1 > d2, send the actor's input."""
        d1, d2, u = actor_out(self.actor, s.vector())
        return decide(d1, d2), np.array([u]), np.array([d1, d2, u])

    __call__ = act

    def save(self, directory, extra: dict | None = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, net in self.networks().items():
            atomic_write_bytes(directory / f"{name}.etcrl", nn.dumps(net))
        manifest = {
            "config": asdict(self.config),
            "config_hash": config_hash(self.config),
            "state_dim": self.state_dim,
            "u_max": self.u_max,
            "steps": self.steps,
            "rng": {
                "explore": generator_state(self.explore_rng),
                "replay": generator_state(self.replay_rng),
                "ou_state": self.noise.state.tolist(),
            },
        }
        manifest.update(extra or {})
        atomic_write_text(directory / "manifest.txt", json.dumps(manifest, sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, directory) -> "DdpgAgent":
        directory = Path(directory)
        manifest = read_manifest(directory)
        cfg = DdpgConfig(**manifest["config"])
        agent = cls(manifest["state_dim"], manifest["u_max"], cfg)
        for name, net in agent.networks().items():
            loaded = nn.load(directory / f"{name}.etcrl")
            if loaded.architecture() != net.architecture():
                raise ValueError(f"checkpoint {name} does not match the configured architecture")
            net.set_params(loaded.theta)
        agent.steps = manifest["steps"]
        set_generator_state(agent.explore_rng, manifest["rng"]["explore"])
        set_generator_state(agent.replay_rng, manifest["rng"]["replay"])
        agent.noise.state = np.array(manifest["rng"]["ou_state"], dtype=np.float64)
        return agent


def read_manifest(directory) -> dict:
    return json.loads((Path(directory) / "manifest.txt").read_text())


def config_hash(config) -> str:
    blob = json.dumps(asdict(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def actor_out(actor: Mlp, s: np.ndarray) -> tuple[float, float, float]:
    out = forward(actor, s)[0][0]
    return float(out[0]), float(out[1]), float(out[2])


def decide(d1: float, d2: float) -> int:
    return int(d1 > d2)


def explore_action(agent: DdpgAgent, s: np.ndarray, epsilon: float, rng: np.random.Generator):
    """Epsilon-greedy over the discrete choice plus OU noise on the input.

    Returns ``(gamma, u, raw)`` where ``raw`` is the action stored for replay;
    on the random branch its scores are overwritten with ``(gamma, 1 - gamma)``.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    d1, d2, u = actor_out(agent.actor, s)
    u = float(np.clip(u + agent.noise.sample(rng)[0], -agent.u_max, agent.u_max))
    if rng.random() < epsilon:
        gamma = int(rng.random() < 0.5)
        d1, d2 = float(gamma), float(1 - gamma)
    else:
        gamma = decide(d1, d2)
    return gamma, u, np.array([d1, d2, u])


def critic_target(batch: dict, target_actor: Mlp, target_critic: Mlp, zeta: float) -> np.ndarray:
    """r + zeta * (1 - done) * Q'(s', mu'(s'))."""
    s2 = batch["s2"]
    a2 = forward(target_actor, s2)[0]
    q2 = forward(target_critic, np.hstack([s2, a2]))[0][:, 0]
    return batch["r"] + zeta * (1.0 - batch["done"]) * q2


def critic_update(agent: DdpgAgent, batch: dict) -> float:
    """One Adam step on the mean squared TD error; returns the loss before the step."""
    y = critic_target(batch, agent.target_actor, agent.target_critic, agent.config.zeta)
    q, cache = forward(agent.critic, np.hstack([batch["s"], batch["a"]]))
    err = q[:, 0] - y
    loss = float(np.mean(err**2))
    if not np.isfinite(loss):
        raise NonFiniteError("critic loss is not finite")
    g, _ = backward(agent.critic, cache, (2.0 / len(err)) * err[:, None], input_grad=False)
    adam_step(agent.critic, g, agent.critic_opt)
    return loss


SCORE_BOUND = 1.0


def invert_score_gradients(a: np.ndarray, dq_da: np.ndarray) -> np.ndarray:
    """Shrink score-head gradients as the scores approach +-SCORE_BOUND.

    A push towards a bound is scaled by the remaining distance to it, so the
    linear score heads stay inside the bounds without saturating.
    """
    d = a[:, :2]
    gd = dq_da[:, :2]
    span = 2.0 * SCORE_BOUND
    out = dq_da.copy()
    out[:, :2] = np.where(gd > 0, gd * (SCORE_BOUND - d) / span, gd * (d + SCORE_BOUND) / span)
    return out


def actor_gradient(actor: Mlp, critic: Mlp, s: np.ndarray, invert: bool = False) -> tuple[np.ndarray, float]:
    """Gradient of mean Q(s, mu(s)) w.r.t. actor parameters, chained through the critic."""
    a, cache_a = forward(actor, s)
    q, cache_q = forward(critic, np.hstack([s, a]))
    _, dq_dinput = backward(critic, cache_q, np.full_like(q, 1.0 / len(q)), param_grads=False)
    dq_da = dq_dinput[:, s.shape[1] :]
    if invert:
        dq_da = invert_score_gradients(a, dq_da)
    g, _ = backward(actor, cache_a, dq_da, input_grad=False)
    return g, float(q.mean())


def actor_update(agent: DdpgAgent, batch: dict) -> float:
    """One Adam ascent step on mean Q(s, mu(s)); returns the objective before the step."""
    g, objective = actor_gradient(agent.actor, agent.critic, batch["s"], agent.config.invert_gradients)
    adam_step(agent.actor, -g, agent.actor_opt)
    return objective


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, agent: DdpgAgent):
        super().__init__(message)
        self.agent = agent


@dataclass
class TrainLog:
    episode_return: list = field(default_factory=list)
    comm_rate: list = field(default_factory=list)
    cost: list = field(default_factory=list)
    critic_loss: list = field(default_factory=list)
    steps: list = field(default_factory=list)

    def rows(self):
        for i in range(len(self.steps)):
            yield {
                "episode": i,
                "steps": self.steps[i],
                "return": self.episode_return[i],
                "comm_rate": self.comm_rate[i],
                "cost": self.cost[i],
                "critic_loss": self.critic_loss[i],
            }


def train(env: EtcEnv, config: DdpgConfig, seed: int = 0, agent: DdpgAgent | None = None,
          transition_hook=None, episode_offset: int = 0, episodes: int | None = None) -> tuple[DdpgAgent, TrainLog]:
    """Algorithm: epsilon-greedy/OU rollouts through the ZOH loop with per-step updates.

    ``transition_hook(s, a, r, s2, done, info)`` is called for every stored
    transition (used by consistency checks).
    """
    agent = agent or DdpgAgent(env.state_dim, env.plant.u_max, config, seed)
    log = TrainLog()
    Q, R = env.weights.Q, env.weights.R
    snapshot = {k: n.theta.copy() for k, n in agent.networks().items()}
    # episode_offset/episodes allow resuming a run in chunks with identical streams
    n_episodes = config.episodes if episodes is None else episodes
    for ep in range(episode_offset, episode_offset + n_episodes):
        state = env.reset(stream(seed, "train_env", ep))
        agent.noise.reset()
        s = state.vector()
        ep_ret, ep_comm, ep_cost, losses, n = 0.0, 0, 0.0, [], 0
        try:
            for k in range(config.horizon):
                gamma, u, a = explore_action(agent, s, config.epsilon(agent.steps), agent.explore_rng)
                if k == 0:
                    gamma, a[0], a[1] = 1, 1.0, 0.0
                state, r, done, info = env.step(gamma, [u])
                s2 = state.vector()
                agent.buffer.add(s, a, config.reward_scale * r, s2, done)
                if transition_hook is not None:
                    transition_hook(s, a, r, s2, done, info)
                agent.steps += 1
                n += 1
                ep_ret += r
                ep_comm += info["gamma"]
                x, ua = info["x"], info["u"]
                ep_cost += float(x @ Q @ x + ua @ R @ ua)
                if agent.steps > config.warmup:
                    batch = agent.buffer.sample(config.batch_size, agent.replay_rng)
                    losses.append(critic_update(agent, batch))
                    actor_update(agent, batch)
                    soft_update(agent.target_critic, agent.critic, config.kappa)
                    soft_update(agent.target_actor, agent.actor, config.kappa)
                s = s2
                if done:
                    break
            for net in agent.networks().values():
                if not np.all(np.isfinite(net.theta)):
                    raise NonFiniteError("network parameters became non-finite")
        except (NonFiniteError, FloatingPointError) as exc:
            for name, net in agent.networks().items():
                net.set_params(snapshot[name])
            raise TrainingDiverged(f"diverged in episode {ep}: {exc}", agent) from exc
        snapshot = {k: net.theta.copy() for k, net in agent.networks().items()}
        log.episode_return.append(ep_ret)
        log.comm_rate.append(ep_comm / n)
        log.cost.append(ep_cost)
        log.critic_loss.append(float(np.mean(losses)) if losses else float("nan"))
        log.steps.append(agent.steps)
    return agent, log


@dataclass
class Checkpoint:
    """Validation result of the greedy policy after a block of training episodes."""

    episodes: int
    steps: int
    stable_fraction: float
    comm_rate: float

    def score(self, min_stable: float) -> tuple:
        # enough stable episodes first, then the lowest communication rate
        if self.stable_fraction >= min_stable:
            return (1, -self.comm_rate)
        return (0, self.stable_fraction)


def validate(env: EtcEnv, agent: DdpgAgent, seed: int, episodes: int, T: int, angle_bound: float = 0.2):
    """Greedy rollouts on the validation stream, disjoint from training and evaluation noise."""
    stable, comm = [], []
    for e in range(episodes):
        log = run_episode(env, agent.act, T, stream(seed, "validate", e))
        stable.append(episode_stable(log, env.plant, T, angle_bound))
        comm.append(log.comm_rate)
    return float(np.mean(stable)), float(np.mean(comm))


def train_selected(env: EtcEnv, config: DdpgConfig, seed: int = 0, every: int = 40, val_episodes: int = 20,
                   T: int = 500, angle_bound: float = 0.2, min_stable: float = 0.9):
    """Train in blocks of ``every`` episodes and keep the best validated actor.

    Returns ``(agent, best_actor, log, checkpoints)``; ``agent`` is the final
    state of training and ``best_actor`` a copy of the selected actor.
    """
    if every < 1 or val_episodes < 1:
        raise ValueError("every and val_episodes must be >= 1")
    agent = DdpgAgent(env.state_dim, env.plant.u_max, config, seed)
    log = TrainLog()
    checkpoints: list[Checkpoint] = []
    best_actor, best_score = agent.actor.copy(), None
    done = 0
    while done < config.episodes:
        n = min(every, config.episodes - done)
        agent, block = train(env, config, seed, agent=agent, episode_offset=done, episodes=n)
        for key in vars(log):
            getattr(log, key).extend(getattr(block, key))
        done += n
        stable, comm = validate(env, agent, seed, val_episodes, T, angle_bound)
        cp = Checkpoint(done, agent.steps, stable, comm)
        checkpoints.append(cp)
        if best_score is None or cp.score(min_stable) > best_score:
            best_score = cp.score(min_stable)
            best_actor = copy.deepcopy(agent.actor)
    return agent, best_actor, log, checkpoints
