"""Run configuration, experiment orchestration and CSV export.

A run directory holds ``effective_config.yaml`` (the fully resolved config,
re-parseable), one ``seed_<s>`` directory per training seed with checkpoints
and a training log, and CSV summaries written by evaluation and sweeps.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import time
import types
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import baselines, comm_pg, ddpg, nn
from .envs import TASKS, PlantParams, RewardWeights, default_params, default_weights, make_plant
from .fileio import atomic_write_bytes, atomic_write_text
from .rng import generator_state, stream
from .runtime import EtcEnv, check_log_invariants, episode_stable, quadratic_cost, run_episode

APPROACHES = ("joint", "separated") + tuple(f"baseline:{law}" for law in baselines.LAWS)


class ConfigError(ValueError):
    """Invalid run configuration; the message starts with the offending field path."""


class RunFailed(RuntimeError):
    def __init__(self, failures: dict):
        self.failures = failures
        detail = "; ".join(f"{k}: {v}" for k, v in failures.items())
        super().__init__(f"{len(failures)} job(s) failed: {detail}")


@dataclass
class SelectionConfig:
    """Periodic greedy validation during joint training; every=0 keeps the final actor."""

    every: int = 0
    val_episodes: int = 20
    min_stable: float = 0.9

    def __post_init__(self):
        if self.every < 0 or self.val_episodes < 1:
            raise ValueError("every must be >= 0 and val_episodes >= 1")
        if not 0.0 <= self.min_stable <= 1.0:
            raise ValueError("min_stable must lie in [0, 1]")


@dataclass
class BaselineConfig:
    delta: float = 0.1
    deltas: tuple[float, ...] = ()  # empty: per-law default grid
    n_deltas: int = 20

    def __post_init__(self):
        self.deltas = tuple(float(d) for d in self.deltas)
        if self.delta < 0 or any(d < 0 for d in self.deltas):
            raise ValueError("thresholds must be >= 0")
        if self.n_deltas < 1:
            raise ValueError("n_deltas must be >= 1")


@dataclass
class SweepConfig:
    lambdas: tuple[float, ...] = ()  # empty: 25 log-spaced values in [0.01, 100]

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        if any(v < 0 for v in self.lambdas):
            raise ValueError("lambda values must be >= 0")


@dataclass
class RunConfig:
    task: str = "balance"
    approach: str = "joint"
    controller: str = "lqr"  # separated mode: "lqr" or a joint-run seed directory
    seeds: tuple[int, ...] = (0,)
    episode_length: int = 500
    eval_episodes: int = 100
    eval_stochastic_gate: bool = False
    angle_bound: float = 0.2
    workers: int = 1
    out_dir: str = "runs"
    plant: PlantParams = field(default_factory=PlantParams)
    reward: RewardWeights = field(default_factory=lambda: default_weights("balance"))
    ddpg: ddpg.DdpgConfig = field(default_factory=ddpg.DdpgConfig)
    gate: comm_pg.GateConfig = field(default_factory=comm_pg.GateConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    @property
    def law(self) -> str | None:
        return self.approach.split(":", 1)[1] if self.approach.startswith("baseline:") else None


_SECTIONS = {
    "plant": PlantParams,
    "ddpg": ddpg.DdpgConfig,
    "gate": comm_pg.GateConfig,
    "selection": SelectionConfig,
    "baseline": BaselineConfig,
    "sweep": SweepConfig,
}


def lambda_grid(n: int = 25, lo: float = 0.01, hi: float = 100.0) -> np.ndarray:
    return np.logspace(np.log10(lo), np.log10(hi), n)


# ----------------------------------------------------------------- parsing


def _coerce(value, hint, where: str):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _coerce(value, inner, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        (inner, _) = typing.get_args(hint)
        return tuple(_coerce(v, inner, f"{where}[{i}]") for i, v in enumerate(value))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true or false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        if isinstance(value, str):
            # YAML 1.1 reads exponent literals without a dot (1e-3) as strings
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"{where}: expected a number, got {value!r}") from None
        if not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported field type {hint}")


def _build(cls, data: dict, where: str, base: dict | None = None):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in fields(cls)]
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}: unknown key (allowed: {', '.join(names)})")
    kwargs = dict(base or {})
    for key, value in data.items():
        kwargs[key] = _coerce(value, hints[key], f"{where}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _matrix(value, where: str) -> np.ndarray:
    """Square matrix from a nested list, or a diagonal from a flat list or scalar."""
    try:
        M = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected a number or a (nested) list of numbers") from None
    if M.ndim == 0:
        M = M.reshape(1, 1)
    elif M.ndim == 1:
        M = np.diag(M)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or not np.all(np.isfinite(M)):
        raise ConfigError(f"{where}: expected a finite square matrix, got shape {M.shape}")
    return M


def config_from_dict(data: dict | None) -> RunConfig:
    """Fill defaults, reject unknown keys and validate every section."""
    data = dict(data or {})
    top_hints = typing.get_type_hints(RunConfig)
    names = [f.name for f in fields(RunConfig)]
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key (allowed: {', '.join(names)})")

    task = _coerce(data.get("task", "balance"), str, "task")
    if task not in TASKS:
        raise ConfigError(f"task: must be one of {TASKS}, got {task!r}")
    kwargs: dict[str, Any] = {"task": task}
    for name in names:
        if name in _SECTIONS or name in ("task", "reward") or name not in data:
            continue
        kwargs[name] = _coerce(data[name], top_hints[name], name)

    kwargs["plant"] = _build(PlantParams, data.get("plant", {}), "plant", asdict(default_params(task)))
    for name in ("ddpg", "gate", "selection", "baseline", "sweep"):
        kwargs[name] = _build(_SECTIONS[name], data.get(name, {}), name)

    rdata = data.get("reward", {})
    if not isinstance(rdata, dict):
        raise ConfigError(f"reward: expected a mapping, got {rdata!r}")
    allowed = ("Q", "R", "lam", "alive_bonus")
    bad = sorted(set(rdata) - set(allowed))
    if bad:
        raise ConfigError(f"reward.{bad[0]}: unknown key (allowed: {', '.join(allowed)})")
    lam = _coerce(rdata.get("lam", 1.0), float, "reward.lam")
    w = default_weights(task, lam)
    Q = _matrix(rdata["Q"], "reward.Q") if "Q" in rdata else w.Q
    R = _matrix(rdata["R"], "reward.R") if "R" in rdata else w.R
    bonus = _coerce(rdata.get("alive_bonus", w.alive_bonus), float, "reward.alive_bonus")
    try:
        kwargs["reward"] = RewardWeights(Q, R, lam, bonus)
    except ValueError as exc:
        raise ConfigError(f"reward: {exc}") from None

    cfg = RunConfig(**kwargs)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.approach not in APPROACHES:
        raise ConfigError(f"approach: must be one of {APPROACHES}, got {cfg.approach!r}")
    for name in ("episode_length", "eval_episodes", "workers"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name}: must be >= 1")
    if not cfg.seeds:
        raise ConfigError("seeds: at least one seed required")
    if any(s < 0 for s in cfg.seeds) or len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigError("seeds: must be distinct and non-negative")
    if not cfg.angle_bound > 0:
        raise ConfigError("angle_bound: must be positive")
    n_state = make_plant(cfg.task, cfg.plant).n_state
    if cfg.reward.Q.shape != (n_state, n_state):
        raise ConfigError(f"reward.Q: task {cfg.task} needs a {n_state}x{n_state} matrix")
    if cfg.reward.R.shape != (1, 1):
        raise ConfigError("reward.R: expected a 1x1 matrix")
    for name in ("process_var", "measure_var", "init_var"):
        if len(getattr(cfg.plant, name)) != n_state:
            raise ConfigError(f"plant.{name}: task {cfg.task} needs {n_state} entries")
    if cfg.task == "cartpole" and cfg.plant.cart_mass is None:
        raise ConfigError("plant.cart_mass: required for cartpole")


def _plain(value):
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, np.generic):
        return value.item()
    return value


def config_to_dict(cfg: RunConfig) -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, RewardWeights):
            v = {"Q": v.Q, "R": v.R, "lam": v.lam, "alive_bonus": v.alive_bonus}
        elif dataclasses.is_dataclass(v):
            v = asdict(v)
        out[f.name] = _plain(v)
    return out


def dump_config(cfg: RunConfig) -> str:
    """Canonical echo: sorted keys, block style; parses back to the same config."""
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True, default_flow_style=False)


def config_id(cfg: RunConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return config_from_dict(load_config_data(path))


def load_config_data(path) -> dict:
    data = yaml.safe_load(Path(path).read_text())
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("config file must contain a mapping at top level")
    return data


def apply_overrides(data: dict, overrides: Sequence[str]) -> dict:
    """Apply ``dotted.key=value`` overrides (values parsed as YAML) to raw config data."""
    data = json.loads(json.dumps(data))  # deep copy of plain data
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if not all(parts):
            raise ConfigError(f"override {item!r}: empty key")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {p} is not a section")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def with_updates(cfg: RunConfig, **updates) -> RunConfig:
    """Copy of ``cfg`` with dotted-path updates, re-validated (e.g. ``**{"reward.lam": 2.0}``)."""
    data = config_to_dict(cfg)
    for key, value in updates.items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = _plain(value)
    return config_from_dict(data)


def write_effective_config(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "effective_config.yaml"
    atomic_write_text(path, dump_config(cfg))
    return path


# ----------------------------------------------------------------- results


@dataclass
class ResultRow:
    config_id: str
    seed: int
    episode: int  # -1 marks the aggregate row of a seed or grid point
    mean_cost: float
    mean_comm: float
    stable: float  # 0/1 per episode, fraction of stable episodes in aggregates
    wall_time: float
    grid_value: float = math.nan
    status: str = "ok"

    def __post_init__(self):
        if self.status == "ok":
            if not 0.0 <= self.mean_comm <= 1.0:
                raise ValueError(f"communication rate {self.mean_comm} outside [0, 1]")
            if not self.mean_cost >= 0.0:
                raise ValueError(f"cost {self.mean_cost} must be >= 0")


RESULT_COLUMNS = tuple(f.name for f in fields(ResultRow))


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def rows_to_csv(columns: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    text = buf.getvalue()
    if not text.isascii():
        raise ValueError("CSV output must be ASCII")
    return text


def export_summary(rows: Sequence[ResultRow], path) -> Path:
    """Write result rows as CSV, replacing any existing file atomically."""
    text = rows_to_csv(RESULT_COLUMNS, [[getattr(r, c) for c in RESULT_COLUMNS] for r in rows])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(path, text)
    return path


def aggregate(rows: Sequence[ResultRow], cid: str, seed: int, grid_value: float = math.nan) -> ResultRow:
    ok = [r for r in rows if r.status == "ok"]
    if not ok:
        return ResultRow(cid, seed, -1, math.nan, math.nan, math.nan, 0.0, grid_value, "failed")
    return ResultRow(
        cid,
        seed,
        -1,
        float(np.mean([r.mean_cost for r in ok])),
        float(np.mean([r.mean_comm for r in ok])),
        float(np.mean([r.stable for r in ok])),
        float(sum(r.wall_time for r in ok)),
        grid_value,
        "ok" if len(ok) == len(rows) else "partial",
    )


# ----------------------------------------------------------------- building blocks


def build_env(cfg: RunConfig, horizon: int | None = None) -> EtcEnv:
    plant = make_plant(cfg.task, cfg.plant)
    return EtcEnv(plant, cfg.reward, horizon or cfg.episode_length)


def seed_dir(cfg: RunConfig, seed: int, root=None) -> Path:
    return Path(root if root is not None else cfg.out_dir) / f"seed_{seed}"


def _run_meta(cfg: RunConfig, env: EtcEnv) -> dict:
    return {"task": cfg.task, "approach": cfg.approach, "state_dim": env.state_dim, "lam": cfg.reward.lam}


def lqr_controller(cfg: RunConfig) -> comm_pg.FrozenController:
    plant = make_plant(cfg.task, cfg.plant)
    return comm_pg.FrozenController.lqr(baselines.upright_lqr(plant, cfg.reward).K)


def frozen_controller(cfg: RunConfig) -> comm_pg.FrozenController:
    if cfg.controller == "lqr":
        return lqr_controller(cfg)
    directory = Path(cfg.controller)
    sub = directory / "best" if (directory / "best").is_dir() else directory / "checkpoint"
    agent = ddpg.DdpgAgent.load(sub)
    return comm_pg.FrozenController("ddpg_actor_full_comm", actor=agent.actor, plant=make_plant(cfg.task, cfg.plant))


def _log_csv(rows) -> str:
    rows = list(rows)
    if not rows:
        return ""
    cols = list(rows[0])
    return rows_to_csv(cols, [[r[c] for c in cols] for r in rows])


def save_gate(gate: comm_pg.GatePolicy, directory, meta: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(directory / "gate.etcrl", nn.dumps(gate.net))
    manifest = dict(meta, input_scale=gate.input_scale.tolist())
    atomic_write_text(directory / "manifest.txt", json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def load_gate(directory) -> tuple[comm_pg.GatePolicy, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.txt").read_text())
    net = nn.load(directory / "gate.etcrl")
    gate = comm_pg.GatePolicy(net.n_inputs, net.layer_sizes[1:-1], manifest["input_scale"])
    gate.net.set_params(net.theta)
    return gate, manifest


# ----------------------------------------------------------------- training


def train_seed(cfg: RunConfig, seed: int) -> Path:
    """Train one seed and write its checkpoints and training log; returns the seed directory."""
    env = build_env(cfg, cfg.ddpg.horizon)
    out = seed_dir(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    meta = _run_meta(cfg, env)
    if cfg.approach == "joint":
        if cfg.selection.every > 0:
            agent, best_actor, log, checkpoints = ddpg.train_selected(
                env, cfg.ddpg, seed, cfg.selection.every, cfg.selection.val_episodes,
                cfg.episode_length, cfg.angle_bound, cfg.selection.min_stable,
            )
            best = ddpg.DdpgAgent(env.state_dim, env.plant.u_max, cfg.ddpg, seed)
            for name, net in agent.networks().items():
                best.networks()[name].set_params(net.theta)
            best.actor.set_params(best_actor.theta)
            best.steps = agent.steps
            pick = max(range(len(checkpoints)), key=lambda i: checkpoints[i].score(cfg.selection.min_stable))
            best.save(out / "best", dict(meta, selected_after_episodes=checkpoints[pick].episodes))
            atomic_write_text(
                out / "selection.csv",
                rows_to_csv(
                    ["episodes", "steps", "stable_fraction", "comm_rate"],
                    [[c.episodes, c.steps, c.stable_fraction, c.comm_rate] for c in checkpoints],
                ),
            )
        else:
            agent, log = ddpg.train(env, cfg.ddpg, seed)
        agent.save(out / "checkpoint", meta)
    elif cfg.approach == "separated":
        controller = frozen_controller(cfg)
        gate, log = comm_pg.train_gate(env.plant, cfg.reward, controller, cfg.gate, seed)
        save_gate(gate, out / "gate", dict(
            meta,
            gate_config=asdict(cfg.gate),
            controller=cfg.controller,
            controller_sha=hashlib.sha256(controller.fingerprint()).hexdigest()[:16],
            rng={"gate_sample_end": generator_state(stream(seed, "gate_sample"))},
        ))
    else:
        raise ConfigError(f"approach: {cfg.approach} has no training stage")
    atomic_write_text(out / "train_log.csv", _log_csv(log.rows()))
    return out


def _train_job(args):
    data, seed = args
    cfg = config_from_dict(data)
    try:
        return seed, str(train_seed(cfg, seed)), None
    except Exception as exc:  # reported per seed; the other seeds keep running
        return seed, None, f"{type(exc).__name__}: {exc}"


def _map(fn, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def run_training(cfg: RunConfig) -> dict[int, Path]:
    """Train every configured seed; raises :class:`RunFailed` after all seeds ran if any failed."""
    write_effective_config(cfg)
    data = config_to_dict(cfg)
    results = _map(_train_job, [(data, s) for s in cfg.seeds], cfg.workers)
    failures = {f"seed {s}": err for s, _, err in results if err}
    if failures:
        raise RunFailed(failures)
    return {s: Path(p) for s, p, _ in results}


# ----------------------------------------------------------------- evaluation


def eval_policy(cfg: RunConfig, seed: int, checkpoint=None):
    """Deterministic evaluation policy for one seed (no exploration noise)."""
    env = build_env(cfg)
    if cfg.law is not None:
        K = baselines.upright_lqr(env.plant, cfg.reward).K
        return env, baselines.TriggeredLqr(K, cfg.law, cfg.baseline.delta)
    sdir = seed_dir(cfg, seed, checkpoint)
    meta_expect = _run_meta(cfg, env)
    if cfg.approach == "joint":
        sub = sdir / "best" if (sdir / "best").is_dir() else sdir / "checkpoint"
        if not sub.is_dir():
            raise FileNotFoundError(f"no checkpoint for seed {seed} under {sdir}")
        manifest = ddpg.read_manifest(sub)
        if manifest.get("config_hash") != ddpg.config_hash(cfg.ddpg):
            raise ConfigError(f"checkpoint {sub} was trained with a different ddpg config")
        _check_meta(manifest, meta_expect, sub)
        return env, ddpg.DdpgAgent.load(sub)
    gdir = sdir / "gate"
    if not gdir.is_dir():
        raise FileNotFoundError(f"no gate checkpoint for seed {seed} under {sdir}")
    gate, manifest = load_gate(gdir)
    _check_meta(manifest, meta_expect, gdir)
    if manifest.get("gate_config") != _plain(asdict(cfg.gate)):
        raise ConfigError(f"gate checkpoint {gdir} was trained with a different gate config")
    controller = frozen_controller(cfg)
    if hashlib.sha256(controller.fingerprint()).hexdigest()[:16] != manifest.get("controller_sha"):
        raise ConfigError(f"gate checkpoint {gdir} was trained on a different controller")
    return env, comm_pg.GatedController(env.plant, controller, gate, cfg.eval_stochastic_gate)


def _check_meta(manifest: dict, expect: dict, where) -> None:
    for key in ("task", "approach", "state_dim"):
        if manifest.get(key) != expect[key]:
            raise ConfigError(f"checkpoint {where}: {key} is {manifest.get(key)!r}, config has {expect[key]!r}")


def eval_seed(cfg: RunConfig, seed: int, checkpoint=None, grid_value: float = math.nan,
              logs: list | None = None) -> list[ResultRow]:
    """Per-episode rows plus one aggregate row for a trained seed."""
    env, policy = eval_policy(cfg, seed, checkpoint)
    cid = config_id(cfg)
    rows = []
    for e in range(cfg.eval_episodes):
        if isinstance(policy, comm_pg.GatedController) and policy.stochastic:
            policy.rng = stream(seed, "eval_gate", e)
        t0 = time.perf_counter()
        log = run_episode(env, policy, cfg.episode_length, stream(seed, "eval", e))
        check_log_invariants(log, env.weights)
        if logs is not None:
            logs.append(log)
        rows.append(ResultRow(
            cid, seed, e,
            quadratic_cost(log, cfg.reward.Q, cfg.reward.R),
            log.comm_rate,
            float(episode_stable(log, env.plant, cfg.episode_length, cfg.angle_bound)),
            time.perf_counter() - t0,
            grid_value,
        ))
    rows.append(aggregate(rows, cid, seed, grid_value))
    return rows


def run_eval(cfg: RunConfig, checkpoint=None, path=None) -> list[ResultRow]:
    """Evaluate every seed; rows are written to ``path`` (default ``<out_dir>/eval.csv``)."""
    write_effective_config(cfg)
    rows = []
    for seed in cfg.seeds:
        rows.extend(eval_seed(cfg, seed, checkpoint))
    export_summary(rows, path or Path(cfg.out_dir) / "eval.csv")
    return rows


# ----------------------------------------------------------------- sweeps


PARETO_COLUMNS = ("grid_value", "mean_cost", "mean_comm", "stable_fraction", "status")


def _lambda_point(args):
    data, i, lam = args
    cfg = config_from_dict(data)
    cfg = with_updates(cfg, **{"reward.lam": lam, "out_dir": str(Path(cfg.out_dir) / f"lambda_{i:02d}")})
    rows = []
    for seed in cfg.seeds:
        try:
            train_seed(cfg, seed)
            rows.append(eval_seed(cfg, seed, grid_value=lam)[-1])
        except Exception as exc:  # flagged row, the grid keeps going
            rows.append(ResultRow(config_id(cfg), seed, -1, math.nan, math.nan, math.nan, 0.0, lam,
                                  f"failed: {type(exc).__name__}"))
    return rows


def pareto_csv(rows: Sequence[ResultRow]) -> str:
    """(grid value, cost, comm) per grid point, sorted by communication rate."""
    points = {}
    for r in rows:
        if r.episode == -1:
            points.setdefault(r.grid_value, []).append(r)
    table = []
    for g, rs in points.items():
        agg = aggregate(rs, rs[0].config_id, -1, g)
        table.append([g, agg.mean_cost, agg.mean_comm, agg.stable, agg.status])
    table.sort(key=lambda t: (math.isnan(t[2]), t[2], t[0]))
    return rows_to_csv(PARETO_COLUMNS, table)


def run_sweep(cfg: RunConfig, axis: str, grid: Sequence[float] | None = None) -> list[ResultRow]:
    """Train and evaluate per lambda value, or sweep baseline thresholds.

    Writes ``sweep_<axis>.csv`` (one aggregate row per point and seed) and
    ``pareto_<axis>.csv`` into the output directory.
    """
    write_effective_config(cfg)
    out = Path(cfg.out_dir)
    if axis == "lambda":
        if cfg.law is not None:
            raise ConfigError("approach: lambda sweeps need a learning approach")
        grid = list(grid if grid is not None else (cfg.sweep.lambdas or lambda_grid()))
        jobs = [(config_to_dict(cfg), i, float(v)) for i, v in enumerate(grid)]
        rows = [r for point in _map(_lambda_point, jobs, cfg.workers) for r in point]
    elif axis == "delta":
        if cfg.law is None:
            raise ConfigError("approach: delta sweeps need approach baseline:<law>")
        grid = list(grid if grid is not None else (cfg.baseline.deltas or baselines.default_delta_grid(cfg.law, cfg.baseline.n_deltas)))
        rows = delta_rows(cfg, cfg.law, grid)
    else:
        raise ConfigError(f"axis: must be lambda or delta, got {axis!r}")
    export_summary(rows, out / f"sweep_{axis}.csv")
    atomic_write_text(out / f"pareto_{axis}.csv", pareto_csv(rows))
    return rows


def delta_rows(cfg: RunConfig, law: str, deltas: Sequence[float]) -> list[ResultRow]:
    env = build_env(cfg)
    K = baselines.upright_lqr(env.plant, cfg.reward).K
    rows = []
    for seed in cfg.seeds:
        t0 = time.perf_counter()
        sweep = baselines.delta_sweep(env, K, law, deltas, range(cfg.eval_episodes), cfg.episode_length,
                                      seed, cfg.angle_bound)
        dt = (time.perf_counter() - t0) / len(sweep)
        for r in sweep:
            cid = config_id(with_updates(cfg, **{"baseline.delta": r.delta}))
            rows.append(ResultRow(cid, seed, -1, r.mean_cost, r.mean_comm, r.stable_fraction, dt, r.delta))
    return rows


def run_baseline(cfg: RunConfig, laws: Sequence[str] | None = None) -> dict[str, list[baselines.SweepRow]]:
    """Threshold sweeps of the triggered LQR; one ``baseline_<law>.csv`` per law."""
    write_effective_config(cfg)
    laws = list(laws or ([cfg.law] if cfg.law else baselines.LAWS))
    env = build_env(cfg)
    K = baselines.upright_lqr(env.plant, cfg.reward).K
    out = {}
    for law in laws:
        grid = cfg.baseline.deltas or baselines.default_delta_grid(law, cfg.baseline.n_deltas)
        rows = baselines.delta_sweep(env, K, law, grid, range(cfg.eval_episodes), cfg.episode_length,
                                     cfg.seeds[0], cfg.angle_bound)
        atomic_write_text(Path(cfg.out_dir) / f"baseline_{law}.csv", baselines.sweep_csv(rows))
        out[law] = rows
    return out
