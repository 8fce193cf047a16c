"""Robust mean-field actor-critic training loop.

One round is one environment step for every living agent followed by one
critic and one actor update per learning agent and a soft target update.
All randomness in round ``m`` comes from generators seeded with
``(seed, m, purpose, ...)``, so a run resumed from a checkpoint replays
exactly.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import diffcore as dc
from . import gridworld as gw
from . import mfac
from .adversary import AttackConfig, action_label, action_loss, pgd_attack
from .diffcore import ConfigurationError, GradientTape

CONSTANT = "constant"
SINGLE_RAMP = "single-ramp"
REPETITIVE = "repetitive"
SCHEDULE_KINDS = (CONSTANT, SINGLE_RAMP, REPETITIVE)

VARIANTS = ("MFAC", "SA-MFAC", "SA-MFAC3", "RoMFAC1", "RoMFAC")
_ALIASES = {"SA-MFAC³": "SA-MFAC3", "RoMFAC¹": "RoMFAC1"}

SELF_PLAY = "self-play"
SCRIPTED = "scripted"

METRIC_COLUMNS = (
    "round",
    "mu",
    "epsilon",
    "mean_reward_team_a",
    "mean_reward_team_b",
    "critic_loss",
    "actor_loss",
    "action_loss",
)

CHECKPOINT_FORMAT = "romfac-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


# ---------------------------------------------------------------- schedules


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = CONSTANT
    target: float = 0.0
    m_norm: int = 1
    m_adv: int = 1
    c: int = 1
    omega: float = 0.5

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}")
        if self.m_norm < 1 or self.m_adv < 1 or self.c < 1:
            raise ConfigurationError("m_norm, m_adv and c must be >= 1")
        if not 0.0 < self.omega <= 1.0:
            raise ConfigurationError(f"omega must be in (0, 1], got {self.omega}")
        if not math.isfinite(self.target):
            raise ConfigurationError("schedule target must be finite")

    @property
    def total_rounds(self) -> int:
        return self.m_norm + self.c * self.m_adv


def schedule_value(m: int, spec: ScheduleSpec) -> float:
    """Value of a schedule at 1-indexed round ``m``.

    ``repetitive`` is the sawtooth: zero through the warm-up, then in every
    loop of ``m_adv`` rounds a linear climb to the target over the first
    ``omega`` fraction, flat afterwards, dropping back to zero at each loop
    boundary.  ``single-ramp`` climbs once over ``omega`` of all post-warm-up
    rounds and stays at the target.
    """
    if m < 1:
        raise ConfigurationError(f"rounds are 1-indexed, got {m}")
    if spec.kind == CONSTANT:
        return float(spec.target)
    if spec.kind == REPETITIVE:
        width = spec.omega * spec.m_adv
        return min(max(m - spec.m_norm, 0) % spec.m_adv, width) / width * spec.target
    width = spec.omega * spec.c * spec.m_adv
    return min(max(m - spec.m_norm, 0), width) / width * spec.target


def mu_at(m: int, spec: ScheduleSpec) -> float:
    return schedule_value(m, spec)


def epsilon_at(m: int, spec: ScheduleSpec) -> float:
    return schedule_value(m, spec)


def canonical_variant(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in VARIANTS:
        raise ConfigurationError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    return name


def variant_schedules(
    variant: str,
    mu_bar: float,
    eps_bar: float,
    m_norm: int,
    m_adv: int,
    c: int | None = None,
    omega: float = 0.5,
) -> tuple[ScheduleSpec, ScheduleSpec]:
    """(mu schedule, epsilon schedule) for a named training variant.

    Loop counts default to 3 for MFAC (matching the robust variants'
    budget), SA-MFAC3 and RoMFAC, and 1 for SA-MFAC and RoMFAC1.
    """
    variant = canonical_variant(variant)
    if c is None:
        c = 1 if variant in ("SA-MFAC", "RoMFAC1") else 3
    common = dict(m_norm=m_norm, m_adv=m_adv, c=c, omega=omega)
    if variant == "MFAC":
        return ScheduleSpec(CONSTANT, 0.0, **common), ScheduleSpec(CONSTANT, 0.0, **common)
    if variant == "SA-MFAC":
        return ScheduleSpec(CONSTANT, mu_bar, **common), ScheduleSpec(SINGLE_RAMP, eps_bar, **common)
    if variant == "SA-MFAC3":
        return ScheduleSpec(CONSTANT, mu_bar, **common), ScheduleSpec(REPETITIVE, eps_bar, **common)
    # RoMFAC1 is the repetitive schedule run for a single loop
    return ScheduleSpec(REPETITIVE, mu_bar, **common), ScheduleSpec(CONSTANT, eps_bar, **common)


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class TrainerConfig:
    variant: str = "RoMFAC"
    mu_bar: float = 1.0
    eps_bar: float = 0.075
    m_norm: int = 1000
    m_adv: int = 500
    c: int | None = None
    omega: float = 0.5
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    tau_actor: float = 0.01
    tau_critic: float = 0.01
    gamma: float = 0.95
    batch_size: int = 32
    buffer_capacity: int = 4000
    optimizer: str = "sgd"
    hidden: tuple[int, ...] = (64,)
    activation: str = "relu"
    train_attack: AttackConfig = field(default_factory=lambda: AttackConfig(0.075, 3))
    pg_mode: str = "printed"
    # exploration bonus; 0 keeps the plain objective
    entropy_coef: float = 0.0
    opponent: str = SELF_PLAY
    # None: one update per learning agent per round
    updates_per_round: int | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError("gamma must be in [0, 1)")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise ConfigurationError("need 1 <= batch_size <= buffer_capacity")
        for tau in (self.tau_actor, self.tau_critic):
            if not 0.0 <= tau <= 1.0:
                raise ConfigurationError("soft-update rates must be in [0, 1]")
        if self.entropy_coef < 0:
            raise ConfigurationError("entropy_coef must be >= 0")
        if self.mu_bar < 0 or self.eps_bar < 0:
            raise ConfigurationError("mu_bar and eps_bar must be >= 0")
        if self.pg_mode not in mfac.PG_MODES:
            raise ConfigurationError(f"unknown pg_mode {self.pg_mode!r}")
        if self.opponent not in (SELF_PLAY, SCRIPTED):
            raise ConfigurationError(f"unknown opponent mode {self.opponent!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.updates_per_round is not None and self.updates_per_round < 1:
            raise ConfigurationError("updates_per_round must be >= 1")
        self.schedules()

    def schedules(self) -> tuple[ScheduleSpec, ScheduleSpec]:
        return variant_schedules(self.variant, self.mu_bar, self.eps_bar, self.m_norm, self.m_adv, self.c, self.omega)

    @property
    def total_rounds(self) -> int:
        return self.schedules()[0].total_rounds

    @classmethod
    def from_dict(cls, raw: Mapping, attack: Mapping | None = None) -> "TrainerConfig":
        raw = dict(raw)
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown trainer keys: {sorted(unknown)}")
        if attack is not None:
            raw["train_attack"] = attack_from_dict(attack)
        elif isinstance(raw.get("train_attack"), Mapping):
            raw["train_attack"] = attack_from_dict(raw["train_attack"])
        if "hidden" in raw:
            raw["hidden"] = tuple(raw["hidden"])
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out


def attack_from_dict(raw: Mapping) -> AttackConfig:
    raw = dict(raw)
    rename = {"step-size": "step_size", "beta": "step_size"}
    for old, new in rename.items():
        if old in raw:
            raw[new] = raw.pop(old)
    unknown = set(raw) - set(AttackConfig.__dataclass_fields__)
    if unknown:
        raise ConfigurationError(f"unknown attack keys: {sorted(unknown)}")
    try:
        return AttackConfig(**raw)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


# ---------------------------------------------------------------- replay buffer


class ReplayBuffer:
    """Ring buffer of per-agent experience rows tagged with the agent id."""

    def __init__(self, capacity: int, obs_dim: int, n_actions: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.action = np.zeros(capacity, dtype=np.int64)
        self.reward = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.mean = np.zeros((capacity, n_actions))
        self.mean_prev = np.zeros((capacity, n_actions))
        self.done = np.zeros(capacity)
        self.agent = np.full(capacity, -1, dtype=np.int64)
        self.size = 0
        self.cursor = 0

    _FIELDS = ("obs", "action", "reward", "next_obs", "mean", "mean_prev", "done", "agent")

    def __len__(self):
        return self.size

    def add(self, exp: mfac.Experience, agents) -> None:
        agents = np.asarray(agents, dtype=np.int64)
        for row in range(len(exp)):
            i = self.cursor
            self.obs[i] = exp.obs[row]
            self.action[i] = exp.action[row]
            self.reward[i] = exp.reward[row]
            self.next_obs[i] = exp.next_obs[row]
            self.mean[i] = exp.mean[row]
            self.mean_prev[i] = exp.mean_prev[row]
            self.done[i] = exp.done[row]
            self.agent[i] = agents[row]
            self.cursor = (i + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def count(self, agent: int | None = None) -> int:
        if agent is None:
            return self.size
        return int((self.agent[: self.size] == agent).sum())

    def sample(self, k: int, rng: np.random.Generator, agent: int | None = None) -> mfac.Experience | None:
        """``k`` distinct rows (of ``agent`` when given), or None if too few."""
        pool = np.arange(self.size)
        if agent is not None:
            pool = pool[self.agent[: self.size] == agent]
        if len(pool) < k:
            return None
        idx = np.sort(rng.choice(pool, size=k, replace=False))
        return mfac.Experience(
            self.obs[idx],
            self.action[idx],
            self.reward[idx],
            self.next_obs[idx],
            self.mean[idx],
            self.mean_prev[idx],
            self.done[idx],
        )

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}{name}": getattr(self, name) for name in self._FIELDS}
        out[f"{prefix}meta"] = np.array([self.size, self.cursor], dtype=np.int64)
        return out

    def load_arrays(self, prefix: str, arrays) -> None:
        for name in self._FIELDS:
            getattr(self, name)[...] = arrays[f"{prefix}{name}"]
        self.size, self.cursor = (int(v) for v in arrays[f"{prefix}meta"])


# ---------------------------------------------------------------- training


def neighbour_means(state: gw.WorldState, ids: np.ndarray, actions: np.ndarray, n_actions: int) -> np.ndarray:
    """Mean one-hot action of each agent's in-range living teammates.

    ``ids`` must be the living members of one team, ``actions`` theirs.
    """
    if len(ids) == 0:
        return np.zeros((0, n_actions))
    pos = state.pos[ids]
    dist = np.abs(pos[:, None, :] - pos[None, :, :]).max(axis=2)
    adj = (dist <= state.config.view_radius) & ~np.eye(len(ids), dtype=bool)
    onehots = mfac.one_hot(actions, n_actions)
    counts = adj.sum(axis=1)
    sums = adj.astype(np.float64) @ onehots
    out = np.empty((len(ids), n_actions))
    has = counts > 0
    out[has] = sums[has] / counts[has, None]
    out[~has] = 1.0 / n_actions
    return out


def _fmt(x: float) -> str:
    return repr(float(x))


class Trainer:
    """Owns the environment, per-team networks, buffers and optimizers."""

    def __init__(self, env_config: gw.EnvConfig, config: TrainerConfig):
        self.env_config = env_config
        self.config = config
        self.mu_schedule, self.eps_schedule = config.schedules()
        if env_config.scenario == gw.BATTLE and config.opponent == SCRIPTED:
            self.learning_teams: tuple[int, ...] = (0,)
        else:
            self.learning_teams = (0, 1)
        init_rng = np.random.default_rng([config.seed, 0, 99])
        self.spaces = {t: gw.action_space(env_config, t) for t in (0, 1)}
        self.nets: dict[int, mfac.AgentNets] = {}
        self.buffers: dict[int, ReplayBuffer] = {}
        self.actor_opt = {}
        self.critic_opt = {}
        for t in self.learning_teams:
            n_act = self.spaces[t].size
            nets = mfac.AgentNets.create(env_config.obs_dim, n_act, init_rng, config.hidden, config.activation)
            self.nets[t] = nets
            self.buffers[t] = ReplayBuffer(config.buffer_capacity, env_config.obs_dim, n_act)
            self.actor_opt[t] = dc.make_optimizer(config.optimizer, nets.actor.params(), config.lr_actor)
            self.critic_opt[t] = dc.make_optimizer(config.optimizer, nets.critic.params(), config.lr_critic)
        self.round = 0
        self.episode = 0
        self.state = gw.reset(env_config, 0)
        self.mean_prev = self._fresh_means()
        self.episode_return = np.zeros(env_config.n_agents)

    @property
    def total_rounds(self) -> int:
        return self.config.total_rounds

    def _fresh_means(self) -> dict[int, np.ndarray]:
        return {
            t: np.tile(mfac.uniform(self.spaces[t].size), (self.env_config.n_agents, 1)) for t in self.learning_teams
        }

    def _rng(self, m: int, *purpose: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, m, *purpose])

    # -- acting

    def _act(self, m: int) -> tuple[dict[int, int], dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]]]:
        state = self.state
        actions: dict[int, int] = {}
        team_data = {}
        for t in (0, 1):
            ids = state.living(t)
            if len(ids) == 0:
                continue
            if t in self.learning_teams:
                obs = gw.observe_many(state, ids)
                probs = mfac.actor_distribution(self.nets[t], obs, self.mean_prev[t][ids]).data
                acts = mfac.sample_actions(probs, self._rng(m, 0, t))
                team_data[t] = (ids, obs, acts)
                actions.update(zip(ids.tolist(), acts.tolist()))
            else:
                actions.update(gw.scripted_actions(state, ids))
        return actions, team_data

    def _collect(self, m: int) -> np.ndarray:
        actions, team_data = self._act(m)
        state = self.state
        means = {
            t: neighbour_means(state, ids, acts, self.spaces[t].size) for t, (ids, _, acts) in team_data.items()
        }
        result = gw.step(state, actions)
        new = result.state
        outcome = gw.episode_outcome(new)
        terminal = outcome in (gw.Outcome.TEAM_A_WIN, gw.Outcome.TEAM_B_WIN) or (
            outcome == gw.Outcome.DRAW and new.step < new.config.max_steps
        )
        for t, (ids, obs, acts) in team_data.items():
            alive_after = new.alive[ids]
            next_obs = np.zeros_like(obs)
            if alive_after.any():
                next_obs[alive_after] = gw.observe_many(new, ids[alive_after])
            done = (~alive_after | terminal).astype(np.float64)
            exp = mfac.Experience(obs, acts, result.rewards[ids], next_obs, means[t], self.mean_prev[t][ids], done)
            self.buffers[t].add(exp, ids)
            self.mean_prev[t][ids] = means[t]
        self.episode_return += result.rewards
        self.state = new
        return result.rewards

    # -- learning

    def _update_agent(self, m: int, t: int, agent: int, mu: float, eps: float, stats: dict) -> None:
        cfg = self.config
        nets = self.nets[t]
        batch = self.buffers[t].sample(cfg.batch_size, self._rng(m, 1, t, agent), agent)
        if batch is None:
            return
        tape = GradientTape()
        params = tape.parameters(nets.critic)
        closs = mfac.critic_loss(nets, batch, cfg.gamma, params)
        grads = tape.backward(closs)
        self.critic_opt[t].step([grads[p] for p in params])

        acts, weights = mfac.policy_gradient_weights(nets, batch, self._rng(m, 2, t, agent), cfg.pg_mode, cfg.gamma)
        tape = GradientTape()
        params = tape.parameters(nets.actor)
        pg = mfac.policy_gradient_loss(nets, batch, params=params, actions=acts, weights=weights)
        loss = pg
        if mu > 0.0:
            label = action_label(nets, batch.obs, batch.mean_prev)
            attack = cfg.train_attack.with_epsilon(eps)
            adv = pgd_attack(nets, batch.obs, batch.mean_prev, attack, label).perturbed
            aloss = action_loss(nets, adv, batch.mean_prev, label, params)
            loss = dc.add(pg, dc.mul(aloss, mu))
            stats["action_loss"].append(aloss.item())
        if cfg.entropy_coef > 0.0:
            ent = mfac.policy_entropy(nets, batch.obs, batch.mean_prev, params)
            loss = dc.sub(loss, dc.mul(ent, cfg.entropy_coef))
        grads = tape.backward(loss)
        self.actor_opt[t].step([grads[p] for p in params])
        stats["critic_loss"].append(closs.item())
        stats["actor_loss"].append(loss.item())

    def train_round(self) -> dict[str, float]:
        """Run round ``self.round + 1`` and return its metrics row."""
        m = self.round + 1
        mu = mu_at(m, self.mu_schedule)
        eps = epsilon_at(m, self.eps_schedule)
        start_alive = self.state.alive.copy()
        team = self.state.team
        rewards = self._collect(m)
        stats = {"critic_loss": [], "actor_loss": [], "action_loss": []}
        for t in self.learning_teams:
            if len(self.buffers[t]) < self.config.batch_size:
                continue
            members = self.state.team_members(t)
            if self.config.updates_per_round is not None:
                picker = self._rng(m, 3, t)
                members = picker.choice(members, size=self.config.updates_per_round, replace=True)
            for agent in members:
                self._update_agent(m, t, int(agent), mu, eps, stats)
            mfac.soft_update(self.nets[t], self.config.tau_actor, self.config.tau_critic)
        row = {
            "round": m,
            "mu": mu,
            "epsilon": eps,
            "mean_reward_team_a": _masked_mean(rewards, start_alive & (team == 0)),
            "mean_reward_team_b": _masked_mean(rewards, start_alive & (team == 1)),
            "critic_loss": _mean_or_nan(stats["critic_loss"]),
            "actor_loss": _mean_or_nan(stats["actor_loss"]),
            "action_loss": _mean_or_nan(stats["action_loss"]),
        }
        if gw.is_done(self.state):
            self.episode += 1
            self.state = gw.reset(self.env_config, self.episode)
            self.mean_prev = self._fresh_means()
            self.episode_return[:] = 0.0
        self.round = m
        return row

    def run(self, rounds: int | None = None, csv_path=None, checkpoint_path=None, progress=None) -> list[dict]:
        """Train up to ``rounds`` more rounds (default: to the end of the schedule)."""
        end = self.total_rounds if rounds is None else min(self.total_rounds, self.round + rounds)
        rows = []
        writer_fh = None
        try:
            if csv_path is not None:
                fresh = not os.path.exists(csv_path) or os.path.getsize(csv_path) == 0
                writer_fh = open(csv_path, "a", newline="", encoding="utf-8")
                writer = csv.writer(writer_fh, lineterminator="\n")
                if fresh:
                    writer.writerow(METRIC_COLUMNS)
            while self.round < end:
                row = self.train_round()
                rows.append(row)
                if writer_fh is not None:
                    writer.writerow([row["round"]] + [_fmt(row[c]) for c in METRIC_COLUMNS[1:]])
                if progress is not None:
                    progress(row)
        finally:
            if writer_fh is not None:
                writer_fh.close()
        if checkpoint_path is not None:
            self.save(checkpoint_path)
        return rows

    # -- checkpoints

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        arrays = {
            "world_pos": self.state.pos,
            "world_team": self.state.team,
            "world_hp": self.state.hp,
            "world_alive": self.state.alive,
            "episode_return": self.episode_return,
        }
        for t in self.learning_teams:
            (path / f"team{t}.nets").write_bytes(self.nets[t].to_bytes())
            arrays.update(self.buffers[t].state_arrays(f"buffer{t}_"))
            arrays[f"mean_prev{t}"] = self.mean_prev[t]
            for name, opt in (("actor", self.actor_opt[t]), ("critic", self.critic_opt[t])):
                st = opt.state_dict()
                if st["kind"] == "adam":
                    for i, (mm, vv) in enumerate(zip(st["m"], st["v"])):
                        arrays[f"opt{t}_{name}_m{i}"] = mm
                        arrays[f"opt{t}_{name}_v{i}"] = vv
        np.savez(path / "state.npz", **arrays)
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "scenario": self.env_config.scenario,
            "env": self.env_config.to_dict(),
            "trainer": self.config.to_dict(),
            "round": self.round,
            "episode": self.episode,
            "world_step": self.state.step,
            "learning_teams": list(self.learning_teams),
            "architecture": {
                str(t): {"actor": list(self.nets[t].actor.widths), "critic": list(self.nets[t].critic.widths)}
                for t in self.learning_teams
            },
            "optimizer_steps": {
                f"{t}_{name}": getattr(opt, "t", 0)
                for t in self.learning_teams
                for name, opt in (("actor", self.actor_opt[t]), ("critic", self.critic_opt[t]))
            },
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "Trainer":
        path = Path(path)
        manifest = read_manifest(path)
        env_config = gw.EnvConfig.from_dict(manifest["env"])
        config = TrainerConfig.from_dict(manifest["trainer"])
        trainer = cls(env_config, config)
        if list(trainer.learning_teams) != manifest["learning_teams"]:
            raise CheckpointError("checkpoint learning teams do not match configuration")
        with np.load(path / "state.npz") as arrays:
            for t in trainer.learning_teams:
                trainer.nets[t] = load_nets(path, t)
                trainer.actor_opt[t] = dc.make_optimizer(config.optimizer, trainer.nets[t].actor.params(), config.lr_actor)
                trainer.critic_opt[t] = dc.make_optimizer(
                    config.optimizer, trainer.nets[t].critic.params(), config.lr_critic
                )
                trainer.buffers[t].load_arrays(f"buffer{t}_", arrays)
                trainer.mean_prev[t] = arrays[f"mean_prev{t}"].copy()
                for name, opt in (("actor", trainer.actor_opt[t]), ("critic", trainer.critic_opt[t])):
                    if isinstance(opt, dc.Adam):
                        n = len(opt.m)
                        opt.load_state_dict(
                            {
                                "lr": opt.lr,
                                "t": manifest["optimizer_steps"][f"{t}_{name}"],
                                "m": [arrays[f"opt{t}_{name}_m{i}"] for i in range(n)],
                                "v": [arrays[f"opt{t}_{name}_v{i}"] for i in range(n)],
                            }
                        )
            trainer.state = gw.WorldState(
                env_config,
                arrays["world_pos"].copy(),
                arrays["world_team"].copy(),
                arrays["world_hp"].copy(),
                arrays["world_alive"].copy(),
                int(manifest["world_step"]),
                int(manifest["episode"]),
            )
            trainer.episode_return = arrays["episode_return"].copy()
        trainer.round = int(manifest["round"])
        trainer.episode = int(manifest["episode"])
        return trainer


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest in {path}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {manifest.get('version')} != {CHECKPOINT_VERSION}")
    return manifest


def load_nets(path, team: int) -> mfac.AgentNets:
    try:
        return mfac.AgentNets.from_bytes((Path(path) / f"team{team}.nets").read_bytes())
    except (OSError, dc.FormatError) as exc:
        raise CheckpointError(f"cannot load team {team} networks: {exc}") from exc


def _masked_mean(values: np.ndarray, mask: np.ndarray) -> float:
    return float(values[mask].mean()) if mask.any() else 0.0


def _mean_or_nan(values: list[float]) -> float:
    return float(np.mean(values)) if values else float("nan")


def robust_actor_loss(nets: mfac.AgentNets, exp: mfac.Experience, adv_obs, mu: float, rng=None, params=None,
                      mode: str = "printed", gamma: float = 0.95, label=None, actions=None, weights=None):
    """Policy-gradient loss plus ``mu`` times the action loss at ``adv_obs``."""
    if mu < 0:
        raise ConfigurationError("mu must be >= 0")
    pg = mfac.policy_gradient_loss(nets, exp, rng, params, mode, gamma, actions, weights)
    if label is None:
        label = action_label(nets, exp.obs, exp.mean_prev)
    aloss = action_loss(nets, adv_obs, exp.mean_prev, label, params)
    return dc.add(pg, dc.mul(aloss, mu))
