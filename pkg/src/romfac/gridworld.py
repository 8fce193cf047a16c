"""Seeded grid battle and pursuit scenarios.

Agents ``0 .. n_a-1`` form team 0 (battle team A, or the pursuit
predators); the rest form team 1 (team B, or the prey).  Positions are
``(x, y)`` with ``0 <= x < width`` and ``0 <= y < height``.

Per step, every move is applied first in ascending agent id, each against
the occupancy left by the previous ones, so when two agents contend for a
cell the lower id wins.  Attacks are then resolved simultaneously against
the post-move positions: every attacker strikes whatever occupied the
target cell before any attack landed, and kills take effect afterwards.
"""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from . import kernels
from ._kernels_py import N_CHANNELS

BATTLE = "battle"
PURSUIT = "pursuit"

DIRECTIONS_4 = ((0, -1), (0, 1), (-1, 0), (1, 0))
DIRECTIONS_8 = DIRECTIONS_4 + ((-1, -1), (1, -1), (-1, 1), (1, 1))


class GridworldError(Exception):
    pass


class ConfigurationError(GridworldError, ValueError):
    pass


class QueryError(GridworldError, LookupError):
    pass


class Outcome(enum.Enum):
    TEAM_A_WIN = "team-A-win"
    TEAM_B_WIN = "team-B-win"
    DRAW = "draw"
    ONGOING = "ongoing"
    NOT_APPLICABLE = "not-applicable"


@dataclass(frozen=True)
class RewardTable:
    step: float = 0.005
    attack_hit: float = 0.2
    kill: float = 5.0
    attack_empty: float = -0.1
    attacked: float = -0.1
    predator_attack: float = 1.0
    prey_attacked: float = -0.1
    pursuit_attack_empty: float = 0.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not np.isfinite(value):
                raise ConfigurationError(f"reward {name} is not finite")


@dataclass(frozen=True)
class EnvConfig:
    scenario: str = BATTLE
    width: int = 10
    height: int = 10
    team_sizes: tuple[int, int] = (4, 4)
    view_radius: int = 2
    max_steps: int = 100
    rewards: RewardTable = field(default_factory=RewardTable)
    seed: int = 0
    hp: int = 10
    damage: int = 2
    directions: int = 4
    # battle teams start within this many columns of their own edge
    start_columns: int = 3

    def __post_init__(self):
        object.__setattr__(self, "team_sizes", tuple(int(t) for t in self.team_sizes))
        if self.scenario not in (BATTLE, PURSUIT):
            raise ConfigurationError(f"unknown scenario {self.scenario!r}")
        if self.width <= 0 or self.height <= 0:
            raise ConfigurationError("grid dimensions must be positive")
        if len(self.team_sizes) != 2 or min(self.team_sizes) <= 0:
            raise ConfigurationError("two positive team sizes required")
        if self.view_radius < 1:
            raise ConfigurationError("view radius must be at least 1")
        if self.max_steps <= 0 or self.hp <= 0 or self.damage <= 0:
            raise ConfigurationError("max_steps, hp and damage must be positive")
        if self.directions not in (4, 8):
            raise ConfigurationError("directions must be 4 or 8")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")
        if sum(self.team_sizes) > self.width * self.height:
            raise ConfigurationError("agents do not fit on the grid")

    @property
    def n_agents(self) -> int:
        return sum(self.team_sizes)

    @property
    def obs_dim(self) -> int:
        side = 2 * self.view_radius + 1
        return N_CHANNELS * side * side + 3

    @classmethod
    def from_dict(cls, raw: Mapping) -> "EnvConfig":
        raw = dict(raw)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown env keys: {sorted(unknown)}")
        if "rewards" in raw:
            rewards = dict(raw["rewards"] or {})
            bad = set(rewards) - set(RewardTable.__dataclass_fields__)
            if bad:
                raise ConfigurationError(f"unknown reward keys: {sorted(bad)}")
            raw["rewards"] = RewardTable(**{k: float(v) for k, v in rewards.items()})
        if "team_sizes" in raw:
            raw["team_sizes"] = tuple(raw["team_sizes"])
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    def to_dict(self) -> dict:
        out = asdict(self)
        out["team_sizes"] = list(self.team_sizes)
        return out


@dataclass(frozen=True)
class ActionSpace:
    directions: tuple[tuple[int, int], ...]
    can_attack: bool

    @property
    def size(self) -> int:
        return 1 + len(self.directions) * (2 if self.can_attack else 1)

    def decode(self, action: int) -> tuple[str, tuple[int, int] | None]:
        d = len(self.directions)
        if action == 0 or action < 0 or action >= self.size:
            return "noop", None
        if action <= d:
            return "move", self.directions[action - 1]
        return "attack", self.directions[action - 1 - d]

    def move(self, direction: int) -> int:
        return 1 + direction

    def attack(self, direction: int) -> int:
        return 1 + len(self.directions) + direction


def action_space(config: EnvConfig, team: int) -> ActionSpace:
    dirs = DIRECTIONS_4 if config.directions == 4 else DIRECTIONS_8
    can_attack = not (config.scenario == PURSUIT and team == 1)
    return ActionSpace(dirs, can_attack)


@dataclass
class WorldState:
    config: EnvConfig
    pos: np.ndarray  # (n, 2) int64, (x, y)
    team: np.ndarray  # (n,) int64
    hp: np.ndarray  # (n,) int64
    alive: np.ndarray  # (n,) bool
    step: int = 0
    episode: int = 0

    def copy(self) -> "WorldState":
        return replace(
            self,
            pos=self.pos.copy(),
            team=self.team.copy(),
            hp=self.hp.copy(),
            alive=self.alive.copy(),
        )

    @property
    def n_agents(self) -> int:
        return len(self.team)

    def living(self, team: int | None = None) -> np.ndarray:
        mask = self.alive if team is None else self.alive & (self.team == team)
        return np.flatnonzero(mask)

    def team_members(self, team: int) -> np.ndarray:
        return np.flatnonzero(self.team == team)

    def occupancy(self) -> np.ndarray:
        occ = np.zeros((self.config.height, self.config.width), dtype=np.int64)
        ids = self.living()
        occ[self.pos[ids, 1], self.pos[ids, 0]] = ids + 1
        return occ

    def to_dict(self) -> dict:
        return {
            "pos": self.pos.tolist(),
            "team": self.team.tolist(),
            "hp": self.hp.tolist(),
            "alive": self.alive.tolist(),
            "step": self.step,
            "episode": self.episode,
        }

    @classmethod
    def from_dict(cls, config: EnvConfig, raw: Mapping) -> "WorldState":
        return cls(
            config,
            np.asarray(raw["pos"], dtype=np.int64).reshape(-1, 2),
            np.asarray(raw["team"], dtype=np.int64),
            np.asarray(raw["hp"], dtype=np.int64),
            np.asarray(raw["alive"], dtype=bool),
            int(raw["step"]),
            int(raw["episode"]),
        )

    def same_as(self, other: "WorldState") -> bool:
        return (
            self.step == other.step
            and self.episode == other.episode
            and np.array_equal(self.pos, other.pos)
            and np.array_equal(self.team, other.team)
            and np.array_equal(self.hp, other.hp)
            and np.array_equal(self.alive, other.alive)
        )


class Event(NamedTuple):
    step: int
    agent: int
    event: str
    reward: float


class StepResult(NamedTuple):
    state: WorldState
    rewards: np.ndarray
    events: list[Event]


def reset(config: EnvConfig, episode: int = 0) -> WorldState:
    """Seeded initial layout for ``episode``.

    Battle: team A is placed uniformly in the ``start_columns`` leftmost
    columns and team B at the horizontal mirror image of those cells (when
    the teams differ in size, team B is sampled independently on its
    side).  Pursuit: everyone is placed uniformly over the whole grid.
    """
    rng = np.random.default_rng([config.seed, episode])
    n_a, n_b = config.team_sizes
    w, h = config.width, config.height
    team = np.array([0] * n_a + [1] * n_b, dtype=np.int64)
    if config.scenario == BATTLE:
        cols = min(config.start_columns, w // 2)
        if cols < 1 or max(n_a, n_b) > cols * h:
            raise ConfigurationError("battle teams do not fit in their starting columns")
        cells = np.array([(x, y) for y in range(h) for x in range(cols)], dtype=np.int64)
        a = cells[rng.choice(len(cells), n_a, replace=False)]
        if n_a == n_b:
            b = a.copy()
        else:
            b = cells[rng.choice(len(cells), n_b, replace=False)]
        b[:, 0] = w - 1 - b[:, 0]
        pos = np.concatenate([a, b])
    else:
        flat = rng.choice(w * h, n_a + n_b, replace=False)
        pos = np.stack([flat % w, flat // w], axis=1).astype(np.int64)
    hp = np.full(n_a + n_b, config.hp, dtype=np.int64)
    return WorldState(config, pos, team, hp, np.ones(n_a + n_b, dtype=bool), 0, episode)


def observe_many(state: WorldState, agents: Sequence[int]) -> np.ndarray:
    agents = np.asarray(agents, dtype=np.int64)
    if agents.size and not state.alive[agents].all():
        raise QueryError(f"cannot observe dead agents {agents[~state.alive[agents]].tolist()}")
    return kernels.encode_observations(
        state.occupancy(),
        state.team,
        state.hp.astype(np.float64),
        state.pos,
        agents,
        state.config.view_radius,
        float(state.config.hp),
    )


def observe(state: WorldState, agent: int) -> np.ndarray:
    return observe_many(state, [agent])[0]


def neighbors(state: WorldState, agent: int) -> frozenset[int]:
    """Living teammates within Chebyshev distance ``view_radius``."""
    if not state.alive[agent]:
        raise QueryError(f"agent {agent} is dead")
    mates = state.living(int(state.team[agent]))
    dist = np.abs(state.pos[mates] - state.pos[agent]).max(axis=1)
    keep = (dist <= state.config.view_radius) & (mates != agent)
    return frozenset(int(m) for m in mates[keep])


def _in_bounds(config: EnvConfig, x: int, y: int) -> bool:
    return 0 <= x < config.width and 0 <= y < config.height


def step(state: WorldState, joint_action: Mapping[int, int] | Sequence[int]) -> StepResult:
    config = state.config
    table = config.rewards
    battle = config.scenario == BATTLE
    living = state.living()
    if isinstance(joint_action, Mapping):
        actions = {int(k): int(v) for k, v in joint_action.items()}
    else:
        actions = {i: int(joint_action[i]) for i in living}
    missing = [int(i) for i in living if int(i) not in actions]
    if missing:
        raise ValueError(f"no action for living agents {missing}")

    new = state.copy()
    t = state.step
    events: list[Event] = []
    if battle and table.step != 0.0:
        events.extend(Event(t, int(i), "step", table.step) for i in living)

    spaces = (action_space(config, 0), action_space(config, 1))
    occ = new.occupancy()
    for i in living:
        kind, d = spaces[new.team[i]].decode(actions[int(i)])
        if kind != "move":
            continue
        x, y = new.pos[i]
        tx, ty = x + d[0], y + d[1]
        if _in_bounds(config, tx, ty) and occ[ty, tx] == 0:
            occ[y, x] = 0
            occ[ty, tx] = i + 1
            new.pos[i] = (tx, ty)

    killed = np.zeros(new.n_agents, dtype=bool)
    for i in living:
        kind, d = spaces[new.team[i]].decode(actions[int(i)])
        if kind != "attack":
            continue
        tx, ty = new.pos[i, 0] + d[0], new.pos[i, 1] + d[1]
        victim = occ[ty, tx] - 1 if _in_bounds(config, tx, ty) else -1
        hostile = victim >= 0 and new.team[victim] != new.team[i]
        if not battle:
            if hostile:
                events.append(Event(t, int(i), "predator-attack", table.predator_attack))
                events.append(Event(t, int(victim), "prey-attacked", table.prey_attacked))
            else:
                events.append(Event(t, int(i), "attack-empty", table.pursuit_attack_empty))
            continue
        if not hostile:
            events.append(Event(t, int(i), "attack-empty", table.attack_empty))
            continue
        new.hp[victim] -= config.damage
        if new.hp[victim] <= 0 and not killed[victim]:
            killed[victim] = True
            events.append(Event(t, int(i), "kill", table.kill))
            events.append(Event(t, int(victim), "killed", table.attacked))
        else:
            events.append(Event(t, int(i), "attack-hit", table.attack_hit))
            events.append(Event(t, int(victim), "attacked", table.attacked))
    new.alive &= ~killed
    new.step = t + 1

    rewards = np.zeros(new.n_agents)
    for ev in events:
        rewards[ev.agent] += ev.reward
    return StepResult(new, rewards, events)


def episode_outcome(state: WorldState) -> Outcome:
    """Battle result; pursuit episodes have no winner."""
    if state.config.scenario != BATTLE:
        return Outcome.NOT_APPLICABLE
    a_alive = bool(state.living(0).size)
    b_alive = bool(state.living(1).size)
    if not a_alive and not b_alive:
        return Outcome.DRAW
    if not b_alive:
        return Outcome.TEAM_A_WIN
    if not a_alive:
        return Outcome.TEAM_B_WIN
    if state.step >= state.config.max_steps:
        return Outcome.DRAW
    return Outcome.ONGOING


def is_done(state: WorldState) -> bool:
    if state.step >= state.config.max_steps:
        return True
    return episode_outcome(state) not in (Outcome.ONGOING, Outcome.NOT_APPLICABLE)


def replay_rewards(n_agents: int, events: Iterable[Event]) -> np.ndarray:
    totals = np.zeros(n_agents)
    for ev in events:
        totals[ev.agent] += ev.reward
    return totals


def write_event_log(events: Iterable[Event], path) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for ev in events:
            fh.write(json.dumps(ev._asdict()) + "\n")


def read_event_log(path) -> list[Event]:
    with open(path, encoding="utf-8") as fh:
        return [Event(**json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------- scripted agents


def _nearest(state: WorldState, agent: int, candidates: np.ndarray) -> int | None:
    if candidates.size == 0:
        return None
    dist = np.abs(state.pos[candidates] - state.pos[agent]).sum(axis=1)
    return int(candidates[int(np.argmin(dist))])


def scripted_actions(state: WorldState, agents: Iterable[int]) -> dict[int, int]:
    """Greedy heuristic actions.

    Attackers strike an adjacent enemy (first direction in table order),
    otherwise step toward the nearest enemy along the axis with the larger
    gap.  Pursuit prey step away from the nearest predator along the axis
    with the smaller gap, preferring a free in-bounds cell.
    """
    config = state.config
    occ = state.occupancy()
    out = {}
    for i in agents:
        i = int(i)
        my_team = int(state.team[i])
        space = action_space(config, my_team)
        enemies = state.living(1 - my_team)
        x, y = state.pos[i]
        if space.can_attack:
            choice = None
            for k, (dx, dy) in enumerate(space.directions):
                tx, ty = x + dx, y + dy
                if _in_bounds(config, tx, ty):
                    other = occ[ty, tx] - 1
                    if other >= 0 and state.team[other] != my_team:
                        choice = space.attack(k)
                        break
            if choice is None:
                target = _nearest(state, i, enemies)
                choice = 0 if target is None else _approach(space, state.pos[i], state.pos[target])
            out[i] = choice
        else:
            threat = _nearest(state, i, enemies)
            out[i] = 0 if threat is None else _flee(space, config, occ, state.pos[i], state.pos[threat])
    return out


def _approach(space: ActionSpace, me, target) -> int:
    gap = target - me
    if gap[0] == 0 and gap[1] == 0:
        return 0
    step = (int(np.sign(gap[0])), 0) if abs(gap[0]) >= abs(gap[1]) else (0, int(np.sign(gap[1])))
    return space.move(space.directions.index(step))


def _flee(space: ActionSpace, config: EnvConfig, occ, me, threat) -> int:
    gap = me - threat
    options = []
    for k, (dx, dy) in enumerate(space.directions):
        tx, ty = me[0] + dx, me[1] + dy
        if not _in_bounds(config, tx, ty) or occ[ty, tx] != 0:
            continue
        gain = abs(gap[0] + dx) + abs(gap[1] + dy) - (abs(gap[0]) + abs(gap[1]))
        options.append((-gain, k))
    if not options:
        return 0
    gain, k = min(options)
    return space.move(k) if gain < 0 else 0
