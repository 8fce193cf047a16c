"""Finite state-adversarial stochastic games.

An adversary against agent ``j`` substitutes the state agent ``j``
perceives: at true state ``s`` the agent acts on ``v_j(s)``, chosen from the
admissible set ``B_j(s)`` (which always contains ``s``).  The environment
itself is unaffected.  The first ``n_attacked`` agents are attackable.

Joint actions are flattened in C order (last agent fastest).  Rewards are
stored as ``(N, S, J, S)`` and transitions as ``(S, J, S)``.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import kernels
from .diffcore import ConfigurationError, NumericError

TRANSITION_TOL = 1e-12
ITERATION_TOL = 1e-12
MAX_ITERATIONS = 1_000_000
ENUMERATION_LIMIT = 1_000_000
CERTIFICATE_TOL = 1e-9
EQUILIBRIUM_TOL = 1e-9


class SasgError(Exception):
    pass


class GameError(SasgError, ValueError):
    pass


class ScanTooLarge(SasgError):
    def __init__(self, size: int, limit: int):
        super().__init__(f"enumeration needs {size} deterministic profiles, limit is {limit}")
        self.size = size
        self.limit = limit


# ---------------------------------------------------------------- types


@dataclass
class TabularSaSG:
    n_actions: tuple[int, ...]
    rewards: np.ndarray
    transitions: np.ndarray
    admissible: tuple[tuple[tuple[int, ...], ...], ...]
    gamma: float
    n_attacked: int | None = None
    name: str = ""

    def __post_init__(self):
        self.n_actions = tuple(int(a) for a in self.n_actions)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.admissible = tuple(tuple(tuple(sorted({int(b) for b in bs})) for bs in agent) for agent in self.admissible)
        if self.n_attacked is None:
            self.n_attacked = self.n_agents
        self.validate()

    @property
    def n_agents(self) -> int:
        return len(self.n_actions)

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_joint(self) -> int:
        return math.prod(self.n_actions)

    @property
    def attacked(self) -> range:
        return range(self.n_attacked)

    def validate(self) -> None:
        n, s, jn = self.n_agents, self.n_states, self.n_joint
        if n < 1 or min(self.n_actions) < 1:
            raise GameError("need at least one agent with at least one action")
        if not 0.0 <= self.gamma < 1.0:
            raise GameError(f"gamma must be in [0, 1), got {self.gamma}")
        if not 0 <= self.n_attacked <= n:
            raise GameError(f"attacked count {self.n_attacked} not in [0, {n}]")
        if self.transitions.shape != (s, jn, s):
            raise GameError(f"transitions have shape {self.transitions.shape}, expected {(s, jn, s)}")
        if self.rewards.shape != (n, s, jn, s):
            raise GameError(f"rewards have shape {self.rewards.shape}, expected {(n, s, jn, s)}")
        if not np.isfinite(self.rewards).all():
            raise GameError("rewards must be finite")
        if (self.transitions < 0).any() or not np.isfinite(self.transitions).all():
            raise GameError("transition probabilities must be finite and non-negative")
        sums = self.transitions.sum(axis=2)
        bad = np.argwhere(np.abs(sums - 1.0) > TRANSITION_TOL)
        if len(bad):
            st, a = bad[0]
            raise GameError(f"p(.|s={st}, a={a}) sums to {sums[st, a]!r}, not 1")
        if len(self.admissible) != n:
            raise GameError("one admissible-set table per agent required")
        for j, table in enumerate(self.admissible):
            if len(table) != s:
                raise GameError(f"agent {j} admissible table has {len(table)} rows, expected {s}")
            for st, bs in enumerate(table):
                if st not in bs:
                    raise GameError(f"B_{j}({st}) must contain {st}")
                if bs[0] < 0 or bs[-1] >= s:
                    raise GameError(f"B_{j}({st}) contains an unknown state")

    def candidates(self, j: int, s: int) -> tuple[int, ...]:
        """States agent ``j`` may be made to perceive at ``s``."""
        return self.admissible[j][s] if j < self.n_attacked else (s,)

    def joint_index(self, actions: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(int(a) for a in actions), self.n_actions))

    def max_abs_reward(self, j: int) -> float:
        return float(np.abs(self.rewards[j]).max())

    def expected_rewards(self) -> np.ndarray:
        """``(N, S, J)``: one-step expected reward for each joint action."""
        return np.einsum("sat,nsat->nsa", self.transitions, self.rewards)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_actions": list(self.n_actions),
            "gamma": self.gamma,
            "n_attacked": self.n_attacked,
            "admissible": [[list(bs) for bs in table] for table in self.admissible],
            "rewards": self.rewards.tolist(),
            "transitions": self.transitions.tolist(),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "TabularSaSG":
        try:
            return cls(
                raw["n_actions"],
                raw["rewards"],
                raw["transitions"],
                raw["admissible"],
                float(raw["gamma"]),
                raw.get("n_attacked"),
                raw.get("name", ""),
            )
        except (KeyError, TypeError) as exc:
            raise GameError(f"malformed game description: {exc}") from exc


@dataclass
class TabularPolicy:
    """Per agent, a ``(S, A_j)`` table of action distributions over perceived states."""

    tables: tuple[np.ndarray, ...]

    def __post_init__(self):
        self.tables = tuple(np.asarray(t, dtype=np.float64) for t in self.tables)
        for j, t in enumerate(self.tables):
            if t.ndim != 2 or (t < 0).any() or np.abs(t.sum(axis=1) - 1.0).max() > 1e-9:
                raise GameError(f"policy table of agent {j} rows must be distributions")

    def check(self, game: TabularSaSG) -> None:
        if len(self.tables) != game.n_agents:
            raise GameError("policy agent count does not match the game")
        for j, t in enumerate(self.tables):
            if t.shape != (game.n_states, game.n_actions[j]):
                raise GameError(f"policy table {j} has shape {t.shape}")

    def padded(self) -> np.ndarray:
        width = max(t.shape[1] for t in self.tables)
        out = np.zeros((len(self.tables), self.tables[0].shape[0], width))
        for j, t in enumerate(self.tables):
            out[j, :, : t.shape[1]] = t
        return out

    @classmethod
    def deterministic(cls, game: TabularSaSG, choices: Sequence[Sequence[int]]) -> "TabularPolicy":
        return cls(tuple(np.eye(game.n_actions[j])[np.asarray(c, dtype=np.int64)] for j, c in enumerate(choices)))

    @classmethod
    def uniform(cls, game: TabularSaSG) -> "TabularPolicy":
        return cls(tuple(np.full((game.n_states, a), 1.0 / a) for a in game.n_actions))

    def to_dict(self) -> list:
        return [t.tolist() for t in self.tables]


@dataclass
class Perturbation:
    """``maps[j, s]``: the state agent ``j`` perceives at true state ``s``."""

    maps: np.ndarray

    def __post_init__(self):
        self.maps = np.array(self.maps, dtype=np.int64)

    @classmethod
    def identity(cls, game: TabularSaSG) -> "Perturbation":
        return cls(np.tile(np.arange(game.n_states), (game.n_agents, 1)))

    def check(self, game: TabularSaSG) -> None:
        if self.maps.shape != (game.n_agents, game.n_states):
            raise GameError(f"perturbation has shape {self.maps.shape}")
        for j in range(game.n_agents):
            for s in range(game.n_states):
                if int(self.maps[j, s]) not in game.candidates(j, s):
                    raise GameError(f"v_{j}({s}) = {self.maps[j, s]} is not admissible")

    def with_agent(self, j: int, row) -> "Perturbation":
        maps = self.maps.copy()
        maps[j] = row
        return Perturbation(maps)

    def without(self, j: int) -> "Perturbation":
        """Same maps with agent ``j`` seeing the clean state."""
        return self.with_agent(j, np.arange(self.maps.shape[1]))

    def key(self) -> bytes:
        return self.maps.tobytes()

    def __eq__(self, other):
        return isinstance(other, Perturbation) and np.array_equal(self.maps, other.maps)


# ---------------------------------------------------------------- evaluation


def _joint_from_perceived(pi: TabularPolicy, perceived: Sequence[int]) -> np.ndarray:
    dists = [pi.tables[k][int(perceived[k])] for k in range(len(pi.tables))]
    return reduce(np.multiply.outer, dists).reshape(-1)


def joint_perturbed_policy(pi: TabularPolicy, v: Perturbation, s: int) -> np.ndarray:
    """Distribution over flattened joint actions at true state ``s``."""
    return _joint_from_perceived(pi, v.maps[:, s])


def joint_policy_matrix(game: TabularSaSG, pi: TabularPolicy, v: Perturbation) -> np.ndarray:
    """``(S, J)`` matrix of joint-action probabilities."""
    return np.stack([joint_perturbed_policy(pi, v, s) for s in range(game.n_states)])


def _prepare(game: TabularSaSG, pi: TabularPolicy, v: Perturbation | None) -> Perturbation:
    pi.check(game)
    if v is None:
        return Perturbation.identity(game)
    v.check(game)
    return v


def policy_value(
    game: TabularSaSG, pi: TabularPolicy, v: Perturbation | None = None, cross_check: bool = True
) -> np.ndarray:
    """``(N, S)`` values of the perturbed joint policy, by direct linear solve.

    With ``cross_check`` the result is compared against value iteration and
    a disagreement beyond 1e-10 (relative to the value scale) raises.
    """
    v = _prepare(game, pi, v)
    jp = joint_policy_matrix(game, pi, v)
    p = np.einsum("sa,sat->st", jp, game.transitions)
    r = np.einsum("sa,nsa->ns", jp, game.expected_rewards())
    system = np.eye(game.n_states) - game.gamma * p
    try:
        values = np.linalg.solve(system, r.T).T
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular policy-evaluation system: {exc}") from exc
    if cross_check:
        iterated = _iterate_values(p, r, game.gamma)
        scale = 1.0 + float(np.abs(values).max())
        if float(np.abs(values - iterated).max()) > 1e-10 * scale:
            raise NumericError("linear solve and value iteration disagree")
    return values


def _iterate_values(p: np.ndarray, r: np.ndarray, gamma: float, tol: float = 1e-12) -> np.ndarray:
    """Fixed-policy value iteration; the result is within ``tol * (1 + |V|)`` of the fixed point."""
    if gamma == 0.0:
        return r.copy()
    values = np.zeros_like(r)
    for _ in range(MAX_ITERATIONS):
        new = r + gamma * values @ p.T
        delta = float(np.abs(new - values).max())
        values = new
        # remaining error is at most gamma / (1 - gamma) * delta
        if gamma * delta <= tol * (1.0 - gamma) * (1.0 + float(np.abs(values).max())):
            return values
    raise NumericError("value iteration did not converge")


def value_iteration(game: TabularSaSG, pi: TabularPolicy, v: Perturbation | None = None, steps: int | None = None):
    """Plain iteration of the fixed-policy Bellman equation from zero."""
    v = _prepare(game, pi, v)
    jp = joint_policy_matrix(game, pi, v)
    p = np.einsum("sa,sat->st", jp, game.transitions)
    r = np.einsum("sa,nsa->ns", jp, game.expected_rewards())
    if steps is None:
        return _iterate_values(p, r, game.gamma)
    values = np.zeros_like(r)
    for _ in range(steps):
        values = r + game.gamma * values @ p.T
    return values


def action_value(
    game: TabularSaSG,
    pi: TabularPolicy,
    v: Perturbation | None,
    s: int,
    joint_action,
    j: int,
    values: np.ndarray | None = None,
) -> float:
    """``sum_s' p(s'|s,a) (R_j(s,a,s') + gamma V_j(s'))``."""
    if values is None:
        values = policy_value(game, pi, v)
    a = joint_action if np.isscalar(joint_action) else game.joint_index(joint_action)
    probs = game.transitions[s, a]
    return float(probs @ (game.rewards[j, s, a] + game.gamma * values[j]))


# ---------------------------------------------------------------- adversaries


class _Backup:
    """Inputs to the minimizing backup for one agent, prepared once."""

    def __init__(self, game: TabularSaSG, pi: TabularPolicy, j: int, others: Perturbation):
        pi.check(game)
        cands = [game.candidates(j, s) for s in range(game.n_states)]
        self.ptr = np.zeros(game.n_states + 1, dtype=np.int64)
        self.ptr[1:] = np.cumsum([len(c) for c in cands])
        self.cand = np.array([b for c in cands for b in c], dtype=np.int64)
        self.reward = game.expected_rewards()[j]
        self.transitions = game.transitions
        self.gamma = game.gamma
        self.policy = np.ascontiguousarray(pi.padded())
        self.n_actions = np.asarray(game.n_actions, dtype=np.int64)
        self.perceived = np.ascontiguousarray(others.maps, dtype=np.int64)
        self.j = int(j)

    def __call__(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        q = np.ascontiguousarray(self.reward + self.gamma * (self.transitions @ values))
        return kernels.adversarial_backup(q, self.policy, self.n_actions, self.perceived, self.cand, self.ptr, self.j)


def bellman_step(
    game: TabularSaSG, pi: TabularPolicy, j: int, others: Perturbation, values: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """One minimizing backup for agent ``j``; returns (new values, argmin states).

    ``others`` fixes every other agent's perceived state; its row ``j`` is
    ignored.  Ties go to the lowest state index.
    """
    return _Backup(game, pi, j, others)(np.asarray(values, dtype=np.float64))


def iterate_bellman(
    game: TabularSaSG, pi: TabularPolicy, j: int, others: Perturbation, start=None, tol: float = ITERATION_TOL
) -> tuple[np.ndarray, np.ndarray, int]:
    """Iterate the backup until successive values differ by less than ``tol``."""
    backup = _Backup(game, pi, j, others)
    values = np.zeros(game.n_states) if start is None else np.array(start, dtype=np.float64)
    for k in range(1, MAX_ITERATIONS + 1):
        new, argmin = backup(values)
        delta = float(np.abs(new - values).max())
        values = new
        if delta < tol:
            return values, argmin, k
    raise NumericError(f"Bellman iteration exceeded {MAX_ITERATIONS} steps")


def optimal_adversary(
    game: TabularSaSG, pi: TabularPolicy, j: int, others: Perturbation | None = None
) -> tuple[Perturbation, np.ndarray]:
    """Agent ``j``'s value-minimizing map given the others, and the fixed-point value."""
    others = _prepare(game, pi, others)
    values, argmin, _ = iterate_bellman(game, pi, j, others)
    return others.with_agent(j, argmin), values


def _maps_for(game: TabularSaSG, j: int) -> Iterator[np.ndarray]:
    for combo in itertools.product(*(game.candidates(j, s) for s in range(game.n_states))):
        yield np.array(combo, dtype=np.int64)


def exhaustive_adversary(
    game: TabularSaSG, pi: TabularPolicy, j: int, others: Perturbation | None = None
) -> tuple[Perturbation, np.ndarray]:
    """Brute force over every deterministic map for agent ``j``.

    Returns the pointwise minimum of agent ``j``'s value over all maps and
    the first map (enumeration order) attaining the smallest value sum.
    """
    others = _prepare(game, pi, others)
    best_map, best_sum = None, math.inf
    pointwise = np.full(game.n_states, math.inf)
    for row in _maps_for(game, j):
        cand = others.with_agent(j, row)
        vals = policy_value(game, pi, cand, cross_check=False)[j]
        pointwise = np.minimum(pointwise, vals)
        if vals.sum() < best_sum - 1e-15:
            best_map, best_sum = cand, float(vals.sum())
    return best_map, pointwise


@dataclass
class JointAdversary:
    status: str  # "converged", "exhaustive" or "undecided"
    perturbation: Perturbation | None
    rounds: int
    values: np.ndarray | None = None

    @property
    def decided(self) -> bool:
        return self.perturbation is not None


def _is_simultaneous_minimizer(game: TabularSaSG, pi: TabularPolicy, v: Perturbation, tol: float = 1e-10) -> bool:
    values = policy_value(game, pi, v, cross_check=False)
    for j in game.attacked:
        backed, _ = bellman_step(game, pi, j, v, values[j])
        if (backed < values[j] - tol * (1.0 + np.abs(values[j]))).any():
            return False
    return True


def joint_optimal_adversary(game: TabularSaSG, pi: TabularPolicy, max_rounds: int = 100) -> JointAdversary:
    """Best-response iteration over attacked agents until no map changes.

    When the iteration cycles, fall back to searching the joint space for a
    perturbation that is simultaneously minimizing for every attacked
    agent; if there is none, or the space is too large, report undecided.
    """
    v = _prepare(game, pi, None)
    for rnd in range(1, max_rounds + 1):
        changed = False
        for j in game.attacked:
            new, _ = optimal_adversary(game, pi, j, v)
            if not np.array_equal(new.maps[j], v.maps[j]):
                changed = True
                v = new
        if not changed:
            return JointAdversary("converged", v, rnd, policy_value(game, pi, v))
    sizes = [math.prod(len(game.candidates(j, s)) for s in range(game.n_states)) for j in game.attacked]
    if math.prod(sizes) > ENUMERATION_LIMIT:
        return JointAdversary("undecided", None, max_rounds)
    base = Perturbation.identity(game)
    for rows in itertools.product(*(list(_maps_for(game, j)) for j in game.attacked)):
        cand = Perturbation(base.maps.copy())
        for j, row in zip(game.attacked, rows):
            cand.maps[j] = row
        if _is_simultaneous_minimizer(game, pi, cand):
            return JointAdversary("exhaustive", cand, max_rounds, policy_value(game, pi, cand))
    return JointAdversary("undecided", None, max_rounds)


def tv_distance(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ConfigurationError("distributions must share a support")
    return 0.5 * float(np.abs(p - q).sum())


@dataclass
class Certificate:
    agent: int
    lhs: float
    rhs: float
    zeta: float
    max_tv: float
    argmins: list[int]
    holds: bool

    @property
    def ratio(self) -> float:
        if self.lhs <= 0.0:
            return math.inf
        return self.rhs / self.lhs

    def to_dict(self) -> dict:
        return {
            "agent": self.agent,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "zeta": self.zeta,
            "max_tv": self.max_tv,
            "argmins": self.argmins,
            "holds": self.holds,
        }


def theorem4_certificate(
    game: TabularSaSG, pi: TabularPolicy, j: int, joint: JointAdversary | None = None
) -> Certificate:
    """Value-gap bound for agent ``j`` under the joint optimal adversary.

    lhs is the largest drop in agent ``j``'s value when ``j`` itself is also
    attacked, with the other agents' maps held at their optimum.  rhs is
    ``zeta`` times the largest total-variation change in the joint policy
    that any admissible substitution for ``j`` can cause.
    """
    if joint is None:
        joint = joint_optimal_adversary(game, pi)
    if not joint.decided:
        raise SasgError("joint optimal adversary is undecided for this policy")
    v_star = joint.perturbation
    v_minus = v_star.without(j)
    clean = policy_value(game, pi, v_minus)[j]
    attacked = policy_value(game, pi, v_star)[j]
    lhs = float(np.max(clean - attacked))
    zeta = 2.0 * (1.0 + game.gamma / (1.0 - game.gamma) ** 2) * game.max_abs_reward(j)
    max_tv = 0.0
    for s in range(game.n_states):
        base = _joint_from_perceived(pi, v_minus.maps[:, s])
        perceived = v_minus.maps[:, s].copy()
        for b in game.candidates(j, s):
            perceived[j] = b
            max_tv = max(max_tv, tv_distance(base, _joint_from_perceived(pi, perceived)))
    rhs = zeta * max_tv
    return Certificate(j, lhs, rhs, zeta, max_tv, v_star.maps[j].tolist(), lhs <= rhs + CERTIFICATE_TOL)


# ---------------------------------------------------------------- equilibria


@dataclass
class NashReport:
    n_profiles: int
    equilibria: list[tuple[tuple[int, ...], ...]]
    undecided: list[tuple[tuple[int, ...], ...]]

    @property
    def found(self) -> bool:
        return bool(self.equilibria)

    @property
    def verdict(self) -> str:
        if self.equilibria:
            return "equilibrium-found"
        return "undecided" if self.undecided else "none-found"

    def to_dict(self) -> dict:
        return {
            "n_profiles": self.n_profiles,
            "verdict": self.verdict,
            "equilibria": [[list(c) for c in prof] for prof in self.equilibria],
            "undecided": [[list(c) for c in prof] for prof in self.undecided],
        }


def deterministic_profiles(game: TabularSaSG) -> Iterator[tuple[tuple[int, ...], ...]]:
    per_agent = [list(itertools.product(range(a), repeat=game.n_states)) for a in game.n_actions]
    return itertools.product(*per_agent)


def nash_existence_scan(game: TabularSaSG, limit: int = ENUMERATION_LIMIT) -> NashReport:
    """Check every deterministic joint policy for the equilibrium condition.

    Each profile and each unilateral deviation is valued under its own joint
    optimal adversary.  Finding none is evidence about deterministic
    profiles only.
    """
    size = math.prod(a**game.n_states for a in game.n_actions)
    if size > limit:
        raise ScanTooLarge(size, limit)
    values: dict = {}
    for prof in deterministic_profiles(game):
        pi = TabularPolicy.deterministic(game, prof)
        joint = joint_optimal_adversary(game, pi)
        values[prof] = policy_value(game, pi, joint.perturbation) if joint.decided else None
    equilibria, undecided = [], []
    for prof, vals in values.items():
        if vals is None:
            undecided.append(prof)
            continue
        stable = True
        unknown = False
        for j in range(game.n_agents):
            for alt in itertools.product(range(game.n_actions[j]), repeat=game.n_states):
                dev = prof[:j] + (alt,) + prof[j + 1 :]
                dev_vals = values[dev]
                if dev_vals is None:
                    unknown = True
                    continue
                if (dev_vals[j] > vals[j] + EQUILIBRIUM_TOL).any():
                    stable = False
                    break
            if not stable:
                break
        if stable and not unknown:
            equilibria.append(prof)
        elif stable:
            undecided.append(prof)
    return NashReport(size, equilibria, undecided)


# ---------------------------------------------------------------- generators


GAMMAS = (0.5, 0.9, 0.99)


def random_game(
    rng: np.random.Generator,
    n_states: int,
    n_actions: Sequence[int],
    max_candidates: int = 3,
    gamma: float = 0.9,
    n_attacked: int | None = None,
    extremal: bool = False,
) -> TabularSaSG:
    """Random game; ``extremal`` uses +-1 rewards and deterministic transitions."""
    n_agents = len(n_actions)
    joint = math.prod(n_actions)
    if extremal:
        signs = rng.choice([-1.0, 1.0], size=(n_agents, n_states, joint))
        rewards = np.repeat(signs[..., None], n_states, axis=3)
        nxt = rng.integers(n_states, size=(n_states, joint))
        transitions = np.zeros((n_states, joint, n_states))
        np.put_along_axis(transitions, nxt[..., None], 1.0, axis=2)
    else:
        rewards = rng.uniform(-1.0, 1.0, size=(n_agents, n_states, joint, n_states))
        transitions = rng.dirichlet(np.ones(n_states), size=(n_states, joint))
        transitions /= transitions.sum(axis=2, keepdims=True)
    admissible = []
    for _ in range(n_agents):
        table = []
        for s in range(n_states):
            extra = rng.integers(0, min(max_candidates, n_states))
            others = [b for b in range(n_states) if b != s]
            table.append([s] + rng.choice(others, size=extra, replace=False).tolist())
        admissible.append(table)
    return TabularSaSG(tuple(n_actions), rewards, transitions, admissible, gamma, n_attacked)


def random_policy(rng: np.random.Generator, game: TabularSaSG, deterministic: bool = False) -> TabularPolicy:
    if deterministic:
        return TabularPolicy.deterministic(game, [rng.integers(a, size=game.n_states) for a in game.n_actions])
    return TabularPolicy(tuple(rng.dirichlet(np.ones(a), size=game.n_states) for a in game.n_actions))


def sweep_instance(seed: int, index: int) -> tuple[TabularSaSG, TabularPolicy]:
    """Game ``index`` of the seeded sweep.

    Every fourth instance is extremal: +-1 rewards, deterministic
    transitions and policies, discount 0.5.
    """
    rng = np.random.default_rng([seed, index])
    extremal = index % 4 == 3
    n_states = int(rng.integers(1, 6))
    n_agents = int(rng.integers(1, 3))
    n_actions = tuple(int(a) for a in rng.integers(1, 4, size=n_agents))
    gamma = float(GAMMAS[int(rng.integers(len(GAMMAS)))])
    if extremal:
        # the bound can only come close to equality at the smallest discount
        gamma = GAMMAS[0]
    n_attacked = int(rng.integers(1, n_agents + 1))
    game = random_game(rng, n_states, n_actions, 3, gamma, n_attacked, extremal)
    game.name = f"sweep-{seed}-{index}"
    return game, random_policy(rng, game, deterministic=extremal)


@dataclass
class SweepRecord:
    index: int
    n_states: int
    n_actions: tuple[int, ...]
    gamma: float
    contraction_ok: bool
    worst_contraction: float
    fixed_point_error: float
    uniqueness_error: float
    joint_status: str
    certificates: list[Certificate] = field(default_factory=list)

    @property
    def certificate_ok(self) -> bool:
        return all(c.holds for c in self.certificates)


@dataclass
class SweepResult:
    seed: int
    records: list[SweepRecord]

    @property
    def contraction_ok(self) -> bool:
        return all(r.contraction_ok for r in self.records)

    @property
    def max_fixed_point_error(self) -> float:
        return max(r.fixed_point_error for r in self.records)

    @property
    def certificates(self) -> list[tuple[int, Certificate]]:
        return [(r.index, c) for r in self.records for c in r.certificates]

    @property
    def n_undecided(self) -> int:
        return sum(r.joint_status == "undecided" for r in self.records)

    @property
    def passed(self) -> bool:
        return (
            self.contraction_ok
            and self.max_fixed_point_error <= 1e-8
            and all(c.holds for _, c in self.certificates)
            and self.n_undecided == 0
        )

    def extreme_ratios(self) -> tuple[tuple[int, Certificate], tuple[int, Certificate]]:
        """(loosest, tightest) certificates with a positive value gap."""
        live = [(i, c) for i, c in self.certificates if c.lhs > 1e-9]
        if not live:
            raise SasgError("no certificate with a positive value gap")
        return max(live, key=lambda ic: ic[1].ratio), min(live, key=lambda ic: ic[1].ratio)

    def summary(self) -> dict:
        certs = self.certificates
        out = {
            "seed": self.seed,
            "games": len(self.records),
            "contraction_ok": self.contraction_ok,
            "max_fixed_point_error": self.max_fixed_point_error,
            "certificates": len(certs),
            "certificate_failures": sum(not c.holds for _, c in certs),
            "undecided": self.n_undecided,
            "passed": self.passed,
        }
        try:
            (li, loose), (ti, tight) = self.extreme_ratios()
            out["loosest"] = {"index": li, "ratio": loose.ratio}
            out["tightest"] = {"index": ti, "ratio": tight.ratio}
        except SasgError:
            pass
        return out


def check_contraction(
    game: TabularSaSG, pi: TabularPolicy, j: int, others: Perturbation, rng: np.random.Generator, pairs: int = 5
) -> float:
    """Largest ``|LV1 - LV2| / (gamma |V1 - V2|)`` over random pairs (<= 1 means contraction)."""
    scale = game.max_abs_reward(j) / (1.0 - game.gamma) + 1.0
    worst = 0.0
    for _ in range(pairs):
        v1 = rng.uniform(-scale, scale, game.n_states)
        v2 = rng.uniform(-scale, scale, game.n_states)
        gap = float(np.abs(v1 - v2).max())
        out = float(np.abs(bellman_step(game, pi, j, others, v1)[0] - bellman_step(game, pi, j, others, v2)[0]).max())
        if game.gamma == 0.0:
            worst = max(worst, 0.0 if out <= 1e-12 else math.inf)
        else:
            worst = max(worst, out / (game.gamma * gap))
    return worst


def sweep_record(index: int, game: TabularSaSG, pi: TabularPolicy, seed: int) -> SweepRecord:
    rng = np.random.default_rng([seed, index, 1])
    joint = joint_optimal_adversary(game, pi)
    base = joint.perturbation if joint.decided else Perturbation.identity(game)
    worst, fp_err, uniq_err = 0.0, 0.0, 0.0
    for j in game.attacked:
        worst = max(worst, check_contraction(game, pi, j, base, rng))
        _, fixed = optimal_adversary(game, pi, j, base)
        _, brute = exhaustive_adversary(game, pi, j, base)
        fp_err = max(fp_err, float(np.abs(fixed - brute).max()))
        high = np.full(game.n_states, game.max_abs_reward(j) / (1.0 - game.gamma))
        other_start, _, _ = iterate_bellman(game, pi, j, base, start=high)
        uniq_err = max(uniq_err, float(np.abs(other_start - fixed).max()))
    certs = [theorem4_certificate(game, pi, j, joint) for j in game.attacked] if joint.decided else []
    return SweepRecord(
        index,
        game.n_states,
        game.n_actions,
        game.gamma,
        worst <= 1.0 + 1e-9,
        worst,
        fp_err,
        uniq_err,
        joint.status,
        certs,
    )


def theorem_sweep(n_games: int = 100, seed: int = 0) -> SweepResult:
    records = []
    for i in range(n_games):
        game, pi = sweep_instance(seed, i)
        records.append(sweep_record(i, game, pi, seed))
    return SweepResult(seed, records)


def search_no_equilibrium(n_tries: int = 500, seed: int = 0) -> tuple[TabularSaSG, NashReport, int] | None:
    """First random 2-agent 2-state game whose scan finds no equilibrium.

    Games whose unattacked version has no deterministic equilibrium either
    are skipped, so the verdict is attributable to the adversary.
    """
    for attempt in range(n_tries):
        rng = np.random.default_rng([seed, attempt])
        game = random_game(rng, 2, (2, 2), 2, 0.5)
        game.admissible = ((((0, 1), (0, 1))),) * 2
        game.validate()
        report = nash_existence_scan(game)
        if report.verdict != "none-found":
            continue
        if nash_existence_scan(unattacked(game)).found:
            game.name = f"no-equilibrium-{seed}-{attempt}"
            return game, report, attempt
    return None


def unattacked(game: TabularSaSG) -> TabularSaSG:
    return TabularSaSG(game.n_actions, game.rewards, game.transitions, game.admissible, game.gamma, 0, game.name)


# ---------------------------------------------------------------- fixtures


def save_fixture(path, kind: str, game: TabularSaSG, pi: TabularPolicy | None = None, expect: dict | None = None):
    doc = {"kind": kind, "game": game.to_dict(), "expect": expect or {}}
    if pi is not None:
        doc["policy"] = pi.to_dict()
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_fixture(path) -> tuple[str, TabularSaSG, TabularPolicy | None, dict]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        game = TabularSaSG.from_dict(doc["game"])
        pi = TabularPolicy(tuple(doc["policy"])) if "policy" in doc else None
        if pi is not None:
            pi.check(game)
        return doc["kind"], game, pi, doc.get("expect", {})
    except (OSError, json.JSONDecodeError, KeyError, GameError) as exc:
        raise GameError(f"fixture {path.name}: {exc}") from exc


def verify_fixture(path) -> dict:
    """Re-run the check a fixture records and compare with its expectation."""
    kind, game, pi, expect = load_fixture(path)
    entry: dict = {"kind": kind}
    if kind == "certificate":
        cert = theorem4_certificate(game, pi, int(expect.get("agent", 0)))
        entry.update(cert.to_dict())
        entry["ratio"] = cert.ratio
        ok = cert.holds
        if "min_ratio" in expect:
            ok &= cert.ratio >= expect["min_ratio"]
        if "max_ratio" in expect:
            ok &= cert.ratio <= expect["max_ratio"]
        if "lhs" in expect:
            ok &= abs(cert.lhs - expect["lhs"]) <= 1e-9
        if "rhs" in expect:
            ok &= abs(cert.rhs - expect["rhs"]) <= 1e-9
    elif kind == "nash":
        report = nash_existence_scan(game)
        entry.update(report.to_dict())
        ok = report.verdict == expect.get("verdict", "none-found")
    else:
        raise GameError(f"fixture {Path(path).name}: unknown kind {kind!r}")
    entry["passed"] = bool(ok)
    return entry


def build_fixtures(directory, seed: int = 0, n_games: int = 100) -> dict[str, Path]:
    """Write the loosest and tightest sweep certificates and a no-equilibrium game."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sweep = theorem_sweep(n_games, seed)
    (li, loose), (ti, tight) = sweep.extreme_ratios()
    out = {}
    for label, index, cert, bound in (("loose", li, loose, {"min_ratio": 10.0}), ("tight", ti, tight, {"max_ratio": 2.0})):
        game, pi = sweep_instance(seed, index)
        expect = {"agent": cert.agent, "lhs": cert.lhs, "rhs": cert.rhs, **bound}
        path = directory / f"certificate_{label}.json"
        save_fixture(path, "certificate", game, pi, expect)
        out[label] = path
    found = search_no_equilibrium(seed=seed)
    if found is None:
        raise SasgError("no game without a deterministic equilibrium found")
    game, report, _ = found
    path = directory / "nash_none_found.json"
    save_fixture(path, "nash", game, expect={"verdict": report.verdict, "n_profiles": report.n_profiles})
    out["nash"] = path
    return out
