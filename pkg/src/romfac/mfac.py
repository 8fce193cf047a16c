"""Mean-field actor-critic building blocks.

The actor sees ``concat(obs, mean_prev)``, where ``mean_prev`` is the mean
neighbour action from the previous step.  The critic sees
``concat(obs, onehot(action), mean)``.  Everything is batched over the
leading axis; a single 1-D observation is accepted too.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ConfigurationError, FeedforwardNet, Tensor

PG_MODES = ("printed", "advantage", "expected")


def uniform(n_actions: int) -> np.ndarray:
    return np.full(n_actions, 1.0 / n_actions)


def one_hot(actions, n_actions: int) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.int64)
    out = np.zeros(actions.shape + (n_actions,))
    np.put_along_axis(out, actions[..., None], 1.0, axis=-1)
    return out


def mean_action(neighbor_actions: Iterable[np.ndarray], n_actions: int | None = None) -> np.ndarray:
    """Average of one-hot action vectors; uniform when there are none."""
    vecs = [np.asarray(v, dtype=np.float64) for v in neighbor_actions]
    if not vecs:
        if n_actions is None:
            raise ConfigurationError("n_actions required for an empty neighbour set")
        return uniform(n_actions)
    stacked = np.stack(vecs)
    if n_actions is not None and stacked.shape[1] != n_actions:
        raise ConfigurationError("one-hot length does not match n_actions")
    return stacked.sum(axis=0) / len(vecs)


@dataclass
class AgentNets:
    actor: FeedforwardNet
    critic: FeedforwardNet
    target_actor: FeedforwardNet
    target_critic: FeedforwardNet
    obs_dim: int
    n_actions: int

    def __post_init__(self):
        if self.actor.widths != self.target_actor.widths or self.critic.widths != self.target_critic.widths:
            raise ConfigurationError("target networks must share the live architecture")
        if self.actor.n_inputs != self.obs_dim + self.n_actions or self.actor.n_outputs != self.n_actions:
            raise ConfigurationError("actor widths inconsistent with obs_dim/n_actions")
        if self.critic.n_inputs != self.obs_dim + 2 * self.n_actions or self.critic.n_outputs != 1:
            raise ConfigurationError("critic widths inconsistent with obs_dim/n_actions")

    @classmethod
    def create(
        cls,
        obs_dim: int,
        n_actions: int,
        rng: np.random.Generator,
        hidden: Sequence[int] = (64,),
        activation: str = "relu",
    ) -> "AgentNets":
        actor = FeedforwardNet.initialise((obs_dim + n_actions, *hidden, n_actions), rng, activation, 0.1)
        critic = FeedforwardNet.initialise((obs_dim + 2 * n_actions, *hidden, 1), rng, activation, 0.1)
        return cls(actor, critic, actor.copy(), critic.copy(), obs_dim, n_actions)

    @classmethod
    def zeros(cls, obs_dim: int, n_actions: int, hidden: Sequence[int] = (8,)) -> "AgentNets":
        actor = FeedforwardNet.zeros((obs_dim + n_actions, *hidden, n_actions))
        critic = FeedforwardNet.zeros((obs_dim + 2 * n_actions, *hidden, 1))
        return cls(actor, critic, actor.copy(), critic.copy(), obs_dim, n_actions)

    def copy(self) -> "AgentNets":
        return AgentNets(
            self.actor.copy(),
            self.critic.copy(),
            self.target_actor.copy(),
            self.target_critic.copy(),
            self.obs_dim,
            self.n_actions,
        )

    def networks(self) -> tuple[FeedforwardNet, ...]:
        return (self.actor, self.critic, self.target_actor, self.target_critic)

    def to_bytes(self) -> bytes:
        return b"".join(net.to_bytes() for net in self.networks())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "AgentNets":
        nets = []
        offset = 0
        for _ in range(4):
            net, offset = dc._read_net(blob, offset)
            nets.append(net)
        if offset != len(blob):
            raise dc.FormatError("trailing bytes after network bundle")
        actor, critic, t_actor, t_critic = nets
        n_actions = actor.n_outputs
        return cls(actor, critic, t_actor, t_critic, actor.n_inputs - n_actions, n_actions)


def _check(nets: AgentNets, obs, *vectors):
    obs_shape = obs.shape if isinstance(obs, Tensor) else np.shape(obs)
    if obs_shape[-1] != nets.obs_dim:
        raise ConfigurationError(f"observation width {obs_shape[-1]} != {nets.obs_dim}")
    for v in vectors:
        if np.shape(v)[-1] != nets.n_actions:
            raise ConfigurationError(f"action-vector width {np.shape(v)[-1]} != {nets.n_actions}")


def actor_logits(nets: AgentNets, obs, mean_prev, use_target: bool = False, params=None) -> Tensor:
    _check(nets, obs, mean_prev)
    net = nets.target_actor if use_target else nets.actor
    x = dc.concat([obs, np.broadcast_to(mean_prev, np.shape(obs)[:-1] + (nets.n_actions,))])
    return net(x, params)


def actor_distribution(nets: AgentNets, obs, mean_prev, use_target: bool = False, params=None) -> Tensor:
    return dc.softmax(actor_logits(nets, obs, mean_prev, use_target, params))


def critic_q(nets: AgentNets, obs, action_onehot, mean, use_target: bool = False, params=None) -> Tensor:
    _check(nets, obs, action_onehot, mean)
    net = nets.target_critic if use_target else nets.critic
    lead = np.shape(obs)[:-1]
    x = dc.concat(
        [
            obs,
            np.broadcast_to(action_onehot, lead + (nets.n_actions,)),
            np.broadcast_to(mean, lead + (nets.n_actions,)),
        ]
    )
    out = net(x, params)
    if out.ndim == 2:
        return dc.take_rows(out, np.zeros(out.shape[0], dtype=np.int64))
    return dc.take_rows(out, 0)


def q_all_actions(nets: AgentNets, obs, mean, use_target: bool = True) -> np.ndarray:
    """Critic values for every own action: shape ``(..., n_actions)``."""
    obs = np.asarray(obs, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    single = obs.ndim == 1
    obs2 = np.atleast_2d(obs)
    mean2 = np.broadcast_to(mean, obs2.shape[:-1] + (nets.n_actions,))
    n, a = obs2.shape[0], nets.n_actions
    rep_obs = np.repeat(obs2, a, axis=0)
    rep_mean = np.repeat(mean2, a, axis=0)
    acts = np.tile(np.eye(a), (n, 1))
    q = critic_q(nets, rep_obs, acts, rep_mean, use_target).data.reshape(n, a)
    return q[0] if single else q


def value_estimate(nets: AgentNets, obs_next, mean) -> np.ndarray:
    """Expected target-critic value under the target actor's distribution."""
    probs = actor_distribution(nets, obs_next, mean, use_target=True).data
    q = q_all_actions(nets, obs_next, mean, use_target=True)
    return (probs * q).sum(axis=-1)


@dataclass
class Experience:
    """Per-agent transition rows.

    Row ``i`` is one agent's view of one joint transition: its observation
    of ``s``, its action, its reward, its observation of ``s'``, the mean
    action of its neighbours (``mean``) and the mean action it was fed
    when acting (``mean_prev``).  ``done`` marks rows whose agent died or
    whose episode terminated.
    """

    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    mean: np.ndarray
    mean_prev: np.ndarray
    done: np.ndarray

    def __post_init__(self):
        n = len(self.obs)
        for name in ("action", "reward", "next_obs", "mean", "mean_prev", "done"):
            if len(getattr(self, name)) != n:
                raise ConfigurationError(f"experience field {name} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self):
        return len(self.obs)

    def subset(self, idx) -> "Experience":
        return Experience(
            self.obs[idx],
            self.action[idx],
            self.reward[idx],
            self.next_obs[idx],
            self.mean[idx],
            self.mean_prev[idx],
            self.done[idx],
        )


def td_target(nets: AgentNets, exp: Experience, gamma: float) -> np.ndarray:
    v_next = value_estimate(nets, exp.next_obs, exp.mean)
    return exp.reward + gamma * (1.0 - exp.done) * v_next


def critic_loss(nets: AgentNets, exp: Experience, gamma: float, params=None) -> Tensor:
    """Mean squared TD error; the target is a constant, so target nets get no gradient."""
    if not 0.0 <= gamma < 1.0:
        raise ConfigurationError(f"gamma must be in [0, 1), got {gamma}")
    y = td_target(nets, exp, gamma)
    q = critic_q(nets, exp.obs, one_hot(exp.action, nets.n_actions), exp.mean, params=params)
    return dc.mean(dc.square(dc.sub(q, y)))


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row by inverse CDF."""
    probs = np.atleast_2d(probs)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(len(probs))[:, None] * cdf[:, -1:]
    return np.minimum((u >= cdf).sum(axis=-1), probs.shape[-1] - 1)


def policy_gradient_weights(
    nets: AgentNets,
    exp: Experience,
    rng: np.random.Generator | None = None,
    mode: str = "printed",
    gamma: float = 0.95,
) -> tuple[np.ndarray, np.ndarray]:
    """Actions and constant weights for the score-function actor loss.

    ``printed``: the action is drawn from the target actor at ``s`` and
    weighted by the target critic at ``s'`` with the previous mean action.  ``advantage``: the stored
    action weighted by a one-step TD advantage from the target networks.
    ``expected``: no action; the weights are a ``(batch, actions)`` matrix of
    target-critic advantages ``Q(s, a) - V(s)`` for every action.
    """
    if mode == "printed":
        if rng is None:
            raise ConfigurationError("printed mode samples actions and needs an rng")
        probs_t = actor_distribution(nets, exp.obs, exp.mean_prev, use_target=True).data
        acts = sample_actions(probs_t, rng)
        q_next = critic_q(nets, exp.next_obs, one_hot(acts, nets.n_actions), exp.mean_prev, use_target=True).data
        return acts, (1.0 - exp.done) * q_next
    if mode == "advantage":
        y = td_target(nets, exp, gamma)
        return np.asarray(exp.action, dtype=np.int64), y - value_estimate(nets, exp.obs, exp.mean_prev)
    if mode == "expected":
        q = q_all_actions(nets, exp.obs, exp.mean, use_target=True)
        probs_t = actor_distribution(nets, exp.obs, exp.mean_prev, use_target=True).data
        return None, q - (probs_t * q).sum(axis=-1, keepdims=True)
    raise ConfigurationError(f"unknown policy-gradient mode {mode!r}")


def policy_gradient_loss(
    nets: AgentNets,
    exp: Experience,
    rng: np.random.Generator | None = None,
    params=None,
    mode: str = "printed",
    gamma: float = 0.95,
    actions=None,
    weights=None,
) -> Tensor:
    """``-mean(log pi(a|s, mean_prev) * w)``; ``w`` carries no gradient.

    A 2-D ``weights`` matrix gives the all-actions form ``-mean(sum_a pi(a|s) w_a)``.
    """
    if weights is None:
        actions, weights = policy_gradient_weights(nets, exp, rng, mode, gamma)
    probs = actor_distribution(nets, exp.obs, exp.mean_prev, params=params)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim == 2:
        return dc.mul(dc.mean(dc.sum_(dc.mul(probs, weights), axis=-1)), -1.0)
    logp = dc.log(dc.take_rows(probs, actions))
    return dc.mul(dc.mean(dc.mul(logp, np.asarray(weights, dtype=np.float64))), -1.0)


def policy_entropy(nets: AgentNets, obs, mean_prev, params=None) -> Tensor:
    """Batch-mean entropy of the live actor's action distribution."""
    probs = actor_distribution(nets, obs, mean_prev, params=params)
    ent = dc.mul(dc.sum_(dc.mul(probs, dc.log(probs)), axis=-1), -1.0)
    return dc.mean(ent) if ent.ndim else ent


def soft_update(nets: AgentNets, tau_actor: float, tau_critic: float) -> None:
    """Blend live parameters into the targets in place."""
    for tau in (tau_actor, tau_critic):
        if not 0.0 <= tau <= 1.0:
            raise ConfigurationError(f"soft-update rate {tau} outside [0, 1]")
    for live, target, tau in ((nets.actor, nets.target_actor, tau_actor), (nets.critic, nets.target_critic, tau_critic)):
        for p, tp in zip(live.params(), target.params()):
            tp *= 1.0 - tau
            tp += tau * p
