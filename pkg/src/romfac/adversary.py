"""White-box l-inf attacks on actor observations.

The attacker relabels the clean observation with the actor's most likely
action, then runs signed-gradient ascent on the cross-entropy of that
label, projecting after every step onto the epsilon box around the clean
observation intersected with the valid observation range.  The mean
action input stays clean; only the observation is perturbed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ConfigurationError, GradientTape, Tensor
from .mfac import AgentNets, actor_distribution

MAX_STEPS = 64


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.075
    steps: int = 10
    step_size: float | None = None
    clip_low: float = 0.0
    clip_high: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise ConfigurationError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if not 0 <= self.steps <= MAX_STEPS:
            raise ConfigurationError(f"steps must be in [0, {MAX_STEPS}], got {self.steps}")
        if self.step_size is not None and (not np.isfinite(self.step_size) or self.step_size <= 0):
            raise ConfigurationError(f"step size must be finite and > 0, got {self.step_size}")
        if not self.clip_low < self.clip_high:
            raise ConfigurationError("clip range is empty")

    @property
    def beta(self) -> float:
        """Step size; defaults to ``2.5 * epsilon / steps``."""
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.epsilon / self.steps if self.steps else 0.0

    def with_epsilon(self, epsilon: float) -> "AttackConfig":
        return AttackConfig(epsilon, self.steps, self.step_size, self.clip_low, self.clip_high)


@dataclass
class AdversarialState:
    base: np.ndarray
    perturbed: np.ndarray

    @property
    def delta(self) -> np.ndarray:
        return self.perturbed - self.base


def action_label(nets: AgentNets, obs, mean) -> np.ndarray | int:
    """Most probable action; ties go to the lowest index."""
    probs = actor_distribution(nets, np.asarray(obs, dtype=np.float64), mean).data
    label = np.argmax(probs, axis=-1)
    return int(label) if probs.ndim == 1 else label


def action_loss(nets: AgentNets, adv_obs, mean, label, params=None) -> Tensor:
    """Cross-entropy of ``label`` under the actor at ``adv_obs``; batch mean for 2-D input."""
    probs = actor_distribution(nets, adv_obs, mean, params=params)
    ce = dc.cross_entropy(probs, label)
    return dc.mean(ce) if ce.ndim else ce


def project(candidate: np.ndarray, base: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    lo = np.maximum(base - cfg.epsilon, cfg.clip_low)
    hi = np.minimum(base + cfg.epsilon, cfg.clip_high)
    # when the ball misses the valid range entirely the range wins
    out = np.minimum(np.maximum(candidate, lo), np.maximum(hi, lo))
    return np.clip(out, cfg.clip_low, cfg.clip_high)


def input_gradient(nets: AgentNets, adv_obs: np.ndarray, mean, label) -> np.ndarray:
    """Gradient of the summed per-row action loss w.r.t. the observations."""
    tape = GradientTape()
    x = tape.input(adv_obs)
    probs = actor_distribution(nets, x, mean)
    loss = dc.sum_(dc.cross_entropy(probs, label))
    return tape.backward(loss)[x]


def pgd_attack(nets: AgentNets, obs, mean, cfg: AttackConfig, label=None) -> AdversarialState:
    """Multi-step signed-gradient ascent on the action loss.

    Works on one observation or a batch; every row is attacked
    independently against its own label.
    """
    base = np.array(obs, dtype=np.float64)
    if label is None:
        label = action_label(nets, base, mean)
    adv = project(base, base, cfg)
    if cfg.epsilon == 0.0:
        return AdversarialState(base, adv)
    beta = cfg.beta
    for _ in range(cfg.steps):
        g = input_gradient(nets, adv, mean, label)
        adv = project(adv + beta * np.sign(g), base, cfg)
    return AdversarialState(base, adv)
