"""Configuration loading, the evaluation protocol and verification entry points.

Evaluation attacks the first ``k`` agents (by id) of the learning team,
team A.  Opponents follow the scripted heuristic unless a checkpoint
opponent is requested.  Every cell writes one record per episode so the
aggregate row can be recomputed from the log.
"""
from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import yaml

from . import diffcore as dc
from . import gridworld as gw
from . import mfac, sasg
from .adversary import AttackConfig, action_label, pgd_attack
from .diffcore import ConfigurationError
from .trainer import (
    CheckpointError,
    Trainer,
    TrainerConfig,
    attack_from_dict,
    load_nets,
    neighbour_means,
    read_manifest,
)

OUTPUT_ENV = "ROMFAC_OUTPUT_DIR"
SCRIPTED_OPPONENT = "scripted-heuristic"
CHECKPOINT_OPPONENT = "checkpoint"

EPISODE_COLUMNS = ("seed", "episode", "attacked", "win", "kills", "total_reward", "steps")
ROW_FIELDS = (
    "variant",
    "attacked",
    "winning_rate",
    "average_kill",
    "average_total_reward",
    "std",
    "episodes",
    "seeds",
)


# ---------------------------------------------------------------- config files


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 20
    max_steps: int = 100
    attacked_counts: tuple[int, ...] = (0, 4)
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(0.075, 10))
    opponent: str = SCRIPTED_OPPONENT
    opponent_checkpoint: str | None = None
    seeds: tuple[int, ...] = (0, 1, 2)
    greedy: bool = False

    def __post_init__(self):
        object.__setattr__(self, "attacked_counts", tuple(int(k) for k in self.attacked_counts))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.episodes < 1:
            raise ConfigurationError("episodes must be >= 1")
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be >= 1")
        if not self.seeds:
            raise ConfigurationError("at least one evaluation seed required")
        if any(k < 0 for k in self.attacked_counts):
            raise ConfigurationError("attacked counts must be >= 0")
        if self.opponent not in (SCRIPTED_OPPONENT, CHECKPOINT_OPPONENT):
            raise ConfigurationError(f"unknown opponent {self.opponent!r}")

    def check_team(self, team_size: int) -> None:
        too_big = [k for k in self.attacked_counts if k > team_size]
        if too_big:
            raise ConfigurationError(f"attacked counts {too_big} exceed team size {team_size}")

    @classmethod
    def from_dict(cls, raw: Mapping, attack: Mapping | None = None) -> "EvalConfig":
        raw = dict(raw)
        if attack is not None:
            raw["attack"] = attack_from_dict(attack)
        elif isinstance(raw.get("attack"), Mapping):
            raw["attack"] = attack_from_dict(raw["attack"])
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown eval keys: {sorted(unknown)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc


@dataclass(frozen=True)
class RunConfig:
    env: gw.EnvConfig
    trainer: TrainerConfig
    eval: EvalConfig


def load_yaml(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"malformed YAML in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config {path} must be a mapping")
    return raw


def build_config(raw: Mapping) -> RunConfig:
    unknown = set(raw) - {"env", "trainer", "attack", "eval"}
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
    env = gw.EnvConfig.from_dict(raw.get("env") or {})
    attack = raw.get("attack")
    trainer = TrainerConfig.from_dict(raw.get("trainer") or {}, attack.get("train") if attack else None)
    evaluation = EvalConfig.from_dict(raw.get("eval") or {}, attack.get("eval") if attack else None)
    return RunConfig(env, trainer, evaluation)


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Apply ``section.key=value`` overrides; values are parsed as YAML scalars."""
    out = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        parts = key.split(".")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = yaml.safe_load(value)
    return out


def output_dir(default) -> Path:
    path = Path(os.environ.get(OUTPUT_ENV) or default)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------- training


def run_training(config: RunConfig, out: Path, rounds: int | None = None, resume: bool = False, log=None) -> Trainer:
    """Train, appending to ``out/metrics.csv`` and checkpointing to ``out/checkpoint``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint"
    csv_path = out / "metrics.csv"
    if resume and (ckpt / "manifest.json").exists():
        trainer = Trainer.load(ckpt)
        _truncate_csv(csv_path, trainer.round)
    else:
        trainer = Trainer(config.env, config.trainer)
        if csv_path.exists():
            csv_path.unlink()
    trainer.run(rounds, csv_path=csv_path, checkpoint_path=ckpt, progress=log)
    return trainer


def _truncate_csv(path: Path, rounds: int) -> None:
    """Drop rows past ``rounds`` so a resumed run appends where the checkpoint left off."""
    if not path.exists():
        return
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    path.write_text("".join(lines[: rounds + 1]), encoding="utf-8")


# ---------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class EpisodeRecord:
    seed: int
    episode: int
    attacked: int
    win: float
    kills: float
    total_reward: float
    steps: int


@dataclass(frozen=True)
class MetricsRow:
    variant: str
    attacked: int
    winning_rate: float
    average_kill: float
    average_total_reward: float
    std: float
    episodes: int
    seeds: tuple[int, ...]

    def __post_init__(self):
        if not math.isnan(self.winning_rate) and not 0.0 <= self.winning_rate <= 1.0:
            raise ValueError("winning rate outside [0, 1]")
        if self.std < 0:
            raise ValueError("negative standard deviation")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["seeds"] = list(self.seeds)
        for key in ("winning_rate", "average_kill"):
            if math.isnan(out[key]):
                out[key] = None
        return out


def _sorted_mean_std(values: Sequence[float]) -> tuple[float, float]:
    vals = sorted(float(v) for v in values)
    n = len(vals)
    mean = math.fsum(vals) / n
    var = math.fsum(sorted((v - mean) ** 2 for v in vals)) / n
    return mean, math.sqrt(var)


def aggregate(variant: str, attacked: int, records: Sequence[EpisodeRecord]) -> MetricsRow:
    """Order-independent reduction of per-episode records into one row."""
    if not records:
        raise ValueError("no episodes to aggregate")
    mean, std = _sorted_mean_std([r.total_reward for r in records])
    wins = [r.win for r in records]
    kills = [r.kills for r in records]
    win_rate = float("nan") if any(math.isnan(w) for w in wins) else _sorted_mean_std(wins)[0]
    avg_kill = float("nan") if any(math.isnan(k) for k in kills) else _sorted_mean_std(kills)[0]
    seeds = tuple(sorted({r.seed for r in records}))
    return MetricsRow(variant, attacked, win_rate, avg_kill, mean, std, len(records), seeds)


def run_episode(
    env_config: gw.EnvConfig,
    nets: mfac.AgentNets,
    seed: int,
    episode: int,
    attacked: int,
    attack: AttackConfig | None,
    greedy: bool = False,
    opponent: mfac.AgentNets | None = None,
) -> EpisodeRecord:
    """One evaluation episode for team A.

    The first ``attacked`` team-A agents by id act on PGD observations; the
    others and the opponents observe cleanly.  With ``attack=None`` or
    ``attacked=0`` no attack code runs, so the two are bitwise equal.
    """
    config = replace(env_config, seed=seed)
    state = gw.reset(config, episode)
    rng = np.random.default_rng([seed, episode, 17])
    team_a = state.team_members(0)
    targets = set(team_a[:attacked].tolist()) if attack is not None else set()
    n_act = nets.n_actions
    mean_prev = np.tile(mfac.uniform(n_act), (state.n_agents, 1))
    opp_mean = None
    if opponent is not None:
        opp_mean = np.tile(mfac.uniform(opponent.n_actions), (state.n_agents, 1))
    total = 0.0
    while not gw.is_done(state):
        actions: dict[int, int] = {}
        ids = state.living(0)
        if len(ids):
            obs = gw.observe_many(state, ids)
            hit = np.array([i in targets for i in ids.tolist()])
            if hit.any():
                rows = np.flatnonzero(hit)
                label = action_label(nets, obs[rows], mean_prev[ids[rows]])
                obs[rows] = pgd_attack(nets, obs[rows], mean_prev[ids[rows]], attack, label).perturbed
            probs = mfac.actor_distribution(nets, obs, mean_prev[ids]).data
            acts = np.argmax(probs, axis=1) if greedy else mfac.sample_actions(probs, rng)
            actions.update(zip(ids.tolist(), acts.tolist()))
            mean_prev[ids] = neighbour_means(state, ids, acts, n_act)
        opp_ids = state.living(1)
        if opponent is None:
            actions.update(gw.scripted_actions(state, opp_ids))
        elif len(opp_ids):
            obs = gw.observe_many(state, opp_ids)
            probs = mfac.actor_distribution(opponent, obs, opp_mean[opp_ids]).data
            acts = np.argmax(probs, axis=1) if greedy else mfac.sample_actions(probs, rng)
            actions.update(zip(opp_ids.tolist(), acts.tolist()))
            opp_mean[opp_ids] = neighbour_means(state, opp_ids, acts, opponent.n_actions)
        result = gw.step(state, actions)
        total += float(result.rewards[team_a].sum())
        state = result.state
    if config.scenario == gw.BATTLE:
        win = 1.0 if gw.episode_outcome(state) == gw.Outcome.TEAM_A_WIN else 0.0
        kills = float((~state.alive[state.team == 1]).sum())
    else:
        win = kills = float("nan")
    return EpisodeRecord(seed, episode, attacked, win, kills, total, state.step)


def evaluate(
    env_config: gw.EnvConfig,
    nets: mfac.AgentNets,
    eval_config: EvalConfig,
    variant: str = "",
    opponent: mfac.AgentNets | None = None,
) -> tuple[list[MetricsRow], list[EpisodeRecord]]:
    """Run every (attacked count, seed, episode) cell."""
    env_config = replace(env_config, max_steps=eval_config.max_steps)
    eval_config.check_team(env_config.team_sizes[0])
    rows, log = [], []
    for k in eval_config.attacked_counts:
        cell = [
            run_episode(env_config, nets, seed, ep, k, eval_config.attack, eval_config.greedy, opponent)
            for seed in eval_config.seeds
            for ep in range(eval_config.episodes)
        ]
        rows.append(aggregate(variant, k, cell))
        log.extend(cell)
    return rows, log


def evaluate_checkpoint(path, eval_config: EvalConfig) -> tuple[list[MetricsRow], list[EpisodeRecord]]:
    manifest = read_manifest(path)
    env_config = gw.EnvConfig.from_dict(manifest["env"])
    nets = load_nets(path, 0)
    opponent = None
    if eval_config.opponent == CHECKPOINT_OPPONENT:
        opp_path = eval_config.opponent_checkpoint or path
        opp_manifest = read_manifest(opp_path)
        if opp_manifest["env"] != manifest["env"]:
            raise CheckpointError("opponent checkpoint was trained on a different environment")
        if 1 not in opp_manifest["learning_teams"]:
            raise CheckpointError("opponent checkpoint has no team B networks")
        opponent = load_nets(opp_path, 1)
    if nets.obs_dim != env_config.obs_dim:
        raise CheckpointError("checkpoint networks do not match its scenario")
    return evaluate(env_config, nets, eval_config, manifest["trainer"]["variant"], opponent)


def write_episode_log(records: Sequence[EpisodeRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EPISODE_COLUMNS)
        for r in records:
            writer.writerow([r.seed, r.episode, r.attacked, repr(r.win), repr(r.kills), repr(r.total_reward), r.steps])


def read_episode_log(path) -> list[EpisodeRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != EPISODE_COLUMNS:
            raise ValueError(f"{path} does not have the episode-log header")
        return [
            EpisodeRecord(
                int(r["seed"]),
                int(r["episode"]),
                int(r["attacked"]),
                float(r["win"]),
                float(r["kills"]),
                float(r["total_reward"]),
                int(r["steps"]),
            )
            for r in reader
        ]


def write_rows_csv(rows: Sequence[MetricsRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ROW_FIELDS)
        for row in rows:
            writer.writerow(
                [
                    row.variant,
                    row.attacked,
                    repr(row.winning_rate),
                    repr(row.average_kill),
                    repr(row.average_total_reward),
                    repr(row.std),
                    row.episodes,
                    " ".join(str(s) for s in row.seeds),
                ]
            )


# ---------------------------------------------------------------- study


@dataclass(frozen=True)
class StudyConfig:
    """Train each variant on each seed, then evaluate clean and fully attacked."""

    env: gw.EnvConfig
    trainer: TrainerConfig
    eval: EvalConfig
    variants: tuple[str, ...] = ("MFAC", "RoMFAC", "RoMFAC1", "SA-MFAC", "SA-MFAC3")
    seeds: tuple[int, ...] = (0, 1, 2)

    @classmethod
    def from_dict(cls, raw: Mapping) -> "StudyConfig":
        raw = dict(raw)
        study = raw.pop("study", {}) or {}
        base = build_config(raw)
        return cls(
            base.env,
            base.trainer,
            base.eval,
            tuple(study.get("variants", cls.variants)),
            tuple(int(s) for s in study.get("seeds", cls.seeds)),
        )


def load_study(path) -> StudyConfig:
    return StudyConfig.from_dict(load_yaml(path))


def run_study(study: StudyConfig, out, log: Callable[[str], None] | None = None) -> dict:
    """Returns ``{variant: {seed: {attacked: MetricsRow}}}`` plus timings under ``"_seconds"``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    results: dict = {"_seconds": {}}
    for variant in study.variants:
        results[variant] = {}
        for seed in study.seeds:
            start = time.perf_counter()
            cfg = replace(study.trainer, variant=variant, seed=seed)
            run_dir = out / f"{cfg.variant}-seed{seed}"
            trainer = Trainer(study.env, cfg)
            trainer.run(csv_path=None)
            trainer.save(run_dir / "checkpoint")
            rows, episodes = evaluate(study.env, trainer.nets[0], study.eval, cfg.variant)
            write_episode_log(episodes, run_dir / "episodes.csv")
            write_rows_csv(rows, run_dir / "rows.csv")
            results[variant][seed] = {row.attacked: row for row in rows}
            seconds = time.perf_counter() - start
            results["_seconds"][f"{variant}/{seed}"] = seconds
            if log is not None:
                summary = ", ".join(f"k={r.attacked}: {r.average_total_reward:.3f}" for r in rows)
                log(f"{variant} seed {seed}: {summary} ({seconds:.0f}s)")
    with open(out / "study.json", "w", encoding="utf-8") as fh:
        json.dump(study_summary(results), fh, indent=2, sort_keys=True)
    return results


def study_summary(results: Mapping) -> dict:
    out = {"seconds": dict(results.get("_seconds", {}))}
    for variant, per_seed in results.items():
        if variant.startswith("_"):
            continue
        out[variant] = {str(seed): {str(k): row.to_dict() for k, row in cells.items()} for seed, cells in per_seed.items()}
    return out


def pooled_reward(results: Mapping, variant: str, attacked: int) -> float:
    vals = [cells[attacked].average_total_reward for cells in results[variant].values()]
    return math.fsum(sorted(vals)) / len(vals)


# ---------------------------------------------------------------- verification


def run_gradcheck(n_cases: int = 100, seed: int = 0, tamper=None) -> dict:
    result = dc.gradcheck_suite(n_cases, seed, tamper)
    return {
        "passed": result.passed,
        "n_checked": result.n_checked,
        "max_relative_error": result.max_rel_error,
        "max_absolute_error": result.max_abs_error,
        "failures": result.failures[:20],
    }


def run_sasg_verify(fixture_dir=None, n_games: int = 100, seed: int = 0) -> dict:
    """Check committed fixtures and a random sweep; ``report["passed"]`` is the verdict."""
    report: dict = {"fixtures": {}, "sweep": None}
    ok = True
    if fixture_dir is not None:
        for path in sorted(Path(fixture_dir).glob("*.json")):
            entry = sasg.verify_fixture(path)
            report["fixtures"][path.name] = entry
            ok &= entry["passed"]
    if n_games > 0:
        sweep = sasg.theorem_sweep(n_games, seed)
        report["sweep"] = sweep.summary()
        ok &= sweep.passed
    report["passed"] = bool(ok)
    return report
