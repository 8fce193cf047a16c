"""Command-line entry point: ``romfac {train,evaluate,sasg-verify,gradcheck}``.

Exit codes: 0 success, 2 configuration error, 3 verification failure,
4 runtime error.  ``ROMFAC_OUTPUT_DIR`` overrides every ``--out``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib.resources import files
from pathlib import Path

import numpy as np
import yaml

from . import harness, sasg
from .diffcore import ConfigurationError
from .gridworld import ConfigurationError as EnvConfigError
from .trainer import CheckpointError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VERIFY = 3
EXIT_RUNTIME = 4

log = logging.getLogger("romfac")


class VerificationFailed(Exception):
    pass


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _run_config(args) -> harness.RunConfig:
    raw = harness.load_yaml(args.config) if args.config else {}
    return harness.build_config(harness.apply_overrides(raw, args.set))


def _side_config(args, section: str) -> dict:
    """Options for the verification commands from an optional YAML section."""
    if not args.config:
        return {}
    raw = harness.apply_overrides(harness.load_yaml(args.config), args.set)
    value = raw.get(section) or {}
    if not isinstance(value, dict):
        raise ConfigurationError(f"section {section!r} must be a mapping")
    return value


def cmd_train(args) -> int:
    config = _run_config(args)
    out = harness.output_dir(args.out)
    every = max(1, args.log_every)

    def progress(row):
        if row["round"] % every == 0:
            log.info("round %d mu=%.3f eps=%.3f reward_a=%.4f", row["round"], row["mu"], row["epsilon"], row["mean_reward_team_a"])

    trainer = harness.run_training(config, out, rounds=args.rounds, resume=args.resume, log=progress)
    summary = {
        "rounds": trainer.round,
        "total_rounds": trainer.total_rounds,
        "variant": trainer.config.variant,
        "metrics": str(out / "metrics.csv"),
        "checkpoint": str(out / "checkpoint"),
    }
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    raw = harness.load_yaml(args.config) if args.config else {}
    raw = harness.apply_overrides(raw, args.set)
    attack = raw.get("attack") or {}
    eval_config = harness.EvalConfig.from_dict(raw.get("eval") or {}, attack.get("eval"))
    out = harness.output_dir(args.out)
    rows, episodes = harness.evaluate_checkpoint(args.checkpoint, eval_config)
    harness.write_rows_csv(rows, out / "eval_rows.csv")
    harness.write_episode_log(episodes, out / "episodes.csv")
    summary = {"checkpoint": str(args.checkpoint), "rows": [r.to_dict() for r in rows]}
    _write_json(out / "eval_summary.json", summary)
    for r in rows:
        print(f"attacked={r.attacked} win={r.winning_rate:.3f} kill={r.average_kill:.3f} reward={r.average_total_reward:.4f}±{r.std:.4f}")
    return EXIT_OK


def cmd_sasg_verify(args) -> int:
    opts = _side_config(args, "sasg")
    fixtures = args.fixtures or opts.get("fixtures") or files("romfac") / "fixtures"
    games = args.games if args.games is not None else int(opts.get("games", 100))
    seed = args.seed if args.seed is not None else int(opts.get("seed", 0))
    report = harness.run_sasg_verify(fixtures, games, seed)
    out = harness.output_dir(args.out)
    _write_json(out / "sasg_report.json", report)
    for name, entry in report["fixtures"].items():
        print(f"fixture {name}: {'PASS' if entry['passed'] else 'FAIL'}")
    if report["sweep"] is not None:
        s = report["sweep"]
        print(
            f"sweep seed={s['seed']} games={s['games']}: contraction={s['contraction_ok']} "
            f"fixed-point err={s['max_fixed_point_error']:.2e} certificate failures={s['certificate_failures']} "
            f"undecided={s['undecided']}"
        )
    if not report["passed"]:
        raise VerificationFailed("sasg verification failed")
    return EXIT_OK


def _flip_sign(grads: dict) -> dict:
    return {leaf: -g for leaf, g in grads.items()}


def cmd_gradcheck(args) -> int:
    opts = _side_config(args, "gradcheck")
    cases = args.cases if args.cases is not None else int(opts.get("cases", 100))
    seed = args.seed if args.seed is not None else int(opts.get("seed", 0))
    tamper = _flip_sign if args.negative_control else None
    report = harness.run_gradcheck(cases, seed, tamper)
    out = harness.output_dir(args.out)
    _write_json(out / "gradcheck_report.json", report)
    print(
        f"gradcheck cases={cases} checked={report['n_checked']} max_rel_error={report['max_relative_error']:.3e} "
        f"{'PASS' if report['passed'] else 'FAIL'}"
    )
    if not report["passed"]:
        raise VerificationFailed("gradient check failed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="romfac", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", type=Path, help="YAML run configuration")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
        p.add_argument("--out", type=Path, default=Path(out_default), help="output directory")

    p = sub.add_parser("train", help="train one variant")
    common(p, "runs/train")
    p.add_argument("--rounds", type=int, help="stop after this many more rounds")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    p.add_argument("--log-every", type=int, default=500)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint under attack")
    common(p, "runs/eval")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sasg-verify", help="check tabular game fixtures and a random sweep")
    common(p, "runs/sasg")
    p.add_argument("--fixtures", type=Path, help="fixture directory (default: packaged fixtures)")
    p.add_argument("--games", type=int, help="random games in the sweep (0 disables it)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sasg_verify)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p, "runs/gradcheck")
    p.add_argument("--cases", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--negative-control", action="store_true", help="flip every analytic gradient; must fail")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, EnvConfigError, sasg.GameError, yaml.YAMLError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VerificationFailed as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (CheckpointError, OSError, ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
