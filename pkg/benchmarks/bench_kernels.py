"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel runs on fixed random inputs; the table reports the best
per-call time over the repeats and the speed-up of the compiled version.
"""
from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from romfac import _kernels_py

try:
    from romfac import _kernels as compiled
except ImportError:
    compiled = None


def world(rng, size, n_agents):
    cells = rng.choice(size * size, n_agents, replace=False)
    pos = np.stack([cells % size, cells // size], axis=1).astype(np.int64)
    occ = np.zeros((size, size), dtype=np.int64)
    occ[pos[:, 1], pos[:, 0]] = np.arange(n_agents) + 1
    team = (np.arange(n_agents) >= n_agents // 2).astype(np.int64)
    hp = rng.integers(1, 11, n_agents).astype(np.float64)
    return occ, team, hp, pos, np.arange(n_agents, dtype=np.int64)


def backup_inputs(rng, n_states, n_actions):
    joint = int(np.prod(n_actions))
    q = rng.normal(size=(n_states, joint))
    policy = np.zeros((len(n_actions), n_states, max(n_actions)))
    for k, a in enumerate(n_actions):
        policy[k, :, :a] = rng.dirichlet(np.ones(a), size=n_states)
    perceived = np.tile(np.arange(n_states, dtype=np.int64), (len(n_actions), 1))
    cands, ptr = [], [0]
    for s in range(n_states):
        others = [b for b in range(n_states) if b != s]
        cands.extend(sorted({s, *rng.choice(others, size=min(2, len(others)), replace=False).tolist()}))
        ptr.append(len(cands))
    return (q, policy, np.asarray(n_actions, dtype=np.int64), perceived,
            np.array(cands, dtype=np.int64), np.array(ptr, dtype=np.int64), 0)


def cases(rng):
    occ, team, hp, pos, agents = world(rng, 8, 8)
    yield "encode 8x8, 8 agents, r=2", "encode_observations", (occ, team, hp, pos, agents, 2, 10.0)
    occ, team, hp, pos, agents = world(rng, 30, 128)
    yield "encode 30x30, 128 agents, r=3", "encode_observations", (occ, team, hp, pos, agents, 3, 10.0)
    yield "backup 5 states, 3x3 actions", "adversarial_backup", backup_inputs(rng, 5, (3, 3))
    yield "backup 40 states, 3x3x3 actions", "adversarial_backup", backup_inputs(rng, 40, (3, 3, 3))


def best_time(fn, args, repeat):
    timer = timeit.Timer(lambda: fn(*args))
    number, _ = timer.autorange()
    return min(timer.repeat(repeat, number)) / number


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json", help="also write results to this file")
    args = parser.parse_args(argv)
    if compiled is None:
        print("compiled extension not built; only the fallback is timed", file=sys.stderr)
    rng = np.random.default_rng(0)
    results = []
    print(f"{'case':34s} {'python (us)':>12s} {'cython (us)':>12s} {'speed-up':>9s}")
    for name, kernel, inputs in cases(rng):
        py = best_time(getattr(_kernels_py, kernel), inputs, args.repeat)
        cy = best_time(getattr(compiled, kernel), inputs, args.repeat) if compiled else float("nan")
        results.append({"case": name, "python_s": py, "cython_s": cy, "speedup": py / cy})
        print(f"{name:34s} {py * 1e6:12.1f} {cy * 1e6:12.1f} {py / cy:8.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
