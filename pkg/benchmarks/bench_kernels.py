"""Time the hot kernels with numba enabled and with the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--size 7] [--steps 100000] [--repeats 3]

Each mode runs in a fresh interpreter because the switch is read at import.
"""

import argparse
import json
import os
import subprocess
import sys
import time


def measure(size, steps, repeats):
    import numpy as np

    from factored_rl import _accel
    from factored_rl.agents import VisitStatistics, env_arrays, rollout
    from factored_rl.confidence import compute_widths, empirical_model
    from factored_rl.envs import SysadminSpec, build_sysadmin
    from factored_rl.extended import build_extended, extended_backup, extended_evaluate

    env = build_sysadmin(SysadminSpec("circle", size), check_diameter=False)
    arrays = env_arrays(env)
    policy = np.arange(env.num_states) % env.num_actions

    def run_rollout():
        stats = VisitStatistics.for_mdp(env)
        rollout(arrays, stats, env.initial_state, policy, steps, np.random.default_rng(0))
        return stats

    stats = run_rollout()  # also compiles
    model = empirical_model(stats)
    ext = build_extended(model, compute_widths(stats, 0.05, stats.t, 0.03, 0.03, model))
    backup, evaluate = extended_backup(ext), extended_evaluate(ext)
    h = np.random.default_rng(1).normal(size=env.num_states)
    _, arg = backup(h, 0.5)
    evaluate(h, 0.5, arg)

    def best_of(fn):
        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            fn()
            times.append(time.perf_counter() - start)
        return min(times)

    return {
        "numba": _accel.USE_NUMBA,
        f"rollout {steps} steps": best_of(run_rollout),
        "extended backup": best_of(lambda: backup(h, 0.5)),
        "extended sweep": best_of(lambda: evaluate(h, 0.5, arg)),
    }


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--size", type=int, default=7)
    parser.add_argument("--steps", type=int, default=100_000)
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args()
    if args.child:
        print(json.dumps(measure(args.size, args.steps, args.repeats)))
        return
    results = {}
    for flag in ("1", "0"):
        env = dict(os.environ, FRL_NUMBA=flag)
        out = subprocess.run(
            [sys.executable, __file__, "--child", "--size", str(args.size),
             "--steps", str(args.steps), "--repeats", str(args.repeats)],
            env=env, check=True, capture_output=True, text=True,
        )
        results[flag] = json.loads(out.stdout.strip().splitlines()[-1])
    print(f"circle-{args.size}, best of {args.repeats}")
    print(f"{'kernel':<28}{'numba (s)':>12}{'numpy (s)':>12}{'speed-up':>10}")
    for key in results["1"]:
        if key == "numba":
            continue
        a, b = results["1"][key], results["0"][key]
        print(f"{key:<28}{a:>12.4f}{b:>12.4f}{b / a:>10.1f}")


if __name__ == "__main__":
    main()
