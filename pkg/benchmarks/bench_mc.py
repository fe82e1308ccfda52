"""Closed-loop Monte-Carlo throughput: compiled kernel vs. pure-Python fallback.

    python3 benchmarks/bench_mc.py [--runs 2000] [--x0 -4.0]

Both backends simulate the same traces (same seeds), so the script also
checks that their verdicts agree before printing the timings.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from layeredsim import pipeline as pl
from layeredsim.config import example_config_text, parse_config
from layeredsim.refine import BACKENDS, RefinedController


def build_controller():
    cfg = parse_config(example_config_text("parking"), "parking.yaml")
    model = pl.build_model(cfg)
    ab, _ = pl.abstraction(cfg, model)
    relation, certs = pl.certify(cfg, model, ab.grid.deviation_vertices())
    syn = pl.synthesize(cfg, model, ab, pl.build_dfa(cfg), pl.build_labeling(cfg), relation)["layered"]
    return cfg, RefinedController(model, syn.problem, syn.result, pl.shifts_from(certs), syn.D)


def time_backend(name, data, x0, runs, horizon, seed, repeat):
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = BACKENDS[name].simulate_batch(data, x0, runs, horizon, seed)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--runs", type=int, default=2000)
    ap.add_argument("--horizon", type=int, default=200)
    ap.add_argument("--x0", type=float, default=-4.0)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    cfg, ctl = build_controller()
    x0 = np.array([args.x0])
    results = {}
    for name in sorted(BACKENDS):
        # the fallback is slow, so it gets a single pass
        repeat = args.repeat if name == "compiled" else 1
        results[name] = time_backend(name, ctl.data, x0, args.runs, args.horizon, args.seed, repeat)
    steps = int(results[next(iter(results))][1][1].sum())
    print(f"{args.runs} traces from x0={args.x0}, horizon {args.horizon}, {steps} closed-loop steps")
    for name, (sec, _) in results.items():
        print(f"  {name:9s} {sec:8.3f} s   {steps / sec / 1e6:7.3f} M steps/s")
    if len(results) == 2:
        a, b = results["compiled"][1], results["python"][1]
        same = all(np.array_equal(u, v) for u, v in zip(a, b))
        print(f"  speedup {results['python'][0] / results['compiled'][0]:.1f}x, traces identical: {same}")
    else:
        print("  compiled kernel not built; only the fallback was timed")


if __name__ == "__main__":
    main()
