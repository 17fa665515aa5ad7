"""Wall-time benchmark: the 1000-dimensional-action linear problem.

Optional and long-running (the per-node master solves are dense in the
action dimension).  Records wall time per stage and in total; there is no
pass/fail number.

    python benchmarks/bench_linear_convex_m1000.py [--spacing 0.2] [--m 1000]
"""

import argparse
import json
import time

import numpy as np

from convexdp import (EngineConfig, backward_induction, build_staged_grid,
                      make_linear_convex)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--m", type=int, default=1000)
    parser.add_argument("--spacing", type=float, default=0.2)
    parser.add_argument("--n-samples", type=int, default=10)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--out", default=None,
                        help="optional JSON file for the timing record")
    args = parser.parse_args()

    problem, domain = make_linear_convex(seed=args.seed, m=args.m,
                                         n_samples=args.n_samples)
    grid = build_staged_grid(domain, [args.spacing, args.spacing])
    print(f"m={args.m}, spacing={args.spacing}, "
          f"nodes per stage {[int(c) for c in grid.stage_counts]}")
    t0 = time.perf_counter()
    bundle = backward_induction(problem, grid, "convex",
                                EngineConfig(check_inclusion=False))
    total = time.perf_counter() - t0
    for s in bundle.stats:
        print(f"stage {s['stage']}: {s['nodes']} nodes, {s['seconds']:.2f}s")
    print(f"total wall time: {total:.2f}s")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"m": args.m, "spacing": args.spacing,
                       "total_seconds": total, "stages": bundle.stats}, fh,
                      indent=2)


if __name__ == "__main__":
    main()
