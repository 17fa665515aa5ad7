"""Compare the compiled kernels against the pure-NumPy fallback.

Runs the same workloads in two subprocesses, one per backend
(CONVEXDP_BACKEND=numba / numpy), and prints wall times and speedups.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import json
import os
import subprocess
import sys

_WORKLOAD = r"""
import json
import time
import numpy as np
from convexdp import backend, kernels
from convexdp import (StagedDomain, ValueTable, OperatorKind,
                      build_staged_grid, make_epidemic, make_dubins,
                      backward_induction, EngineConfig)

results = {"backend": backend.BACKEND_NAME}
rng = np.random.default_rng(0)

# warm-up: trigger compilation so timings measure steady-state work
_ = kernels.cell_lp(np.array([0.3]), np.array([0.0, 1.0]), 50, 1e-10, 1e-11)

t0 = time.perf_counter()
for _ in range(20000):
    theta = rng.uniform(0.0, 1.0, 3)
    vals = rng.normal(size=8)
    kernels.cell_lp(theta, vals, 100, 1e-10, 1e-11)
results["cell_lp_20k"] = time.perf_counter() - t0

A = rng.normal(size=(4, 10))
b = A @ rng.uniform(0, 1, 10)
c = rng.normal(size=10)
t0 = time.perf_counter()
for _ in range(2000):
    kernels.simplex_standard(A, b, c, 200, 1e-9, 1e-11)
results["simplex_2k"] = time.perf_counter() - t0

prob, dom = make_epidemic(n_samples=10, seed=0, horizon=8)
grid = build_staged_grid(dom, [0.02])
t0 = time.perf_counter()
backward_induction(prob, grid, "convex", EngineConfig(check_inclusion=False))
results["epidemic_convex_stagewise"] = time.perf_counter() - t0

prob, dom = make_dubins(horizon=6)
grid = build_staged_grid(dom, [0.1, 0.1, np.pi / 10])
t0 = time.perf_counter()
backward_induction(prob, grid, "bilevel", EngineConfig(check_inclusion=False))
results["dubins_bilevel_stagewise"] = time.perf_counter() - t0

print(json.dumps(results))
"""


def run_backend(name: str) -> dict:
    env = dict(os.environ, CONVEXDP_BACKEND=name)
    res = subprocess.run([sys.executable, "-c", _WORKLOAD], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=1)
    args = parser.parse_args()
    for _ in range(args.repeat):
        fast = run_backend("numba")
        slow = run_backend("numpy")
        print(f"{'workload':<32}{'numba (s)':>12}{'numpy (s)':>12}{'speedup':>10}")
        for key in fast:
            if key == "backend":
                continue
            a, b = fast[key], slow[key]
            print(f"{key:<32}{a:>12.3f}{b:>12.3f}{b / a:>10.1f}x")


if __name__ == "__main__":
    main()
