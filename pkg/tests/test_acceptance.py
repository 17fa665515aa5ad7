"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Every tolerance is pinned here; runtime budgets (where stated) are asserted
alongside the numeric checks.  Heavy runs are shared through module-scoped
fixtures (the grid-convergence study also feeds the determinism check).
"""

import dataclasses
import filecmp
import json
import os
import time

import numpy as np
import pytest

from convexdp import (AffineDynamics, BoxActionSet, ControlProblem,
                      EngineConfig, FiniteDisturbance, OperatorKind,
                      QuadraticActionCost, SolveStatus, SolverConfig,
                      StagedDomain, StructuredProgram, ValueTable,
                      backward_induction, build_staged_grid, convex_bellman,
                      bilevel_bellman, error_bound, estimate_lipschitz,
                      exact_policy_value, inner_lp_weights,
                      lipschitz_estimates, make_dubins, make_epidemic,
                      make_linear_convex, oracle_bellman, oracle_tables,
                      policy_cost_tables, solve_lp, solve_structured)
from convexdp.cli import main as cli_main

from conftest import make_1d_instance
from test_solver import enumerate_bfs_optimum


def report(num, name, detail, elapsed=None, limit=None):
    line = f"[criterion {num:02d}] PASS {name}: {detail}"
    if elapsed is not None:
        line += f" [{elapsed:.1f}s" + (f" < {limit:.0f}s]" if limit else "]")
    print(line)


# ---------------------------------------------------------------------------
# shared heavy runs
# ---------------------------------------------------------------------------


C4_CONFIG = {
    "name": "linear_convex_grid_study",
    "builtin": "linear_convex",
    "params": {"m": 10, "n_samples": 10, "seed": 7, "horizon": 5},
    "spacing": 0.2,
    "seeds": {"engine": 0},
    "experiment": {"operator": "convex", "spacings": [0.2, 0.1, 0.05],
                   "reference_spacing": 0.025},
}


@pytest.fixture(scope="module")
def c4_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("c4")
    cfg_path = base / "config.json"
    cfg_path.write_text(json.dumps(C4_CONFIG))
    t0 = time.perf_counter()
    out1 = str(base / "run1")
    assert cli_main(["converge-grid", "--config", str(cfg_path),
                     "--out", out1]) == 0
    elapsed1 = time.perf_counter() - t0
    out2 = str(base / "run2")
    assert cli_main(["converge-grid", "--config", str(cfg_path),
                     "--out", out2]) == 0
    return out1, out2, elapsed1


@pytest.fixture(scope="module")
def one_d_pack():
    """Coarse convex-route solve plus a 10x-finer enumeration reference."""
    prob, grid = make_1d_instance(0.1)
    _, fine = make_1d_instance(0.01)
    bundle = backward_induction(prob, grid, "convex")
    ref = oracle_tables(prob, fine, action_grid=1001)
    lip_fine = lipschitz_estimates(
        fine, [ValueTable(t, ref[t], OperatorKind.EXACT, fine)
               for t in range(fine.horizon + 1)])
    return prob, grid, fine, bundle, ref, lip_fine


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------


def test_criterion_01_sandwich_bound():
    t0 = time.perf_counter()
    A = np.array([[0.85, 0.1], [0.1, 0.85]])
    B = np.array([[0.3, 0.05], [-0.08, 0.27]])
    C = np.array([[1.0], [1.0]])
    dom = StagedDomain(2, np.array([[-1.0, -1.0], [-1.2, -1.2]]),
                       np.array([[1.0, 1.0], [1.2, 1.2]]))
    grid = build_staged_grid(dom, [0.1, 0.1])
    assert grid.node_count(0) == 21 ** 2
    prob = ControlProblem(
        n=2, m=2, horizon=1,
        dynamics=AffineDynamics(A, B, C),
        stage_cost=QuadraticActionCost(lambda X: np.zeros(len(X)), np.eye(2)),
        terminal_cost=lambda X: (X ** 2).sum(axis=1),
        action_set=BoxActionSet(np.array([-0.15, -0.15]),
                                np.array([0.15, 0.15])),
        disturbance=FiniteDisturbance(
            np.array([[-0.083], [0.021], [0.074]]),
            np.array([0.3, 0.45, 0.25])))
    vfun = lambda Z: (Z ** 2).sum(axis=1)
    vt = ValueTable.from_callable(grid, 1, vfun)
    L = estimate_lipschitz(grid, vt)
    slack = L * grid.delta + 1e-4

    from convexdp.operators import _run_hat_stage
    X0 = grid.stage_nodes(0)
    status, hat_vals, _, _, _ = _run_hat_stage(prob, vt.envelope(), X0,
                                               SolverConfig())
    assert np.all(status == 0)
    ax = np.linspace(-0.15, 0.15, 101)
    AG = np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1).reshape(-1, 2)
    oracle_vals = np.array([oracle_bellman(prob, vfun, x, AG)[0] for x in X0])
    low = np.min(hat_vals - oracle_vals)
    high = np.max(hat_vals - oracle_vals)
    elapsed = time.perf_counter() - t0
    assert low >= -1e-7          # float guard on the exact-arithmetic side
    assert high <= slack
    assert elapsed < 60.0
    report(1, "sandwich bound",
           f"gap in [{low:.2e}, {high:.2e}] within L*delta+1e-4 = {slack:.3f} "
           f"over {X0.shape[0]} nodes", elapsed, 60)


def test_criterion_02_value_error_bound(one_d_pack):
    t0 = time.perf_counter()
    prob, grid, fine, bundle, ref, lip_fine = one_d_pack
    worst_low, worst_high = 0.0, -np.inf
    for t in range(grid.horizon + 1):
        fidx = fine.node_ids_at(grid.stage_nodes(t))
        diff = bundle.tables[t].node_values - ref[t][fidx]
        bound = error_bound(lip_fine, grid.delta, t)
        assert diff.min() >= -1e-5
        assert diff.max() <= bound + 1e-4
        worst_low = min(worst_low, float(diff.min()))
        worst_high = max(worst_high, float(diff.max() - bound))
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    report(2, "stage-sum error bound",
           f"min(diff) = {worst_low:.2e} >= -1e-5, "
           f"max(diff - bound) = {worst_high:.2e} <= 1e-4", elapsed, 60)


def test_criterion_03_bilevel_operator_bound(one_d_pack):
    t0 = time.perf_counter()
    prob, grid, fine, bundle, ref, lip_fine = one_d_pack
    cand = np.linspace(-0.2, 0.2, 1001).reshape(-1, 1)
    results = []
    # one kinked and one curved Lipschitz value function
    for vfun in (lambda Z: np.abs(Z[:, 0]),
                 lambda Z: np.sqrt(1.0 + Z[:, 0] ** 2)):
        vt = ValueTable.from_callable(grid, 1, vfun)
        L = estimate_lipschitz(grid, vt)
        worst = 0.0
        for x in grid.stage_nodes(0):
            til, _ = bilevel_bellman(prob, grid, 0, vt, x, action_grid=1001)
            orc, _ = oracle_bellman(prob, vfun, x, cand)
            worst = max(worst, abs(til - orc))
        bound = L * grid.delta + 1e-4
        assert worst <= bound
        results.append((worst, bound))
    elapsed = time.perf_counter() - t0
    report(3, "bilevel operator bound",
           "; ".join(f"max |bilevel - enumerated| = {w:.2e} <= {b:.2e}"
                     for w, b in results), elapsed)


def test_criterion_04_grid_convergence_pattern(c4_runs):
    out1, _, elapsed = c4_runs
    rows = np.loadtxt(os.path.join(out1, "convergence_grid.csv"),
                      delimiter=",", skiprows=1, ndmin=2)
    linf = rows[:, 3]
    assert np.all(np.diff(linf) < 0.0), "linf errors must strictly decrease"
    orders = rows[1:, 6]
    assert np.all(orders >= 1.0), f"empirical orders {orders} must be >= 1"
    assert elapsed < 900.0
    report(4, "grid convergence",
           f"linf errors {np.array2string(linf, precision=4)} "
           f"orders {np.array2string(orders, precision=2)}", elapsed, 900)


def test_criterion_05_sample_convergence_pattern(tmp_path):
    t0 = time.perf_counter()
    cfg = {
        "name": "linear_convex_sample_study",
        "builtin": "linear_convex",
        "params": {"m": 10, "n_samples": 160, "seed": 10, "horizon": 5},
        "spacing": 0.2,
        "seeds": {"engine": 0},
        "experiment": {"operator": "convex", "sample_sizes": [20, 40, 80],
                       "reference_samples": 160},
    }
    path = tmp_path / "c5.json"
    path.write_text(json.dumps(cfg))
    out = str(tmp_path / "out")
    assert cli_main(["converge-samples", "--config", str(path),
                     "--out", out]) == 0
    rows = np.loadtxt(os.path.join(out, "convergence_samples.csv"),
                      delimiter=",", skiprows=1, ndmin=2)
    l1 = rows[:, 2]
    elapsed = time.perf_counter() - t0
    assert np.all(np.diff(l1) <= 0.0), f"l1 errors {l1} must be non-increasing"
    assert elapsed < 600.0
    report(5, "sample convergence",
           f"l1 errors {np.array2string(l1, precision=4)} non-increasing "
           f"over N in (20, 40, 80) vs 160", elapsed, 600)


def test_criterion_06_epidemic_suboptimality():
    t0 = time.perf_counter()
    prob, dom = make_epidemic(n_samples=10, seed=0, horizon=20)
    grid = build_staged_grid(dom, [0.01])
    bundle = backward_induction(prob, grid, "convex", EngineConfig(seed=0))
    ref = backward_induction(prob, grid, "bilevel",
                             EngineConfig(action_grid=1001,
                                          check_inclusion=False))
    vals, _ = policy_cost_tables(prob, bundle, n_paths=10_000, seed=0,
                                 tree_cap=10 ** 6)
    rel_parts = []
    for t in range(grid.horizon + 1):
        rv = ref.tables[t].node_values
        vp = vals[t]
        mask = np.abs(rv) > 1e-12
        rel = np.zeros_like(rv)
        rel[mask] = (vp[mask] - rv[mask]) / rv[mask]
        assert np.all(np.abs(vp[~mask] - rv[~mask]) <= 1e-9)
        rel_parts.append(np.abs(rel))
    flat = np.concatenate(rel_parts)
    linf_pct = float(flat.max() * 100.0)
    l1_pct = float(flat.mean() * 100.0)
    elapsed = time.perf_counter() - t0
    assert linf_pct <= 15.0
    assert l1_pct <= 2.0
    assert elapsed < 600.0
    report(6, "epidemic suboptimality",
           f"relative error linf {linf_pct:.2f}% <= 15%, "
           f"l1 {l1_pct:.3f}% <= 2%", elapsed, 600)


def test_criterion_07_dubins_steering():
    t0 = time.perf_counter()
    prob, dom = make_dubins(horizon=20)
    grid = build_staged_grid(dom, [0.1, 0.1, np.pi / 20])
    bundle = backward_induction(prob, grid, "bilevel", EngineConfig(seed=0))
    finals = []
    for th0 in (0.0, np.pi / 2, np.pi, 3 * np.pi / 2):
        x = np.array([0.0, -0.5, th0])
        for t in range(prob.horizon):
            u = bundle.policy(t).query(x)
            x = prob.dynamics.batch(x.reshape(1, -1), u.reshape(1, -1),
                                    np.zeros((1, 1)))[0]
        finals.append(x)
        assert abs(x[0]) <= 0.15
        assert abs(x[2] - np.pi) <= np.pi / 10
    elapsed = time.perf_counter() - t0
    assert elapsed < 1200.0
    detail = "; ".join(f"th0={th:.2f}: |x|={abs(f[0]):.3f}, "
                       f"|th-pi|={abs(f[2] - np.pi):.3f}"
                       for th, f in zip((0.0, np.pi / 2, np.pi, 3 * np.pi / 2),
                                        finals))
    report(7, "vehicle steering", detail, elapsed, 1200)


def test_criterion_08_convexity_preservation():
    t0 = time.perf_counter()
    prob, dom = make_linear_convex(seed=7, m=10, n_samples=10)
    grid = build_staged_grid(dom, [0.2, 0.2])
    bundle = backward_induction(prob, grid, "convex", EngineConfig(seed=0))
    rng = np.random.default_rng(0)
    worst = -np.inf
    for t in range(grid.horizon + 1):
        vals = bundle.tables[t].node_values
        lat = grid.node_lattice[: grid.node_count(t)]
        checked = 0
        while checked < 200:
            i, j = rng.integers(0, vals.shape[0], 2)
            mid_lat = lat[i] + lat[j]
            if np.any(mid_lat % 2):
                continue
            mid_id = grid.lattice_ids[
                int(((mid_lat // 2) * grid.lat_strides).sum())]
            if mid_id >= vals.shape[0]:
                continue
            gap = vals[mid_id] - 0.5 * (vals[i] + vals[j])
            worst = max(worst, float(gap))
            assert gap <= 1e-6
            checked += 1
    elapsed = time.perf_counter() - t0
    report(8, "convexity preservation",
           f"max midpoint violation {worst:.2e} <= 1e-6 over 200 pairs "
           f"per stage", elapsed)


def test_criterion_09_policy_dominance(one_d_pack):
    t0 = time.perf_counter()
    prob, grid, fine, bundle, ref, lip_fine = one_d_pack
    worst = -np.inf
    for t in range(grid.horizon + 1):
        handles = bundle.policy_handles(t)
        for i, x in enumerate(grid.stage_nodes(t)):
            v_pi = exact_policy_value(prob, handles, x, t)
            gap = v_pi - bundle.tables[t].node_values[i]
            worst = max(worst, float(gap))
            assert gap <= 1e-6
    elapsed = time.perf_counter() - t0
    report(9, "policy cost dominated by table",
           f"max (policy - table) = {worst:.2e} <= 1e-6 at every node, "
           f"every stage", elapsed)


def test_criterion_10_solver_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(42)
    n_lp = 0
    while n_lp < 500:
        A = rng.normal(size=(3, 6))
        b = A @ rng.uniform(0.0, 1.0, 6)
        c = rng.normal(size=6)
        lower = np.zeros(6)
        upper = np.full(6, np.inf)
        res = solve_lp(c, A, b, lower, upper)
        ref = enumerate_bfs_optimum(c, A, b, lower, upper)
        if res.status is SolveStatus.UNBOUNDED or not np.isfinite(ref):
            continue
        assert res.status is SolveStatus.OPTIMAL
        assert abs(res.value - ref) <= 1e-9 * max(1.0, abs(ref))
        n_lp += 1

    tight = SolverConfig(kkt_tol=1e-10, max_iter=300)
    for k in range(200):
        nodes = np.sort(rng.uniform(-1.0, 1.0, 5))
        d = rng.normal(size=5)
        cu = rng.normal()
        lo, hi = sorted(rng.uniform(-1.0, 1.0, 2))
        span = nodes[-1] - nodes[0]
        prog = StructuredProgram(
            m=1, gamma_blocks=[(5, np.arange(5))],
            Q=np.zeros((1, 1)), c=np.array([cu]), d=[d],
            Aeq_u=np.array([[span]]), Aeq_g=nodes.reshape(1, 5),
            beq=np.array([rng.uniform(nodes[0], nodes[-1])]),
            u_lower=np.array([lo]), u_upper=np.array([hi]))
        r = solve_structured(prog, tight)
        c_flat = np.concatenate([[cu], d])
        Aeq = np.vstack([np.concatenate([[span], nodes]),
                         np.concatenate([[0.0], np.ones(5)])])
        beq = np.array([prog.beq[0], 1.0])
        lo_f = np.concatenate([[lo], np.zeros(5)])
        hi_f = np.concatenate([[hi], np.full(5, np.inf)])
        ref = solve_lp(c_flat, Aeq, beq, lo_f, hi_f)
        assert r.status is ref.status
        if r.status is SolveStatus.OPTIMAL:
            assert abs(r.value - ref.value) <= 1e-7 * max(1.0, abs(ref.value))

    dom = StagedDomain(2, np.zeros((1, 2)), np.ones((1, 2)))
    cell = build_staged_grid(dom, [1.0, 1.0]).cell(0)
    w, v = inner_lp_weights(cell, [0.0, 1.0, 1.0, 1.0], [0.5, 0.5])
    assert v == pytest.approx(0.5, abs=1e-10)
    assert w[0] == pytest.approx(0.5, abs=1e-9)
    assert w[3] == pytest.approx(0.5, abs=1e-9)
    elapsed = time.perf_counter() - t0
    report(10, "solver oracles",
           "500 LPs == vertex enumeration (1e-9); 200 zero-curvature "
           "programs == simplex (1e-7); corner split exact", elapsed)


def test_criterion_11_determinism(c4_runs):
    out1, out2, _ = c4_runs
    t0 = time.perf_counter()
    for rel in ("manifest.json", "reference/values.csv",
                "reference/policy.csv"):
        a = os.path.join(out1, rel)
        b = os.path.join(out2, rel)
        assert filecmp.cmp(a, b, shallow=False), f"{rel} differs between runs"
    m1 = json.load(open(os.path.join(out1, "manifest.json")))
    m2 = json.load(open(os.path.join(out2, "manifest.json")))
    assert m1 == m2
    # the error table carries wall-clock seconds; every numeric column
    # except the timing must agree bitwise
    r1 = np.loadtxt(os.path.join(out1, "convergence_grid.csv"),
                    delimiter=",", skiprows=1, ndmin=2)
    r2 = np.loadtxt(os.path.join(out2, "convergence_grid.csv"),
                    delimiter=",", skiprows=1, ndmin=2)
    keep = [0, 1, 2, 3, 5, 6]
    assert np.array_equal(r1[:, keep], r2[:, keep], equal_nan=True)
    elapsed = time.perf_counter() - t0
    report(11, "determinism",
           "two identical grid-study runs: value tables, manifests and "
           "error columns are bit-identical", elapsed)
