"""Backward induction, interpolation-free policies, and policy evaluation.

The recursion is sequential across stages; within a stage every node's
program is independent and solved by the compiled stage kernels.  Policies
never interpolate: querying one re-solves the per-state program against the
stored next-stage table at the queried state.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .backend import BACKEND_NAME, default_workers, set_worker_threads
from .errors import NotConvexEligible, PointOutsideDomain, TreeTooLarge
from .geometry import StagedGrid, validate_inclusion
from .operators import (BoxActionSet, ControlProblem, OperatorKind,
                        QuadraticActionCost, ValueTable, _run_hat_stage,
                        _run_tilde_stage, _raise_hat_status,
                        action_candidates, convex_bellman)
from .solver import SolverConfig


@dataclass(frozen=True)
class EngineConfig:
    solver: SolverConfig = SolverConfig()
    action_grid: object = None          # per-axis counts for bilevel box actions
    check_inclusion: bool = True
    inclusion_samples: int = 2000
    seed: int = 0
    workers: Optional[int] = None
    checkpoint_dir: Optional[str] = None
    batch_rows: int = 4_000_000         # bilevel cap on (node, action, sample) rows
    tree_cap: int = 10 ** 6


@dataclass
class SolutionBundle:
    problem: ControlProblem
    grid: StagedGrid
    kind: OperatorKind
    tables: list                         # ValueTable per stage 0..K
    policy_at_nodes: list                # (M_t, m) arrays, stages 0..K-1
    stats: list                          # per-stage dicts
    config: EngineConfig

    def table(self, t: int) -> ValueTable:
        return self.tables[t]

    def policy(self, t: int) -> "PolicyHandle":
        return PolicyHandle(self, t)

    def policy_handles(self, t0: int = 0) -> list:
        return [PolicyHandle(self, t) for t in range(t0, self.grid.horizon)]


@dataclass
class PolicyHandle:
    """Stage policy evaluated by re-solving the per-state program."""

    bundle: SolutionBundle
    stage: int

    def query(self, x) -> np.ndarray:
        return self.query_batch(np.asarray(x, float).reshape(1, -1))[0]

    def query_batch(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        b = self.bundle
        t = self.stage
        next_table = b.tables[t + 1]
        if b.kind is OperatorKind.CONVEX:
            env = next_table.envelope()
            status, values, u_out, facets, iters = _run_hat_stage(
                b.problem, env, X, b.config.solver)
            bad = np.nonzero(status != kernels.OPTIMAL)[0]
            if bad.size:
                _raise_hat_status(int(status[bad[0]]),
                                  f"policy stage {t}, state {X[bad[0]]!r}")
            return u_out
        cand = action_candidates(b.problem, None, b.config.action_grid)
        scores, status, _ = _run_tilde_stage(
            b.problem, b.grid, t, next_table.node_values, X, cand,
            b.config.solver)
        bad = np.nonzero(status != 0)[0]
        if bad.size:
            raise PointOutsideDomain(
                f"policy stage {t}: next state left the stage box from "
                f"{X[bad[0]]!r}")
        return cand[np.argmin(scores, axis=1)]


def query_policy(handle: PolicyHandle, x) -> np.ndarray:
    return handle.query(x)


# ---------------------------------------------------------------------------
# backward induction
# ---------------------------------------------------------------------------


def _coerce_kind(kind) -> OperatorKind:
    if isinstance(kind, OperatorKind):
        return kind
    return OperatorKind(str(kind).lower())


def _config_signature(problem, grid, kind, cfg: EngineConfig) -> str:
    sig = {
        "problem": problem.name or "anonymous",
        "kind": kind.value,
        "lower": grid.domain.lower.tolist(),
        "upper": grid.domain.upper.tolist(),
        "spacing": np.asarray(grid.spacing, float).tolist(),
        "kkt_tol": cfg.solver.kkt_tol,
        "max_iter": cfg.solver.max_iter,
        "action_grid": None if cfg.action_grid is None
        else np.asarray(cfg.action_grid).tolist(),
        "backend": BACKEND_NAME,
    }
    return json.dumps(sig, sort_keys=True)


def _checkpoint_paths(cfg: EngineConfig, t: int):
    import os
    base = cfg.checkpoint_dir
    return (os.path.join(base, f"stage_{t:03d}_values.csv"),
            os.path.join(base, f"stage_{t:03d}_policy.csv"),
            os.path.join(base, "signature.json"))


def _try_resume(cfg, signature, t, m):
    import os
    vpath, ppath, spath = _checkpoint_paths(cfg, t)
    if not (os.path.exists(vpath) and os.path.exists(spath)):
        return None
    with open(spath) as fh:
        if json.load(fh).get("signature") != signature:
            return None
    vals = np.loadtxt(vpath, delimiter=",", ndmin=1)
    pol = None
    if os.path.exists(ppath) and m > 0:
        pol = np.loadtxt(ppath, delimiter=",", ndmin=2).reshape(-1, m)
    return vals, pol


def _save_checkpoint(cfg, signature, t, values, policy):
    import os
    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    vpath, ppath, spath = _checkpoint_paths(cfg, t)
    np.savetxt(vpath, values, delimiter=",", fmt="%.17g")
    if policy is not None:
        np.savetxt(ppath, policy, delimiter=",", fmt="%.17g")
    if not os.path.exists(spath):
        with open(spath, "w") as fh:
            json.dump({"signature": signature}, fh)


def backward_induction(problem: ControlProblem, grid: StagedGrid, kind,
                       cfg: EngineConfig = EngineConfig()) -> SolutionBundle:
    """Evaluate the chosen stage operator at every node, stage K-1 down to 0.

    Deterministic for identical inputs and seeds.  Stage tables are written
    to cfg.checkpoint_dir as they complete and reloaded on rerun when the
    configuration signature matches.
    """
    kind = _coerce_kind(kind)
    if kind is OperatorKind.CONVEX:
        problem.require_convex_route()
    elif kind is not OperatorKind.BILEVEL:
        raise ValueError("backward induction runs the convex or bilevel operator")
    if problem.horizon != grid.horizon:
        raise ValueError("problem and grid horizons differ")
    if cfg.check_inclusion:
        validate_inclusion(problem, grid, cfg.inclusion_samples,
                           cfg.seed).require()
    set_worker_threads(cfg.workers if cfg.workers else default_workers())

    K = grid.horizon
    signature = _config_signature(problem, grid, kind, cfg)
    term = np.asarray(problem.terminal_cost(grid.stage_nodes(K)), float)
    tables = [None] * (K + 1)
    tables[K] = ValueTable(K, term, kind, grid)
    policies = [None] * K
    stats = [None] * K

    for t in range(K - 1, -1, -1):
        tic = time.perf_counter()
        M = grid.node_count(t)
        resumed = None
        if cfg.checkpoint_dir:
            resumed = _try_resume(cfg, signature, t, problem.m)
        if resumed is not None:
            values, policy = resumed
            iters_total = 0
        elif kind is OperatorKind.CONVEX:
            env = tables[t + 1].envelope()
            X = grid.stage_nodes(t)
            status, values, policy, facets, iters = _run_hat_stage(
                problem, env, X, cfg.solver)
            bad = np.nonzero(status != kernels.OPTIMAL)[0]
            if bad.size:
                _raise_hat_status(
                    int(status[bad[0]]),
                    f"stage {t}, node {int(bad[0])} at {X[bad[0]]!r}")
            iters_total = int(iters.sum())
        else:
            values, policy, iters_total = _bilevel_stage(
                problem, grid, t, tables[t + 1].node_values, cfg)
        tables[t] = ValueTable(t, values, kind, grid)
        policies[t] = policy
        stats[t] = {
            "stage": t,
            "nodes": int(M),
            "seconds": time.perf_counter() - tic,
            "solver_iterations": int(iters_total),
            "resumed": resumed is not None,
        }
        if cfg.checkpoint_dir and resumed is None:
            _save_checkpoint(cfg, signature, t, values, policy)
    return SolutionBundle(problem, grid, kind, tables, policies, stats, cfg)


def _bilevel_stage(problem, grid, t, next_values, cfg: EngineConfig):
    """Chunked enumeration sweep for one stage; returns (values, policy)."""
    aset = problem.action_set
    state_dependent = isinstance(aset, BoxActionSet) and aset.bounds_fn is not None
    X = grid.stage_nodes(t)
    M = X.shape[0]
    values = np.empty(M)
    policy = np.empty((M, problem.m))
    if state_dependent:
        from .operators import bilevel_bellman
        for i in range(M):
            values[i], policy[i] = bilevel_bellman(
                problem, grid, t, ValueTable(t + 1, next_values,
                                             OperatorKind.BILEVEL, grid),
                X[i], cfg.action_grid, cfg.solver)
        return values, policy, 0
    cand = action_candidates(problem, None, cfg.action_grid)
    rows_per_node = cand.shape[0] * problem.disturbance.n_samples
    chunk = max(1, cfg.batch_rows // rows_per_node)
    iters_total = 0
    for lo in range(0, M, chunk):
        Xb = X[lo:lo + chunk]
        scores, status, iters = _run_tilde_stage(
            problem, grid, t, next_values, Xb, cand, cfg.solver)
        bad = np.nonzero(status != 0)[0]
        if bad.size:
            raise PointOutsideDomain(
                f"stage {t}, node {lo + int(bad[0])}: next state left the "
                f"stage {t + 1} box (status {int(status[bad[0]])})")
        ks = np.argmin(scores, axis=1)
        values[lo:lo + Xb.shape[0]] = scores[np.arange(Xb.shape[0]), ks]
        policy[lo:lo + Xb.shape[0]] = cand[ks]
        iters_total += int(iters.sum())
    return values, policy, iters_total


# ---------------------------------------------------------------------------
# Lipschitz estimates and the stage-sum error bound
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LipschitzEstimate:
    """Per-stage max pairwise slope of stage-covering cell corner values."""

    values: np.ndarray      # (K+1,), entry k covers stage k

    def __getitem__(self, k: int) -> float:
        return float(self.values[k])


def estimate_lipschitz(grid: StagedGrid, table: ValueTable) -> float:
    """Max |dv| / |dx| over corner pairs of the stage's covering cells."""
    t = table.stage
    nc = grid.cell_count(t)
    n = grid.dims
    nv = 1 << n
    cl = grid.cell_lattice[:nc]
    corner_vals = np.empty((nc, nv))
    for k in range(nv):
        flat = np.zeros(nc, np.int64)
        for a in range(n):
            flat += (cl[:, a] + ((k >> a) & 1)) * grid.lat_strides[a]
        corner_vals[:, k] = table.node_values[grid.lattice_ids[flat]]
    spacing = np.asarray(grid.spacing, float)
    best = 0.0
    for k1 in range(nv):
        for k2 in range(k1 + 1, nv):
            diff_bits = np.array([(k1 >> a) & 1 ^ (k2 >> a) & 1 for a in range(n)])
            dist = float(np.linalg.norm(spacing * diff_bits))
            slope = np.max(np.abs(corner_vals[:, k1] - corner_vals[:, k2])) / dist
            if slope > best:
                best = float(slope)
    return best


def lipschitz_estimates(grid: StagedGrid, tables) -> LipschitzEstimate:
    vals = np.zeros(grid.horizon + 1)
    for k, tb in enumerate(tables):
        arr = tb.node_values if isinstance(tb, ValueTable) else np.asarray(tb, float)
        vals[k] = estimate_lipschitz(
            grid, tb if isinstance(tb, ValueTable)
            else ValueTable(k, arr, OperatorKind.EXACT, grid))
    return LipschitzEstimate(vals)


def error_bound(lip: LipschitzEstimate, delta: float, t: int,
                doubled: bool = False) -> float:
    """Sum of stage Lipschitz constants times the mesh size, from t+1 on."""
    total = float(np.sum(lip.values[t + 1:]) * delta)
    return 2.0 * total if doubled else total


# ---------------------------------------------------------------------------
# policy evaluation: Monte Carlo rollout and exact tree recursion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostStats:
    mean: float
    stderr: float
    min: float
    max: float
    n_paths: int


def _check_inside(grid, t, X):
    lo, hi = grid.domain.box(t)
    tol = 1e-9 * (hi - lo)
    if np.any(X < lo - tol) or np.any(X > hi + tol):
        raise PointOutsideDomain(
            f"trajectory left box({t}); inclusion violated for this policy")


def rollout(problem: ControlProblem, handles, x0, n_paths: int,
            seed: int) -> CostStats:
    """Simulate n_paths trajectories under the stage policies from x0.

    Disturbances are drawn from the finite support with the seeded
    generator; the mean is an unbiased estimate of the policy cost-to-go.
    """
    t0 = handles[0].stage
    grid = handles[0].bundle.grid
    K = problem.horizon
    if len(handles) != K - t0:
        raise ValueError("need one policy handle per remaining stage")
    x0 = np.asarray(x0, float)
    _check_inside(grid, t0, x0.reshape(1, -1))
    rng = np.random.default_rng(seed)
    X = np.broadcast_to(x0, (n_paths, problem.n)).copy()
    total = np.zeros(n_paths)
    xi = problem.disturbance.support
    for k, t in enumerate(range(t0, K)):
        U = handles[k].query_batch(X)
        total += problem.stage_cost.batch(X, U)
        s_idx = rng.choice(xi.shape[0], size=n_paths, p=problem.disturbance.probs)
        X = problem.dynamics.batch(X, U, xi[s_idx])
        _check_inside(grid, t + 1, X)
    total += problem.terminal_cost(X)
    stderr = float(total.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
    return CostStats(float(total.mean()), stderr, float(total.min()),
                     float(total.max()), n_paths)


def exact_policy_value(problem: ControlProblem, handles, x, t: int,
                       cap: int = 10 ** 6) -> float:
    """Exact expected policy cost by full disturbance-tree expansion."""
    K = problem.horizon
    N = problem.disturbance.n_samples
    if N ** (K - t) > cap:
        raise TreeTooLarge(
            f"{N}^{K - t} leaves exceed the cap {cap}; use rollout instead")
    x = np.asarray(x, float)
    if t == K:
        return float(problem.terminal_cost(x.reshape(1, -1))[0])
    X = x.reshape(1, -1)
    W = np.ones(1)
    xi = problem.disturbance.support
    probs = problem.disturbance.probs
    total = 0.0
    for k, tau in enumerate(range(t, K)):
        U = handles[k].query_batch(X)
        total += float(W @ problem.stage_cost.batch(X, U))
        B = X.shape[0]
        Xr = np.repeat(X, N, axis=0)
        Ur = np.repeat(U, N, axis=0)
        Xir = np.tile(xi, (B, 1))
        X = problem.dynamics.batch(Xr, Ur, Xir)
        W = (W[:, None] * probs[None, :]).ravel()
    total += float(W @ problem.terminal_cost(X))
    return total


# ---------------------------------------------------------------------------
# a-posteriori suboptimality gap
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GapReport:
    policy_value: float         # estimated cost-to-go of the policy at x0
    policy_stderr: float        # 0 for exact tree evaluation
    table_value: float          # per-state program value at x0
    lipschitz_sum: float        # sum of estimated stage constants times delta
    bound: float                # policy_value - table_value + lipschitz_sum
    bound_ci_halfwidth: float   # 1.96 * stderr
    method: str                 # "tree" or "rollout"


def aposteriori_gap(problem: ControlProblem, bundle: SolutionBundle, x0,
                    n_paths: int = 10_000, seed: int = 0,
                    tree_cap: int = 10 ** 6) -> GapReport:
    """Observable suboptimality bound for the convex-route policy at x0.

    The Lipschitz constants are estimated from the computed tables, so the
    reported bound is itself an estimate.
    """
    if bundle.kind is not OperatorKind.CONVEX:
        raise NotConvexEligible("the gap bound applies to convex-route bundles")
    x0 = np.asarray(x0, float)
    handles = bundle.policy_handles(0)
    N = problem.disturbance.n_samples
    K = problem.horizon
    if N ** K <= tree_cap:
        v_pi = exact_policy_value(problem, handles, x0, 0, tree_cap)
        stderr = 0.0
        method = "tree"
    else:
        st = rollout(problem, handles, x0, n_paths, seed)
        v_pi, stderr = st.mean, st.stderr
        method = "rollout"
    v_hat = convex_bellman(problem, bundle.grid, 0, bundle.tables[1], x0,
                           bundle.config.solver, with_weights=False).value
    lip = lipschitz_estimates(bundle.grid, bundle.tables)
    lsum = error_bound(lip, bundle.grid.delta, 0)
    return GapReport(float(v_pi), float(stderr), float(v_hat), float(lsum),
                     float(v_pi - v_hat + lsum), 1.96 * float(stderr), method)


# ---------------------------------------------------------------------------
# fast whole-grid policy evaluation for scalar-action convex bundles
# ---------------------------------------------------------------------------


class ScalarActionPolicy:
    """Compiled stage policies for m = n = 1 convex bundles.

    Replaces the per-query master QP with an exact fixed-point/bisection
    minimizer against the next table's piecewise-linear envelope; action
    precision ~1e-9 (value error second order).  Cross-checked against the
    QP policy in the test suite.
    """

    def __init__(self, bundle: SolutionBundle):
        p = bundle.problem
        if p.m != 1 or p.n != 1 or bundle.kind is not OperatorKind.CONVEX:
            raise NotConvexEligible("fast policy needs m = n = 1 convex bundles")
        if not isinstance(p.stage_cost, QuadraticActionCost):
            raise NotConvexEligible("fast policy needs a quadratic action cost")
        aset = p.action_set
        if not isinstance(aset, BoxActionSet) or aset.bounds_fn is not None:
            raise NotConvexEligible("fast policy needs a static box action set")
        self.bundle = bundle
        self.problem = p
        self.r_quad = float(np.asarray(p.stage_cost.action_weight).reshape(()))
        lin = p.stage_cost.action_linear
        self.r_lin = 0.0 if lin is None else float(np.asarray(lin).reshape(()))
        self.lo = float(aset.lower[0])
        self.hi = float(aset.upper[0])
        self._pieces = {}

    def _stage_pieces(self, t_next: int):
        if t_next not in self._pieces:
            env = self.bundle.tables[t_next].envelope()
            planes = env.planes
            if planes.shape[0] == 1:
                bx = np.array([-np.inf, np.inf])
                pa = planes[:, 0].copy()
            else:
                order = np.argsort(planes[:, 0], kind="stable")
                a = planes[order, 0]
                b = planes[order, 1]
                # consecutive slopes intersect at the piece breakpoints
                bx = np.empty(a.shape[0] + 1)
                bx[0], bx[-1] = -np.inf, np.inf
                bx[1:-1] = -(np.diff(b)) / np.diff(a)
                pa = a
            self._pieces[t_next] = (np.ascontiguousarray(bx),
                                    np.ascontiguousarray(pa))
        return self._pieces[t_next]

    def query_batch(self, t: int, X) -> np.ndarray:
        X = np.asarray(X, float).reshape(-1, 1)
        xi = self.problem.disturbance.support
        N = xi.shape[0]
        B = X.shape[0]
        Gd = np.empty((B, N))
        Hd = np.empty((B, N))
        for s in range(N):
            Xi = np.broadcast_to(xi[s], (B, xi.shape[1]))
            G, H = self.problem.dynamics.drift_gain(X, Xi)
            Gd[:, s] = G[:, 0]
            Hd[:, s] = np.asarray(H).reshape(B, -1)[:, 0]
        bx, pa = self._stage_pieces(t + 1)
        u = kernels.policy_min_quad_1d(
            Gd, Hd, self.r_quad, self.r_lin, self.lo, self.hi,
            self.problem.disturbance.probs, bx, pa, 12, 48)
        return u.reshape(-1, 1)


def policy_cost_tables(problem: ControlProblem, bundle: SolutionBundle,
                       n_paths: int = 10_000, seed: int = 0,
                       tree_cap: int = 10 ** 6, fast: bool = True):
    """Policy cost-to-go at every node of every stage.

    Uses exact tree expansion when N^(K-t) fits under the cap, otherwise a
    seeded rollout; returns (values, stderrs) as lists of per-stage arrays.
    Scalar-action convex bundles use the compiled policy minimizer.
    """
    grid = bundle.grid
    K = grid.horizon
    N = problem.disturbance.n_samples
    xi = problem.disturbance.support
    probs = problem.disturbance.probs

    fast_policy = None
    if fast:
        try:
            fast_policy = ScalarActionPolicy(bundle)
        except NotConvexEligible:
            fast_policy = None

    def policy_batch(t, X):
        if fast_policy is not None:
            return fast_policy.query_batch(t, X)
        return bundle.policy(t).query_batch(X)

    values = [None] * (K + 1)
    stderrs = [None] * (K + 1)
    values[K] = np.asarray(problem.terminal_cost(grid.stage_nodes(K)), float)
    stderrs[K] = np.zeros_like(values[K])

    for t in range(K - 1, -1, -1):
        Xn = grid.stage_nodes(t)
        M = Xn.shape[0]
        if N ** (K - t) <= tree_cap:
            # exact tree, expanded level by level; nodes chunked so the
            # deepest level stays within a few million rows
            leaves = N ** (K - t)
            chunk = max(1, int(2_000_000 // leaves))
            total = np.empty(M)
            for lo in range(0, M, chunk):
                X = Xn[lo:lo + chunk].copy()
                Mb = X.shape[0]
                W = np.ones(1)
                tot = np.zeros(Mb)
                for tau in range(t, K):
                    B = X.shape[0] // Mb
                    U = policy_batch(tau, X)
                    r = problem.stage_cost.batch(X, U)
                    tot += (r.reshape(Mb, B) * W).sum(axis=1)
                    Xr = np.repeat(X, N, axis=0)
                    Ur = np.repeat(U, N, axis=0)
                    Xir = np.tile(xi, (X.shape[0], 1))
                    X = problem.dynamics.batch(Xr, Ur, Xir)
                    W = (W[:, None] * probs[None, :]).ravel()
                q = problem.terminal_cost(X).reshape(Mb, -1)
                tot += (q * W).sum(axis=1)
                total[lo:lo + Mb] = tot
            values[t] = total
            stderrs[t] = np.zeros(M)
        else:
            rng = np.random.default_rng([seed, t])
            steps = K - t
            s_idx = rng.choice(N, size=(n_paths, steps), p=probs)
            X = np.repeat(Xn, n_paths, axis=0)
            total = np.zeros(M * n_paths)
            for k, tau in enumerate(range(t, K)):
                U = policy_batch(tau, X)
                total += problem.stage_cost.batch(X, U)
                Xi = xi[np.tile(s_idx[:, k], M)]
                X = problem.dynamics.batch(X, U, Xi)
            total += problem.terminal_cost(X)
            total = total.reshape(M, n_paths)
            values[t] = total.mean(axis=1)
            stderrs[t] = total.std(axis=1, ddof=1) / np.sqrt(n_paths)
    return values, stderrs


# ---------------------------------------------------------------------------
# serialization: CSV tables with a JSON sidecar
# ---------------------------------------------------------------------------


def save_bundle(bundle: SolutionBundle, out_dir: str, seeds=None,
                wall_time: float = None):
    """Write values.csv / policy.csv plus a JSON sidecar; 17 significant
    digits so re-reading reproduces the arrays bit-exactly."""
    import os
    os.makedirs(out_dir, exist_ok=True)
    grid = bundle.grid
    n = grid.dims
    m = bundle.problem.m
    vpath = os.path.join(out_dir, "values.csv")
    with open(vpath, "w") as fh:
        fh.write("stage,node_id," + ",".join(f"x_{a + 1}" for a in range(n))
                 + ",value\n")
        for t, tb in enumerate(bundle.tables):
            X = grid.stage_nodes(t)
            for i in range(X.shape[0]):
                coords = ",".join("%.17g" % c for c in X[i])
                fh.write(f"{t},{i},{coords},{'%.17g' % tb.node_values[i]}\n")
    ppath = os.path.join(out_dir, "policy.csv")
    with open(ppath, "w") as fh:
        fh.write("stage,node_id," + ",".join(f"x_{a + 1}" for a in range(n))
                 + "," + ",".join(f"u_{j + 1}" for j in range(m)) + "\n")
        for t, pol in enumerate(bundle.policy_at_nodes):
            X = grid.stage_nodes(t)
            for i in range(X.shape[0]):
                coords = ",".join("%.17g" % c for c in X[i])
                us = ",".join("%.17g" % v for v in pol[i])
                fh.write(f"{t},{i},{coords},{us}\n")
    sidecar = {
        "operator_kind": bundle.kind.value,
        "grid": {
            "dims": grid.dims,
            "horizon": grid.horizon,
            "lower": grid.domain.lower.tolist(),
            "upper": grid.domain.upper.tolist(),
            "spacing": np.asarray(grid.spacing, float).tolist(),
            "delta": grid.delta,
            "stage_node_counts": grid.stage_counts.tolist(),
        },
        "solver": {
            "kkt_tol": bundle.config.solver.kkt_tol,
            "max_iter": bundle.config.solver.max_iter,
            "lp_pivot_tol": bundle.config.solver.lp_pivot_tol,
        },
        "seeds": seeds if seeds is not None else {"engine": bundle.config.seed},
        "backend": BACKEND_NAME,
        "stage_stats": bundle.stats,
        "wall_time_seconds": wall_time,
    }
    with open(os.path.join(out_dir, "values.json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    return vpath, ppath


def read_value_csv(path: str):
    """Read a values.csv back into per-stage arrays (bit-exact round trip)."""
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    stages = raw[:, 0].astype(int)
    out = {}
    for t in np.unique(stages):
        rows = raw[stages == t]
        order = np.argsort(rows[:, 1].astype(int), kind="stable")
        out[int(t)] = rows[order, -1]
    return out
