"""Problem description types and the stage operators.

Three ways to push a value table one stage back:

* oracle_bellman       - brute force over a finite action sample; converges
                         to the true stage operator as the sample refines.
                         Test oracle, also usable for reference solutions.
* convex_bellman       - the per-state convex program whose weight variables
                         spread each next state over all next-stage nodes;
                         solved exactly by minimizing over actions against
                         the lower envelope of the node values.
* bilevel_bellman      - outer action enumeration, inner per-cell linear
                         program over the containing cell's corners only.

All batched callables receive (B, dim) arrays and return (B, ...) arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np

from . import kernels
from .envelope import ValueEnvelope, build_envelope
from .errors import (EmptyActionGrid, EmptyActionSet, InfeasibleProgram,
                     NotConvexEligible, PointOutsideDomain, SolverFailure)
from .geometry import StagedGrid
from .solver import SolverConfig

MAX_CUT_ROUNDS = 40
CUT_TOL = 1e-9


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineDynamics:
    """x' = A x + B u + C xi."""

    a_mat: np.ndarray
    b_mat: np.ndarray
    c_mat: np.ndarray

    def batch(self, X, U, Xi):
        return X @ self.a_mat.T + U @ self.b_mat.T + Xi @ self.c_mat.T

    def drift_gain(self, X, Xi):
        """Per-row decomposition x' = drift + gain @ u."""
        G = X @ self.a_mat.T + Xi @ self.c_mat.T
        H = np.broadcast_to(self.b_mat, (X.shape[0],) + self.b_mat.shape)
        return G, H


@dataclass(frozen=True)
class ControlAffineDynamics:
    """x' = drift(x, xi) + gain(x, xi) @ u with batched callables."""

    drift: Callable
    gain: Callable

    def batch(self, X, U, Xi):
        return self.drift(X, Xi) + np.einsum("bij,bj->bi", self.gain(X, Xi), U)

    def drift_gain(self, X, Xi):
        return self.drift(X, Xi), self.gain(X, Xi)


@dataclass(frozen=True)
class GeneralDynamics:
    """Arbitrary measurable transition, batched: step(X, U, Xi) -> X'."""

    step: Callable

    def batch(self, X, U, Xi):
        return self.step(X, U, Xi)


# ---------------------------------------------------------------------------
# costs and action sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadraticActionCost:
    """r(x, u) = state_fn(x) + u' W u + l' u (W positive semidefinite)."""

    state_fn: Callable
    action_weight: np.ndarray
    action_linear: Optional[np.ndarray] = None

    def batch(self, X, U):
        out = np.asarray(self.state_fn(X), float)
        out = out + np.einsum("bi,ij,bj->b", U, self.action_weight, U)
        if self.action_linear is not None:
            out = out + U @ self.action_linear
        return out


@dataclass(frozen=True)
class GeneralCost:
    fn: Callable
    convex_in_action: bool = False

    def batch(self, X, U):
        return np.asarray(self.fn(X, U), float)


@dataclass(frozen=True)
class BoxActionSet:
    lower: np.ndarray
    upper: np.ndarray
    bounds_fn: Optional[Callable] = None   # x -> (lower, upper)

    def bounds_at(self, x):
        if self.bounds_fn is None:
            return self.lower, self.upper
        return self.bounds_fn(np.asarray(x, float))


@dataclass(frozen=True)
class FiniteActionSet:
    actions: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "actions",
                           np.atleast_2d(np.asarray(self.actions, float)))
        if self.actions.shape[0] == 0:
            raise EmptyActionSet("finite action set has no members")


@dataclass(frozen=True)
class LinearIneqActionSet:
    """{u : A(x) u <= b(x)}; static arrays or per-state callables."""

    coeff: np.ndarray | Callable
    rhs: np.ndarray | Callable
    box_hint: Optional[tuple] = None       # optional enclosing (lower, upper)

    def rows_at(self, x):
        A = self.coeff(x) if callable(self.coeff) else self.coeff
        b = self.rhs(x) if callable(self.rhs) else self.rhs
        return np.atleast_2d(np.asarray(A, float)), np.atleast_1d(np.asarray(b, float))

    def bounding_box(self):
        if self.box_hint is None:
            raise ValueError("linear-inequality action set needs box_hint for sampling")
        return self.box_hint


@dataclass(frozen=True)
class FiniteDisturbance:
    support: np.ndarray    # (N, l)
    probs: np.ndarray      # (N,)

    def __post_init__(self):
        sup = np.atleast_2d(np.asarray(self.support, float))
        pr = np.atleast_1d(np.asarray(self.probs, float))
        object.__setattr__(self, "support", sup)
        object.__setattr__(self, "probs", pr)
        if sup.shape[0] != pr.shape[0] or sup.shape[0] < 1:
            raise ValueError("support and probs must align, with N >= 1")
        if np.any(pr < -1e-15) or np.any(pr > 1 + 1e-15):
            raise ValueError("probabilities must lie in [0, 1]")
        if abs(pr.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {pr.sum()!r}, not 1")

    @property
    def n_samples(self) -> int:
        return self.support.shape[0]


# ---------------------------------------------------------------------------
# the control problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ControlProblem:
    n: int
    m: int
    horizon: int
    dynamics: object
    stage_cost: object
    terminal_cost: Callable
    action_set: object
    disturbance: FiniteDisturbance
    name: str = ""

    def __post_init__(self):
        l = self.disturbance.support.shape[1]
        if isinstance(self.dynamics, AffineDynamics):
            d = self.dynamics
            if d.a_mat.shape != (self.n, self.n) or d.b_mat.shape != (self.n, self.m) \
                    or d.c_mat.shape != (self.n, l):
                raise ValueError("affine dynamics matrices do not match (n, m, l)")
        if isinstance(self.action_set, FiniteActionSet) \
                and self.action_set.actions.shape[1] != self.m:
            raise ValueError("finite actions must have m columns")
        if isinstance(self.action_set, BoxActionSet) and self.action_set.bounds_fn is None:
            if self.action_set.lower.shape != (self.m,) or self.action_set.upper.shape != (self.m,):
                raise ValueError("box action bounds must have length m")

    @property
    def convex_program_eligible(self) -> bool:
        """Affine or control-affine dynamics with a convex action set."""
        dyn_ok = isinstance(self.dynamics, (AffineDynamics, ControlAffineDynamics))
        act_ok = isinstance(self.action_set, (BoxActionSet, LinearIneqActionSet))
        return dyn_ok and act_ok

    def require_convex_route(self):
        if not self.convex_program_eligible:
            raise NotConvexEligible(
                "convex route needs affine/control-affine dynamics and a "
                "box or linear-inequality action set; use the bilevel route")
        if not isinstance(self.stage_cost, QuadraticActionCost):
            raise NotConvexEligible(
                "convex route needs a quadratic-in-action stage cost "
                "(state term + u'Wu + l'u)")


class OperatorKind(Enum):
    CONVEX = "convex"
    BILEVEL = "bilevel"
    EXACT = "exact"


@dataclass
class ValueTable:
    stage: int
    node_values: np.ndarray
    operator_kind: OperatorKind
    grid: StagedGrid
    _env: Optional[ValueEnvelope] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.node_values = np.asarray(self.node_values, float)
        if self.node_values.shape[0] != self.grid.node_count(self.stage):
            raise ValueError("table length must equal the stage node count")
        if not np.all(np.isfinite(self.node_values)):
            raise ValueError("table values must be finite")

    @classmethod
    def from_callable(cls, grid: StagedGrid, stage: int, fn,
                      kind: OperatorKind = OperatorKind.EXACT) -> "ValueTable":
        vals = np.asarray(fn(grid.stage_nodes(stage)), float)
        return cls(stage, vals, kind, grid)

    def envelope(self) -> ValueEnvelope:
        if self._env is None:
            self._env = build_envelope(self.grid, self.stage, self.node_values)
        return self._env


# ---------------------------------------------------------------------------
# brute-force oracle
# ---------------------------------------------------------------------------


def oracle_bellman(problem: ControlProblem, value_fn: Callable, x, action_grid):
    """min over the action sample of cost plus expected next value.

    value_fn must accept a (B, n) batch.  Over-approximates the true stage
    operator; refines to it as the action sample does.
    Returns (value, best_action).
    """
    actions = np.atleast_2d(np.asarray(action_grid, float))
    if actions.shape[0] == 0:
        raise EmptyActionGrid("oracle needs at least one action candidate")
    x = np.asarray(x, float)
    A = actions.shape[0]
    xi = problem.disturbance.support
    N = xi.shape[0]
    X = np.broadcast_to(x, (A * N, problem.n))
    U = np.repeat(actions, N, axis=0)
    Xi = np.tile(xi, (A, 1))
    Y = problem.dynamics.batch(X, U, Xi)
    vals = np.asarray(value_fn(Y), float).reshape(A, N)
    exp_next = vals @ problem.disturbance.probs
    costs = problem.stage_cost.batch(np.broadcast_to(x, (A, problem.n)), actions)
    total = costs + exp_next
    k = int(np.argmin(total))
    return float(total[k]), actions[k].copy()


# ---------------------------------------------------------------------------
# convex route
# ---------------------------------------------------------------------------


def _hat_inputs(problem: ControlProblem, x_batch):
    """Per-node drift/gain arrays and cost/action data for the stage kernel."""
    X = np.atleast_2d(np.asarray(x_batch, float))
    B = X.shape[0]
    xi = problem.disturbance.support
    N = xi.shape[0]
    n, m = problem.n, problem.m

    Gd = np.empty((B, N, n))
    Hd = np.empty((B, N, n, m))
    for s in range(N):
        Xi = np.broadcast_to(xi[s], (B, xi.shape[1]))
        G, H = problem.dynamics.drift_gain(X, Xi)
        Gd[:, s, :] = G
        Hd[:, s, :, :] = np.broadcast_to(H, (B, n, m))

    cost = problem.stage_cost
    state_cost = np.asarray(cost.state_fn(X), float)
    R2 = 2.0 * np.asarray(cost.action_weight, float)
    c_u = np.zeros(m) if cost.action_linear is None else np.asarray(cost.action_linear, float)

    aset = problem.action_set
    if isinstance(aset, BoxActionSet):
        if aset.bounds_fn is None:
            u_lo = np.broadcast_to(aset.lower, (B, m)).copy()
            u_hi = np.broadcast_to(aset.upper, (B, m)).copy()
        else:
            u_lo = np.empty((B, m))
            u_hi = np.empty((B, m))
            for i in range(B):
                lo, hi = aset.bounds_at(X[i])
                u_lo[i], u_hi[i] = lo, hi
        E = np.zeros((0, m))
        e_rhs = np.zeros((B, 0))
    else:
        u_lo = np.full((B, m), -np.inf)
        u_hi = np.full((B, m), np.inf)
        A0, b0 = aset.rows_at(X[0])
        E = A0
        e_rhs = np.empty((B, A0.shape[0]))
        for i in range(B):
            Ai, bi = aset.rows_at(X[i])
            if Ai.shape != A0.shape or not np.array_equal(Ai, A0):
                raise NotConvexEligible(
                    "state-dependent inequality coefficients are not supported "
                    "in batched solves; only the right-hand side may vary")
            e_rhs[i] = bi
    return X, Gd, Hd, state_cost, R2, c_u, u_lo, u_hi, E, e_rhs


def _run_hat_stage(problem, env: ValueEnvelope, x_batch,
                   cfg: SolverConfig):
    X, Gd, Hd, state_cost, R2, c_u, u_lo, u_hi, E, e_rhs = _hat_inputs(problem, x_batch)
    grid = env.grid
    return kernels.hat_stage(
        Gd, Hd, state_cost, R2, c_u, u_lo, u_hi, E, e_rhs,
        problem.disturbance.probs,
        env.planes, env.cell_ptr, env.cell_idx,
        grid.axis_lo, grid.axis_inv_h, env.w_lo, env.w_hi, env.snap,
        env.cstrides,
        MAX_CUT_ROUNDS, cfg.max_iter, cfg.kkt_tol, CUT_TOL)


_HAT_STATUS_ERRORS = {
    kernels.OUTSIDE_DOMAIN: (PointOutsideDomain,
                             "a next state left the stage box (inclusion violated?)"),
    kernels.INFEASIBLE: (InfeasibleProgram, "per-state program infeasible"),
    kernels.ITERATION_LIMIT: (SolverFailure, "master program hit the iteration limit"),
    kernels.NUMERICAL_FAILURE: (SolverFailure, "master program failed numerically"),
}


def _raise_hat_status(code: int, context: str):
    exc, msg = _HAT_STATUS_ERRORS.get(
        code, (SolverFailure, f"unexpected solver status {code}"))
    raise exc(f"{msg} [{context}]")


@dataclass
class ConvexBellmanResult:
    value: float
    action: np.ndarray
    weights: list     # per sample: (node_ids, weights)


def convex_bellman(problem: ControlProblem, grid: StagedGrid, stage: int,
                   next_table: ValueTable, x,
                   cfg: SolverConfig = SolverConfig(),
                   with_weights: bool = True,
                   neighbor_restricted: bool = False,
                   action_grid=None) -> ConvexBellmanResult:
    """Per-state convex program against the next-stage node values.

    The weight blocks are minimized out exactly: at fixed action the
    cheapest all-node convex combination equals the lower envelope of the
    node values at the reached state, so the program reduces to a small
    cutting-plane QP over the action alone.  Same optimum, same optimal
    action, recoverable weights.

    neighbor_restricted=True limits each weight block to the corners of
    the cell containing its next state, which at any fixed action is
    exactly the bilevel operator's inner program; the call then delegates
    to the bilevel route (continuous action sets need `action_grid`).
    """
    if neighbor_restricted:
        val, u = bilevel_bellman(problem, grid, stage, next_table, x,
                                 action_grid, cfg)
        return ConvexBellmanResult(val, u, [])
    problem.require_convex_route()
    if next_table.stage != stage + 1:
        raise ValueError("next_table must hold stage t+1 values")
    x = np.asarray(x, float)
    if not grid.domain.contains(stage, x):
        raise PointOutsideDomain(f"{x!r} outside stage {stage} box")
    env = next_table.envelope()
    status, values, u_out, facets, iters = _run_hat_stage(
        problem, env, x.reshape(1, -1), cfg)
    if int(status[0]) != kernels.OPTIMAL:
        _raise_hat_status(int(status[0]), f"stage {stage}, state {x!r}")
    weights = []
    if with_weights:
        xi = problem.disturbance.support
        Xi = np.broadcast_to(x, (xi.shape[0], problem.n))
        G, H = problem.dynamics.drift_gain(Xi, xi)
        for s in range(xi.shape[0]):
            y = G[s] + H[s] @ u_out[0]
            ids, w = env.support(y)
            weights.append((ids, w))
    return ConvexBellmanResult(float(values[0]), u_out[0].copy(), weights)


# ---------------------------------------------------------------------------
# bilevel route
# ---------------------------------------------------------------------------


def action_candidates(problem: ControlProblem, x=None, action_grid=None) -> np.ndarray:
    """Finite action list for enumeration routes.

    Finite sets enumerate themselves; box sets are gridded with `action_grid`
    points per axis (int or per-axis counts), endpoints included.
    """
    aset = problem.action_set
    if isinstance(aset, FiniteActionSet):
        return aset.actions
    if isinstance(aset, BoxActionSet):
        if action_grid is None:
            raise EmptyActionGrid(
                "box action sets need action_grid counts for enumeration")
        counts = np.broadcast_to(np.asarray(action_grid, int), (problem.m,))
        if np.any(counts < 1):
            raise EmptyActionGrid("action_grid counts must be >= 1")
        lo, hi = (aset.lower, aset.upper) if x is None else aset.bounds_at(x)
        axes = [np.linspace(lo[j], hi[j], counts[j]) for j in range(problem.m)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)
    raise EmptyActionSet(
        f"cannot enumerate actions of {type(aset).__name__}")


def _run_tilde_stage(problem, grid, stage, node_values, X, cand,
                     cfg: SolverConfig):
    """Scores (B, A) for states X against candidate actions."""
    B = X.shape[0]
    A = cand.shape[0]
    xi = problem.disturbance.support
    N = xi.shape[0]
    Xr = np.repeat(X, A * N, axis=0)
    Ur = np.tile(np.repeat(cand, N, axis=0), (B, 1))
    Xir = np.tile(xi, (B * A, 1))
    Y = problem.dynamics.batch(Xr, Ur, Xir).reshape(B, A, N, problem.n)
    Rb = problem.stage_cost.batch(
        np.repeat(X, A, axis=0), np.tile(cand, (B, 1))).reshape(B, A)
    win = grid.stage_windows[stage + 1]
    scores, status, iters = kernels.tilde_stage(
        np.ascontiguousarray(Y), np.ascontiguousarray(Rb),
        problem.disturbance.probs, node_values,
        grid.lattice_ids, grid.lat_strides,
        grid.axis_lo, grid.axis_inv_h,
        np.ascontiguousarray(win[:, 0]), np.ascontiguousarray(win[:, 1]),
        grid.snap_units(stage + 1),
        cfg.max_iter, cfg.kkt_tol, cfg.lp_pivot_tol)
    return scores, status, iters


def cell_lp_expectation(problem: ControlProblem, grid: StagedGrid, stage: int,
                        next_table: ValueTable, x, u,
                        cfg: SolverConfig = SolverConfig()) -> float:
    """Expected cheapest-cell-weights value of the next state under u."""
    x = np.asarray(x, float).reshape(1, -1)
    u = np.asarray(u, float).reshape(1, -1)
    scores, status, _ = _run_tilde_stage(
        problem, grid, stage, next_table.node_values, x, u, cfg)
    if int(status[0]) == kernels.OUTSIDE_DOMAIN:
        raise PointOutsideDomain(
            f"a next state from {x[0]!r} with {u[0]!r} left the stage "
            f"{stage + 1} box")
    if int(status[0]) != 0:
        raise SolverFailure(f"inner cell program failed (status {int(status[0])})")
    # scores include the stage cost; remove it to return the expectation only
    r = float(problem.stage_cost.batch(x, u)[0])
    return float(scores[0, 0]) - r


def bilevel_bellman(problem: ControlProblem, grid: StagedGrid, stage: int,
                    next_table: ValueTable, x, action_grid=None,
                    cfg: SolverConfig = SolverConfig()):
    """Enumerated outer minimization over inner cell programs.

    Returns (value, action): the first minimizer in enumeration order.
    """
    x = np.asarray(x, float)
    if not grid.domain.contains(stage, x):
        raise PointOutsideDomain(f"{x!r} outside stage {stage} box")
    cand = action_candidates(problem, x, action_grid)
    scores, status, _ = _run_tilde_stage(
        problem, grid, stage, next_table.node_values, x.reshape(1, -1), cand, cfg)
    if int(status[0]) == kernels.OUTSIDE_DOMAIN:
        raise PointOutsideDomain(
            f"a next state from {x!r} left the stage {stage + 1} box")
    if int(status[0]) != 0:
        raise SolverFailure(f"inner cell program failed (status {int(status[0])})")
    k = int(np.argmin(scores[0]))
    return float(scores[0, k]), cand[k].copy()


# ---------------------------------------------------------------------------
# grid-interpolated reference dynamic programming (oracle tables)
# ---------------------------------------------------------------------------


def multilinear_interp(grid: StagedGrid, stage: int, node_values, Y) -> np.ndarray:
    """Multilinear interpolation of stage node values at the points Y."""
    Y = np.atleast_2d(np.asarray(Y, float))
    B, n = Y.shape
    win = grid.stage_windows[stage]
    snap = grid.snap_units(stage)
    iv = np.empty((B, n), np.int64)
    th = np.empty((B, n))
    for a in range(n):
        r = (Y[:, a] - grid.axis_lo[a]) * grid.axis_inv_h[a]
        bad = (r < win[a, 0] - snap[a]) | (r > win[a, 1] + snap[a])
        if np.any(bad):
            raise PointOutsideDomain(
                f"{int(bad.sum())} points outside stage {stage} box on axis {a}")
        i = np.floor(r).astype(np.int64)
        i[r - i >= 1.0 - snap[a]] += 1
        i = np.clip(i, win[a, 0], win[a, 1] - 1)
        iv[:, a] = i
        th[:, a] = np.clip(r - i, 0.0, 1.0)
    out = np.zeros(B)
    node_values = np.asarray(node_values, float)
    for k in range(1 << n):
        flat = np.zeros(B, np.int64)
        wk = np.ones(B)
        for a in range(n):
            bit = (k >> a) & 1
            flat += (iv[:, a] + bit) * grid.lat_strides[a]
            wk *= th[:, a] if bit else 1.0 - th[:, a]
        out += wk * node_values[grid.lattice_ids[flat]]
    return out


def oracle_tables(problem: ControlProblem, grid: StagedGrid, action_grid,
                  chunk: int = 4096):
    """Reference backward recursion: finite actions + multilinear lookup.

    Independent of the convex/bilevel machinery: the next-stage table is
    read by plain multilinear interpolation.  Returns one array per stage.
    """
    K = grid.horizon
    tables = [None] * (K + 1)
    tables[K] = np.asarray(problem.terminal_cost(grid.stage_nodes(K)), float)
    xi = problem.disturbance.support
    probs = problem.disturbance.probs
    N = xi.shape[0]
    for t in range(K - 1, -1, -1):
        X = grid.stage_nodes(t)
        M = X.shape[0]
        out = np.empty(M)
        for lo in range(0, M, chunk):
            Xb = X[lo:lo + chunk]
            B = Xb.shape[0]
            if isinstance(problem.action_set, FiniteActionSet):
                cand = problem.action_set.actions
            else:
                cand = action_candidates(problem, None, action_grid)
            A = cand.shape[0]
            Xr = np.repeat(Xb, A * N, axis=0)
            Ur = np.tile(np.repeat(cand, N, axis=0), (B, 1))
            Xir = np.tile(xi, (B * A, 1))
            Ynext = problem.dynamics.batch(Xr, Ur, Xir)
            v = multilinear_interp(grid, t + 1, tables[t + 1], Ynext)
            v = v.reshape(B, A, N) @ probs
            r = problem.stage_cost.batch(
                np.repeat(Xb, A, axis=0), np.tile(cand, (B, 1))).reshape(B, A)
            out[lo:lo + B] = np.min(r + v, axis=1)
        tables[t] = out
    return tables
