"""Dense LP and convex-QP solving behind explicit result contracts.

Two engines: a two-phase tableau simplex with Bland's anti-cycling rule
(vertex solutions, deterministic pivoting) and a Mehrotra predictor-
corrector interior-point method for quadratic objectives.  The contract is
the KKT residual carried on every result, not the algorithm.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import kernels
from .errors import PointOutsideCell
from .geometry import Cell, check_point_in_cell


class SolveStatus(Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    ITERATION_LIMIT = "iteration_limit"
    NUMERICAL_FAILURE = "numerical_failure"
    UNBOUNDED = "unbounded"


_STATUS_FROM_CODE = {
    kernels.OPTIMAL: SolveStatus.OPTIMAL,
    kernels.INFEASIBLE: SolveStatus.INFEASIBLE,
    kernels.ITERATION_LIMIT: SolveStatus.ITERATION_LIMIT,
    kernels.NUMERICAL_FAILURE: SolveStatus.NUMERICAL_FAILURE,
    kernels.UNBOUNDED: SolveStatus.UNBOUNDED,
}


@dataclass(frozen=True)
class SolverConfig:
    kkt_tol: float = 1e-8
    max_iter: int = 200
    lp_pivot_tol: float = 1e-9

    def __post_init__(self):
        if self.kkt_tol <= 0 or self.max_iter <= 0 or self.lp_pivot_tol <= 0:
            raise ValueError("SolverConfig fields must be positive")


@dataclass
class SolveResult:
    status: SolveStatus
    value: float
    x: np.ndarray
    kkt_residual: float
    iterations: int
    u_star: np.ndarray = None
    gamma_star: list = None
    duals: np.ndarray = None

    @property
    def optimal(self) -> bool:
        return self.status is SolveStatus.OPTIMAL


@dataclass
class StructuredProgram:
    """Joint action/weight program over box-times-simplex feasible sets.

    Variables are z = (u, gamma_1, ..., gamma_N); each gamma block carries
    the implicit constraints sum(gamma) = 1, gamma >= 0.  The objective is
    u'Qu + c'u + sum_s d_s . gamma_s, subject to Aeq_u u + Aeq_g gamma = beq
    plus optional u bounds and extra linear inequalities on u.
    """

    m: int
    gamma_blocks: list                      # [(size, node_id array), ...]
    Q: np.ndarray
    c: np.ndarray
    d: list                                 # per-block cost vectors
    Aeq_u: np.ndarray
    Aeq_g: np.ndarray
    beq: np.ndarray
    u_lower: np.ndarray = None
    u_upper: np.ndarray = None
    extra_ineq: tuple = None                # (A (k,m), b (k,)) on u

    def __post_init__(self):
        self.Q = np.asarray(self.Q, float)
        if self.Q.shape != (self.m, self.m):
            raise ValueError("Q must be m-by-m")
        if np.max(np.abs(self.Q - self.Q.T), initial=0.0) > 1e-12:
            raise ValueError("Q must be symmetric")
        if self.m > 0 and np.linalg.eigvalsh(self.Q).min() < -1e-10:
            raise ValueError("Q must be positive semidefinite (within 1e-10)")
        if self.u_lower is None:
            self.u_lower = np.full(self.m, -np.inf)
        if self.u_upper is None:
            self.u_upper = np.full(self.m, np.inf)
        sizes = [b[0] for b in self.gamma_blocks]
        if any(len(dv) != s for dv, s in zip(self.d, sizes)):
            raise ValueError("each d vector must match its block size")

    @property
    def n_gamma(self) -> int:
        return sum(b[0] for b in self.gamma_blocks)


def solve_lp(c, Aeq, beq, lower=None, upper=None,
             cfg: SolverConfig = SolverConfig()) -> SolveResult:
    """min c'x s.t. Aeq x = beq, lower <= x <= upper (entries may be inf).

    Returns a vertex solution; `duals` holds the equality multipliers.
    Deterministic for identical inputs (fixed Bland pivoting).
    """
    c = np.asarray(c, float)
    Aeq = np.atleast_2d(np.asarray(Aeq, float))
    beq = np.atleast_1d(np.asarray(beq, float))
    nv = c.shape[0]
    me = Aeq.shape[0]
    lower = np.full(nv, -np.inf) if lower is None else np.asarray(lower, float)
    upper = np.full(nv, np.inf) if upper is None else np.asarray(upper, float)
    if np.any(lower > upper):
        raise ValueError("lower bound above upper bound")

    # standard-form conversion: shift finite lower bounds, flip pure upper
    # bounds, split free variables, add slack rows for two-sided bounds
    cols = []          # (j_orig, sign, shift) per standard column
    ranged = []        # (std_col, range) rows x' + slack = range
    for j in range(nv):
        lo, up = lower[j], upper[j]
        if np.isfinite(lo):
            cols.append((j, 1.0, lo))
            if np.isfinite(up):
                ranged.append((len(cols) - 1, up - lo))
        elif np.isfinite(up):
            cols.append((j, -1.0, up))
        else:
            cols.append((j, 1.0, 0.0))
            cols.append((j, -1.0, 0.0))
    ns = len(cols) + len(ranged)
    mt = me + len(ranged)
    A = np.zeros((mt, ns))
    b = np.zeros(mt)
    cs = np.zeros(ns)
    shift_val = 0.0
    for k, (j, s, sh) in enumerate(cols):
        A[:me, k] = s * Aeq[:, j]
        cs[k] = s * c[j]
        shift_val += c[j] * sh
        if sh != 0.0:
            b[:me] -= Aeq[:, j] * sh
    b[:me] += beq
    for r, (k, rng) in enumerate(ranged):
        A[me + r, k] = 1.0
        A[me + r, len(cols) + r] = 1.0
        b[me + r] = rng

    code, xs, obj, iters, y = kernels.simplex_standard(
        A, b, cs, cfg.max_iter, cfg.kkt_tol, cfg.lp_pivot_tol)
    status = _STATUS_FROM_CODE[int(code)]
    x = np.zeros(nv)
    for k, (j, s, sh) in enumerate(cols):
        x[j] += s * xs[k] + (sh if s > 0 else 0.0)
        if s < 0 and np.isfinite(upper[j]) and not np.isfinite(lower[j]):
            x[j] += upper[j]
    if status is not SolveStatus.OPTIMAL:
        return SolveResult(status, np.nan, x, np.inf, int(iters))
    value = obj + shift_val
    kkt = float(np.max(np.abs(Aeq @ x - beq), initial=0.0))
    return SolveResult(SolveStatus.OPTIMAL, float(value), x, kkt, int(iters),
                       duals=np.asarray(y[:me]))


def lp_dual_objective(c, Aeq, beq, lower, upper, result: SolveResult) -> float:
    """Dual objective from the returned multipliers (for duality checks).

    For min c'x, Ax=b, l<=x<=u the dual value is b'y + sum over finite
    bounds of the positive/negative parts of the reduced costs.
    """
    c = np.asarray(c, float)
    Aeq = np.atleast_2d(np.asarray(Aeq, float))
    z = c - Aeq.T @ result.duals
    val = float(np.dot(np.atleast_1d(beq), result.duals))
    for j in range(c.shape[0]):
        if z[j] > 0 and np.isfinite(lower[j]):
            val += z[j] * lower[j]
        elif z[j] < 0 and np.isfinite(upper[j]):
            val += z[j] * upper[j]
    return val


def _flatten_structured(p: StructuredProgram):
    ng = p.n_gamma
    nz = p.m + ng
    sizes = [b[0] for b in p.gamma_blocks]
    offs = np.cumsum([p.m] + sizes)[:-1]

    Q = np.zeros((nz, nz))
    Q[: p.m, : p.m] = 2.0 * p.Q
    c = np.zeros(nz)
    c[: p.m] = p.c
    for o, dv in zip(offs, p.d):
        c[o:o + len(dv)] = dv

    ne_u = p.Aeq_u.shape[0] if p.Aeq_u is not None and p.Aeq_u.size else 0
    rows = ne_u + len(sizes)
    Aeq = np.zeros((rows, nz))
    beq = np.zeros(rows)
    if ne_u:
        Aeq[:ne_u, : p.m] = p.Aeq_u
        Aeq[:ne_u, p.m:] = p.Aeq_g
        beq[:ne_u] = p.beq
    for k, (o, s) in enumerate(zip(offs, sizes)):
        Aeq[ne_u + k, o:o + s] = 1.0
        beq[ne_u + k] = 1.0

    g_rows = []
    h_vals = []
    for j in range(p.m):
        if np.isfinite(p.u_lower[j]):
            row = np.zeros(nz)
            row[j] = -1.0
            g_rows.append(row)
            h_vals.append(-p.u_lower[j])
        if np.isfinite(p.u_upper[j]):
            row = np.zeros(nz)
            row[j] = 1.0
            g_rows.append(row)
            h_vals.append(p.u_upper[j])
    if p.extra_ineq is not None:
        Ai, bi = p.extra_ineq
        for k in range(Ai.shape[0]):
            row = np.zeros(nz)
            row[: p.m] = Ai[k]
            g_rows.append(row)
            h_vals.append(bi[k])
    for g in range(ng):
        row = np.zeros(nz)
        row[p.m + g] = -1.0
        g_rows.append(row)
        h_vals.append(0.0)
    G = np.array(g_rows) if g_rows else np.zeros((0, nz))
    h = np.array(h_vals)
    return Q, c, Aeq, beq, G, h, offs, sizes


def solve_structured(p: StructuredProgram,
                     cfg: SolverConfig = SolverConfig()) -> SolveResult:
    """Global optimum of the structured convex program via interior point.

    Feasibility is certified first with a simplex phase (the feasible set
    is polyhedral), so infeasible equality systems surface as INFEASIBLE
    rather than as interior-point divergence.
    """
    Q, c, Aeq, beq, G, h, offs, sizes = _flatten_structured(p)
    nz = c.shape[0]

    lb = np.full(nz, -np.inf)
    ub = np.full(nz, np.inf)
    lb[: p.m] = p.u_lower
    ub[: p.m] = p.u_upper
    lb[p.m:] = 0.0
    ub[p.m:] = 1.0
    feas_Aeq, feas_beq = Aeq, beq
    if p.extra_ineq is not None:
        Ai, bi = p.extra_ineq
        k = Ai.shape[0]
        feas_Aeq = np.zeros((Aeq.shape[0] + k, nz + k))
        feas_Aeq[: Aeq.shape[0], :nz] = Aeq
        feas_Aeq[Aeq.shape[0]:, : p.m] = Ai
        feas_Aeq[Aeq.shape[0]:, nz:] = np.eye(k)
        feas_beq = np.concatenate([beq, bi])
        lb = np.concatenate([lb, np.zeros(k)])
        ub = np.concatenate([ub, np.full(k, np.inf)])
    feas = solve_lp(np.zeros(feas_Aeq.shape[1]), feas_Aeq, feas_beq, lb, ub, cfg)
    if feas.status is SolveStatus.INFEASIBLE:
        return SolveResult(SolveStatus.INFEASIBLE, np.nan, np.full(nz, np.nan),
                           np.inf, feas.iterations)

    code, z, obj, iters, kkt, nu, lam = kernels.qp_ipm_dense(
        Q, c, Aeq, beq, G, h, cfg.max_iter, cfg.kkt_tol)
    status = _STATUS_FROM_CODE[int(code)]
    u = z[: p.m].copy()
    gammas = [z[o:o + s].copy() for o, s in zip(offs, sizes)]
    return SolveResult(status, float(obj), z, float(kkt), int(iters),
                       u_star=u, gamma_star=gammas, duals=np.asarray(nu))


def inner_lp_weights(cell: Cell, node_values, y,
                     cfg: SolverConfig = SolverConfig()):
    """Cheapest corner weights reproducing y inside one cell.

    Solves the reduced program over the cell's 2^n corners only.  Returns
    (weights, value); weights follow the cell's corner ordering.
    """
    node_values = np.asarray(node_values, float)
    y = np.asarray(y, float)
    check_point_in_cell(cell, y)
    theta = (y - cell.lower) / (cell.upper - cell.lower)
    code, w, val, iters = kernels.cell_lp(theta, node_values, cfg.max_iter,
                                          cfg.kkt_tol, cfg.lp_pivot_tol)
    if int(code) != kernels.OPTIMAL:
        raise PointOutsideCell(
            f"inner weight program failed with status {int(code)} at {y!r}")
    return w, float(val)
