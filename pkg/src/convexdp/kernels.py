"""Compiled numeric kernels.

Everything in this module is plain array-in / array-out code so it can run
either compiled (numba @njit, the default) or interpreted (pure NumPy,
CONVEXDP_BACKEND=numpy).  No Python objects cross these boundaries: the
wrapper modules (solver, operators, engine) translate dataclasses to arrays.

Status codes shared by all solvers:
    0 optimal, 1 infeasible, 2 iteration limit, 3 numerical failure,
    4 unbounded, 5 point outside domain.
"""

from __future__ import annotations

import numpy as np

from .backend import USE_NUMBA, jit

if USE_NUMBA:
    from numba import prange
else:  # pragma: no cover - trivially exercised by backend tests
    prange = range

OPTIMAL = 0
INFEASIBLE = 1
ITERATION_LIMIT = 2
NUMERICAL_FAILURE = 3
UNBOUNDED = 4
OUTSIDE_DOMAIN = 5

_BIG = 1e300


# ---------------------------------------------------------------------------
# grid location
# ---------------------------------------------------------------------------


@jit()
def locate_interval(p, lo, inv_h, w_lo, w_hi, snap):
    """Axis interval index for coordinate p, or -1 when outside the window.

    A point on a shared node belongs to the lower interval (lowest-index
    rule), so intervals are half-open (node_i, node_{i+1}] except the first
    one in the window, which is closed.  `w_lo`/`w_hi` are node indices
    bounding the stage window on this axis; `snap` is the face tolerance in
    node-index units (points within snap of a node sit on it).
    """
    r = (p - lo) * inv_h
    if r < w_lo - snap or r > w_hi + snap:
        return -1
    i = int(np.floor(r))
    if r - i <= snap:
        i -= 1
    if i < w_lo:
        i = w_lo
    if i > w_hi - 1:
        i = w_hi - 1
    return i


# ---------------------------------------------------------------------------
# dense tableau simplex (Bland's rule, two phases)
# ---------------------------------------------------------------------------


@jit()
def _simplex_pivot(T, basis, row, col):
    nr, nc = T.shape
    inv = 1.0 / T[row, col]
    for j in range(nc):
        T[row, j] *= inv
    T[row, col] = 1.0
    for i in range(nr):
        if i == row:
            continue
        f = T[i, col]
        if f != 0.0:
            for j in range(nc):
                T[i, j] -= f * T[row, j]
            T[i, col] = 0.0
    basis[row] = col


@jit()
def _simplex_run(T, basis, me, width, cost_row, n_enterable, tol, piv_tol, max_iter):
    """Run Bland pivoting until optimal/unbounded or the iteration cap."""
    it = 0
    while it < max_iter:
        enter = -1
        for j in range(n_enterable):
            if T[cost_row, j] < -tol:
                enter = j
                break
        if enter < 0:
            return OPTIMAL, it
        leave = -1
        best_ratio = _BIG
        best_basis = -1
        rhs_col = width - 1
        for i in range(me):
            a = T[i, enter]
            if a > piv_tol:
                ratio = T[i, rhs_col] / a
                if ratio < best_ratio - 1e-12 * (1.0 + abs(best_ratio)):
                    best_ratio = ratio
                    leave = i
                    best_basis = basis[i]
                elif ratio <= best_ratio + 1e-12 * (1.0 + abs(best_ratio)):
                    if basis[i] < best_basis:
                        leave = i
                        best_basis = basis[i]
        if leave < 0:
            return UNBOUNDED, it
        _simplex_pivot(T, basis, leave, enter)
        it += 1
    return ITERATION_LIMIT, it


@jit()
def simplex_standard(A, b, c, max_iter, tol, piv_tol):
    """Solve min c'x s.t. A x = b, x >= 0 with a two-phase dense tableau.

    Returns (status, x, objective, iterations, y) where y holds the equality
    multipliers of the original rows (dual vector).  Deterministic: Bland's
    smallest-index rule for entering columns, smallest basic index on ties
    in the ratio test.
    """
    me, nv = A.shape
    width = nv + me + 1
    T = np.zeros((me + 2, width))
    sign = np.empty(me)
    for i in range(me):
        s = 1.0 if b[i] >= 0.0 else -1.0
        sign[i] = s
        for j in range(nv):
            T[i, j] = s * A[i, j]
        T[i, nv + i] = 1.0
        T[i, width - 1] = s * b[i]
    for j in range(nv):
        T[me, j] = c[j]
    rhs_sum = 0.0
    for i in range(me):
        rhs_sum += T[i, width - 1]
        for j in range(nv):
            T[me + 1, j] -= T[i, j]
    T[me + 1, width - 1] = -rhs_sum

    basis = np.empty(me, np.int64)
    for i in range(me):
        basis[i] = nv + i

    x = np.zeros(nv)
    y = np.zeros(me)

    status, it1 = _simplex_run(T, basis, me, width, me + 1, nv, tol, piv_tol, max_iter)
    if status == ITERATION_LIMIT:
        return ITERATION_LIMIT, x, 0.0, it1, y
    phase1 = -T[me + 1, width - 1]
    if phase1 > 1e-8 * (1.0 + abs(rhs_sum)):
        return INFEASIBLE, x, 0.0, it1, y

    # drive leftover artificials out of the basis where a pivot exists
    for i in range(me):
        if basis[i] >= nv:
            for j in range(nv):
                if abs(T[i, j]) > piv_tol:
                    _simplex_pivot(T, basis, i, j)
                    break

    status, it2 = _simplex_run(T, basis, me, width, me, nv, tol, piv_tol, max_iter - it1)
    iters = it1 + it2
    if status != OPTIMAL:
        return status, x, 0.0, iters, y

    for i in range(me):
        if basis[i] < nv:
            x[basis[i]] = T[i, width - 1]
    obj = -T[me, width - 1]
    # reduced cost of artificial column i equals -y_i in tableau row space
    for i in range(me):
        y[i] = -sign[i] * T[me, nv + i]
    return OPTIMAL, x, obj, iters, y


# ---------------------------------------------------------------------------
# inner LP over one hyper-rectangular cell (unit-cube coordinates)
# ---------------------------------------------------------------------------


@jit()
def cell_lp(theta, vals, max_iter, tol, piv_tol):
    """Cheapest convex combination of cell corners reproducing theta.

    theta: fractional coordinates in [0,1]^n, vals: corner values ordered by
    binary corner index (bit a of the index is the offset on axis a).
    Returns (status, weights, value, iterations).
    """
    n = theta.shape[0]
    nv = 1 << n
    A = np.empty((n + 1, nv))
    for k in range(nv):
        for a in range(n):
            A[a, k] = float((k >> a) & 1)
        A[n, k] = 1.0
    b = np.empty(n + 1)
    for a in range(n):
        t = theta[a]
        if t < 0.0:
            t = 0.0
        if t > 1.0:
            t = 1.0
        b[a] = t
    b[n] = 1.0
    status, x, obj, iters, y = simplex_standard(A, b, vals, max_iter, tol, piv_tol)
    return status, x, obj, iters


# ---------------------------------------------------------------------------
# lower convex envelope: evaluation against candidate facet lists
# ---------------------------------------------------------------------------


@jit()
def envelope_eval(planes, cptr, cidx, cell_flat, y):
    """Envelope value and supporting facet at y.

    planes: (F, n+1) rows [a_1..a_n, b] of the affine facet functions.
    cptr/cidx: CSR lists of candidate facets per (stage-local) cell; an
    empty list falls back to scanning every facet.
    """
    n = y.shape[0]
    best = -_BIG
    best_f = -1
    lo = cptr[cell_flat]
    hi = cptr[cell_flat + 1]
    if hi > lo:
        for k in range(lo, hi):
            f = cidx[k]
            v = planes[f, n]
            for a in range(n):
                v += planes[f, a] * y[a]
            if v > best:
                best = v
                best_f = f
    else:
        for f in range(planes.shape[0]):
            v = planes[f, n]
            for a in range(n):
                v += planes[f, a] * y[a]
            if v > best:
                best = v
                best_f = f
    return best, best_f


@jit()
def _envelope_locate(y, axis_lo, axis_inv_h, w_lo, w_hi, snap, cstrides):
    """Stage-local flat cell index containing y, or -1 when outside."""
    n = y.shape[0]
    flat = 0
    for a in range(n):
        ia = locate_interval(y[a], axis_lo[a], axis_inv_h[a], w_lo[a], w_hi[a], snap[a])
        if ia < 0:
            return -1
        flat += (ia - w_lo[a]) * cstrides[a]
    return flat


# ---------------------------------------------------------------------------
# structured interior-point QP for the per-state master problem
#
#   minimize   0.5 u' R2 u + c_u' u + probs' w
#   over       u in R^m, w in R^N
#   subject to lo <= u <= hi            (finite entries only)
#              E u <= e_rhs             (optional extra rows)
#              g_k' u - w_{s_k} <= h_k  (epigraph cuts, >=1 per sample)
# ---------------------------------------------------------------------------


@jit()
def hat_master_ipm(R2, c_u, probs, u_lo, u_hi, blo, bhi, E, e_rhs,
                   cuts_g, cuts_h, cuts_s, n_cuts, max_iter, tol):
    """Mehrotra predictor-corrector on the structured master QP.

    The Newton system is reduced to an m-by-m solve: the w block of the
    scaled Hessian is diagonal because each cut touches a single w entry.
    Returns (status, u, w, iterations, kkt_residual).
    """
    m = c_u.shape[0]
    N = probs.shape[0]
    n_lo = blo.shape[0]
    n_hi = bhi.shape[0]
    ke = E.shape[0]
    ni = n_lo + n_hi + ke + n_cuts

    u = np.empty(m)
    for j in range(m):
        v = 0.0
        if np.isfinite(u_lo[j]) and v < u_lo[j]:
            v = u_lo[j]
        if np.isfinite(u_hi[j]) and v > u_hi[j]:
            v = u_hi[j]
        u[j] = v
    w = np.zeros(N)

    lam = np.empty(ni)
    slk = np.empty(ni)
    rp = np.empty(ni)
    q = np.empty(ni)
    drow = np.empty(ni)
    ds = np.empty(ni)
    dlam = np.empty(ni)
    rd_u = np.empty(m)
    rd_w = np.empty(N)
    rhs_u = np.empty(m)
    rhs_w = np.empty(N)
    Huw = np.empty((m, N))
    dww = np.empty(N)
    du = np.empty(m)
    dw = np.empty(N)

    # seed w above the current cut values so the start is slack-feasible
    for k in range(n_cuts):
        gv = 0.0
        for j in range(m):
            gv += cuts_g[k, j] * u[j]
        lhs = gv - cuts_h[k]
        s = cuts_s[k]
        if lhs + 1.0 > w[s]:
            w[s] = lhs + 1.0

    for i in range(ni):
        lam[i] = 1.0
        slk[i] = 1.0

    scale_d = 1.0
    for j in range(m):
        if abs(c_u[j]) > scale_d:
            scale_d = abs(c_u[j])
    for s in range(N):
        if abs(probs[s]) > scale_d:
            scale_d = abs(probs[s])

    status = ITERATION_LIMIT
    kkt = _BIG
    it = 0
    for it in range(max_iter):
        # row values G z - h, grouped [lo | hi | E | cuts]
        r = 0
        for k in range(n_lo):
            rp[r] = (-u[blo[k]]) - (-u_lo[blo[k]]) + slk[r]
            r += 1
        for k in range(n_hi):
            rp[r] = u[bhi[k]] - u_hi[bhi[k]] + slk[r]
            r += 1
        for k in range(ke):
            gv = 0.0
            for j in range(m):
                gv += E[k, j] * u[j]
            rp[r] = gv - e_rhs[k] + slk[r]
            r += 1
        for k in range(n_cuts):
            gv = 0.0
            for j in range(m):
                gv += cuts_g[k, j] * u[j]
            rp[r] = gv - w[cuts_s[k]] - cuts_h[k] + slk[r]
            r += 1

        # dual residuals
        for j in range(m):
            v = c_u[j]
            for jj in range(m):
                v += R2[j, jj] * u[jj]
            rd_u[j] = v
        for s in range(N):
            rd_w[s] = probs[s]
        r = 0
        for k in range(n_lo):
            rd_u[blo[k]] -= lam[r]
            r += 1
        for k in range(n_hi):
            rd_u[bhi[k]] += lam[r]
            r += 1
        for k in range(ke):
            for j in range(m):
                rd_u[j] += lam[r] * E[k, j]
            r += 1
        for k in range(n_cuts):
            for j in range(m):
                rd_u[j] += lam[r] * cuts_g[k, j]
            rd_w[cuts_s[k]] -= lam[r]
            r += 1

        mu = 0.0
        for i in range(ni):
            mu += slk[i] * lam[i]
        mu /= ni

        res_p = 0.0
        for i in range(ni):
            if abs(rp[i]) > res_p:
                res_p = abs(rp[i])
        res_d = 0.0
        for j in range(m):
            if abs(rd_u[j]) > res_d:
                res_d = abs(rd_u[j])
        for s in range(N):
            if abs(rd_w[s]) > res_d:
                res_d = abs(rd_w[s])

        kkt = max(res_p, res_d, mu)
        if res_p <= tol * (1.0 + scale_d) and res_d <= tol * (1.0 + scale_d) and mu <= tol * (1.0 + scale_d):
            status = OPTIMAL
            break

        for i in range(ni):
            drow[i] = lam[i] / slk[i]

        # two solves share the scaled Hessian: predictor then corrector
        sigma_mu = 0.0
        corr = np.zeros(ni)
        for _pass in range(2):
            # q_i = (lam*rp - rc)/s with rc = lam*s (+ corrector terms)
            for i in range(ni):
                rc = lam[i] * slk[i] + corr[i] - sigma_mu
                q[i] = (lam[i] * rp[i] - rc) / slk[i]

            # assemble reduced system
            Huu = R2.copy()
            for j in range(m):
                for s in range(N):
                    Huw[j, s] = 0.0
            for s in range(N):
                dww[s] = 0.0
            for j in range(m):
                rhs_u[j] = -rd_u[j]
            for s in range(N):
                rhs_w[s] = -rd_w[s]
            r = 0
            for k in range(n_lo):
                jx = blo[k]
                Huu[jx, jx] += drow[r]
                rhs_u[jx] += q[r]
                r += 1
            for k in range(n_hi):
                jx = bhi[k]
                Huu[jx, jx] += drow[r]
                rhs_u[jx] -= q[r]
                r += 1
            for k in range(ke):
                d = drow[r]
                for j in range(m):
                    gj = E[k, j]
                    rhs_u[j] -= q[r] * gj
                    for jj in range(m):
                        Huu[j, jj] += d * gj * E[k, jj]
                r += 1
            for k in range(n_cuts):
                d = drow[r]
                s = cuts_s[k]
                for j in range(m):
                    gj = cuts_g[k, j]
                    rhs_u[j] -= q[r] * gj
                    Huw[j, s] -= d * gj
                    for jj in range(m):
                        Huu[j, jj] += d * gj * cuts_g[k, jj]
                dww[s] += d
                rhs_w[s] += q[r]
                r += 1

            bad = False
            for s in range(N):
                if dww[s] <= 0.0:
                    bad = True
            if bad:
                return NUMERICAL_FAILURE, u, w, it, kkt

            # Schur complement on u
            S = Huu
            for j in range(m):
                for jj in range(m):
                    acc = 0.0
                    for s in range(N):
                        acc += Huw[j, s] * Huw[jj, s] / dww[s]
                    S[j, jj] -= acc
                S[j, j] += 1e-13
            rhs = rhs_u.copy()
            for j in range(m):
                acc = 0.0
                for s in range(N):
                    acc += Huw[j, s] * rhs_w[s] / dww[s]
                rhs[j] -= acc
            du = np.linalg.solve(S, rhs)
            ok = True
            for j in range(m):
                if not np.isfinite(du[j]):
                    ok = False
            if not ok:
                return NUMERICAL_FAILURE, u, w, it, kkt
            for s in range(N):
                acc = rhs_w[s]
                for j in range(m):
                    acc -= Huw[j, s] * du[j]
                dw[s] = acc / dww[s]

            # recover ds, dlam
            r = 0
            for k in range(n_lo):
                gdz = -du[blo[k]]
                ds[r] = -rp[r] - gdz
                r += 1
            for k in range(n_hi):
                gdz = du[bhi[k]]
                ds[r] = -rp[r] - gdz
                r += 1
            for k in range(ke):
                gdz = 0.0
                for j in range(m):
                    gdz += E[k, j] * du[j]
                ds[r] = -rp[r] - gdz
                r += 1
            for k in range(n_cuts):
                gdz = -dw[cuts_s[k]]
                for j in range(m):
                    gdz += cuts_g[k, j] * du[j]
                ds[r] = -rp[r] - gdz
                r += 1
            for i in range(ni):
                rc = lam[i] * slk[i] + corr[i] - sigma_mu
                dlam[i] = (-rc - lam[i] * ds[i]) / slk[i]

            # step lengths
            ap = 1.0
            ad = 1.0
            for i in range(ni):
                if ds[i] < 0.0:
                    t = -slk[i] / ds[i]
                    if t < ap:
                        ap = t
                if dlam[i] < 0.0:
                    t = -lam[i] / dlam[i]
                    if t < ad:
                        ad = t

            if _pass == 0:
                mu_aff = 0.0
                for i in range(ni):
                    mu_aff += (slk[i] + 0.995 * ap * ds[i]) * (lam[i] + 0.995 * ad * dlam[i])
                mu_aff /= ni
                if mu_aff < 0.0:
                    mu_aff = 0.0
                ratio = mu_aff / (mu + 1e-300)
                sigma = ratio * ratio * ratio
                sigma_mu = sigma * mu
                for i in range(ni):
                    corr[i] = ds[i] * dlam[i]

        ap = 1.0
        ad = 1.0
        for i in range(ni):
            if ds[i] < 0.0:
                t = -0.995 * slk[i] / ds[i]
                if t < ap:
                    ap = t
            if dlam[i] < 0.0:
                t = -0.995 * lam[i] / dlam[i]
                if t < ad:
                    ad = t
        for j in range(m):
            u[j] += ap * du[j]
        for s in range(N):
            w[s] += ap * dw[s]
        for i in range(ni):
            slk[i] += ap * ds[i]
            lam[i] += ad * dlam[i]
            if slk[i] < 1e-300:
                slk[i] = 1e-300
            if lam[i] < 1e-300:
                lam[i] = 1e-300

    return status, u, w, it, kkt


# ---------------------------------------------------------------------------
# per-node solve of the convex Bellman program (cutting planes on the
# envelope epigraph) and the stage sweep
# ---------------------------------------------------------------------------


@jit()
def hat_node_solve(Gdyn, Hdyn, state_cost, R2, c_u, u_lo, u_hi, blo, bhi,
                   E, e_rhs, probs,
                   planes, cptr, cidx,
                   axis_lo, axis_inv_h, w_lo, w_hi, snap, cstrides,
                   max_outer, ipm_iter, kkt_tol, cut_tol):
    """Solve one per-state program; returns (status, value, u, facets, iters).

    Gdyn (N,n) and Hdyn (N,n,m) give the next state per sample as
    y_s(u) = Gdyn[s] + Hdyn[s] @ u.  The value reported is the feasible
    evaluation at the returned u (state cost + action cost + expected
    envelope value), so it upper-bounds the program optimum by at most the
    master tolerance.
    """
    N = Gdyn.shape[0]
    n = Gdyn.shape[1]
    m = c_u.shape[0]
    max_cuts = N * (max_outer + 2)
    cuts_g = np.empty((max_cuts, m))
    cuts_h = np.empty(max_cuts)
    cuts_s = np.empty(max_cuts, np.int64)
    n_cuts = 0
    facets = np.full(N, -1, np.int64)
    hvals = np.zeros(N)
    y = np.empty(n)
    u = np.empty(m)
    for j in range(m):
        v = 0.0
        if np.isfinite(u_lo[j]) and v < u_lo[j]:
            v = u_lo[j]
        if np.isfinite(u_hi[j]) and v > u_hi[j]:
            v = u_hi[j]
        u[j] = v

    total_it = 0
    # seed one cut per sample at the box-projected origin
    for s in range(N):
        for a in range(n):
            acc = Gdyn[s, a]
            for j in range(m):
                acc += Hdyn[s, a, j] * u[j]
            y[a] = acc
        cf = _envelope_locate(y, axis_lo, axis_inv_h, w_lo, w_hi, snap, cstrides)
        if cf < 0:
            return OUTSIDE_DOMAIN, 0.0, u, facets, 0
        hv, f = envelope_eval(planes, cptr, cidx, cf, y)
        ag = 0.0
        for a in range(n):
            ag += planes[f, a] * Gdyn[s, a]
        for j in range(m):
            gv = 0.0
            for a in range(n):
                gv += planes[f, a] * Hdyn[s, a, j]
            cuts_g[n_cuts, j] = gv
        cuts_h[n_cuts] = -ag - planes[f, n]
        cuts_s[n_cuts] = s
        n_cuts += 1

    status = ITERATION_LIMIT
    for outer in range(max_outer):
        st, u_new, wv, it, kkt = hat_master_ipm(
            R2, c_u, probs, u_lo, u_hi, blo, bhi, E, e_rhs,
            cuts_g, cuts_h, cuts_s, n_cuts, ipm_iter, kkt_tol)
        total_it += it
        if st != OPTIMAL:
            return st, 0.0, u, facets, total_it
        u = u_new

        added = 0
        worst = 0.0
        for s in range(N):
            for a in range(n):
                acc = Gdyn[s, a]
                for j in range(m):
                    acc += Hdyn[s, a, j] * u[j]
                y[a] = acc
            cf = _envelope_locate(y, axis_lo, axis_inv_h, w_lo, w_hi, snap, cstrides)
            if cf < 0:
                return OUTSIDE_DOMAIN, 0.0, u, facets, total_it
            hv, f = envelope_eval(planes, cptr, cidx, cf, y)
            hvals[s] = hv
            facets[s] = f
            viol = hv - wv[s]
            if viol > worst:
                worst = viol
            if viol > cut_tol and n_cuts < max_cuts:
                dup = False
                for k in range(n_cuts):
                    if cuts_s[k] == s:
                        same = True
                        ag = 0.0
                        for a in range(n):
                            ag += planes[f, a] * Gdyn[s, a]
                        if abs(cuts_h[k] - (-ag - planes[f, n])) > 1e-12:
                            same = False
                        else:
                            for j in range(m):
                                gv = 0.0
                                for a in range(n):
                                    gv += planes[f, a] * Hdyn[s, a, j]
                                if abs(cuts_g[k, j] - gv) > 1e-12:
                                    same = False
                                    break
                        if same:
                            dup = True
                            break
                if not dup:
                    ag = 0.0
                    for a in range(n):
                        ag += planes[f, a] * Gdyn[s, a]
                    for j in range(m):
                        gv = 0.0
                        for a in range(n):
                            gv += planes[f, a] * Hdyn[s, a, j]
                        cuts_g[n_cuts, j] = gv
                    cuts_h[n_cuts] = -ag - planes[f, n]
                    cuts_s[n_cuts] = s
                    n_cuts += 1
                    added += 1
        if worst <= cut_tol or added == 0:
            status = OPTIMAL
            break

    value = state_cost
    for j in range(m):
        value += c_u[j] * u[j]
        acc = 0.0
        for jj in range(m):
            acc += R2[j, jj] * u[jj]
        value += 0.5 * u[j] * acc
    for s in range(N):
        value += probs[s] * hvals[s]
    return status, value, u, facets, total_it


@jit(parallel=True)
def hat_stage(Gdyn, Hdyn, state_cost, R2, c_u, u_lo, u_hi, E, e_rhs, probs,
              planes, cptr, cidx,
              axis_lo, axis_inv_h, w_lo, w_hi, snap, cstrides,
              max_outer, ipm_iter, kkt_tol, cut_tol):
    """Per-node program sweep; node i reads slice i of the batched inputs.

    Gdyn (M,N,n), Hdyn (M,N,n,m), state_cost (M,), u_lo/u_hi (M,m),
    e_rhs (M,ke).  Outputs land in disjoint slots indexed by node.
    """
    M = Gdyn.shape[0]
    N = Gdyn.shape[1]
    m = c_u.shape[0]
    values = np.zeros(M)
    u_out = np.zeros((M, m))
    facet_out = np.full((M, N), -1, np.int64)
    status_out = np.zeros(M, np.int64)
    iters_out = np.zeros(M, np.int64)
    for i in prange(M):
        nlo = 0
        nhi = 0
        for j in range(m):
            if np.isfinite(u_lo[i, j]):
                nlo += 1
            if np.isfinite(u_hi[i, j]):
                nhi += 1
        blo = np.empty(nlo, np.int64)
        bhi = np.empty(nhi, np.int64)
        p = 0
        q = 0
        for j in range(m):
            if np.isfinite(u_lo[i, j]):
                blo[p] = j
                p += 1
            if np.isfinite(u_hi[i, j]):
                bhi[q] = j
                q += 1
        st, val, uu, fc, it = hat_node_solve(
            Gdyn[i], Hdyn[i], state_cost[i], R2, c_u,
            u_lo[i], u_hi[i], blo, bhi, E, e_rhs[i], probs,
            planes, cptr, cidx,
            axis_lo, axis_inv_h, w_lo, w_hi, snap, cstrides,
            max_outer, ipm_iter, kkt_tol, cut_tol)
        values[i] = val
        status_out[i] = st
        iters_out[i] = it
        for j in range(m):
            u_out[i, j] = uu[j]
        for s in range(N):
            facet_out[i, s] = fc[s]
    return status_out, values, u_out, facet_out, iters_out


# ---------------------------------------------------------------------------
# bilevel stage sweep: enumerate candidate actions, score each with the
# per-sample cell LP
# ---------------------------------------------------------------------------


@jit(parallel=True)
def tilde_stage(Y, action_cost, probs, node_values, lat_ids, lat_strides,
                axis_lo, axis_inv_h, w_lo, w_hi, snap,
                lp_iter, lp_tol, piv_tol):
    """Score every (node, action) pair: cost + expected cell-LP value.

    Y: (M, B, N, n) next states, action_cost: (M, B).  Returns
    (scores (M,B), status (M,)); a nonzero status marks the first failing
    node (next state outside the stage box or LP failure).
    """
    M, B, N, n = Y.shape
    nv = 1 << n
    scores = np.empty((M, B))
    status_out = np.zeros(M, np.int64)
    iters_out = np.zeros(M, np.int64)
    for i in prange(M):
        theta = np.empty(n)
        vv = np.empty(nv)
        bad = 0
        it_acc = 0
        for jb in range(B):
            acc = 0.0
            for s in range(N):
                base = 0
                ok = True
                for a in range(n):
                    p = Y[i, jb, s, a]
                    ia = locate_interval(p, axis_lo[a], axis_inv_h[a],
                                         w_lo[a], w_hi[a], snap[a])
                    if ia < 0:
                        ok = False
                        break
                    t = (p - axis_lo[a]) * axis_inv_h[a] - ia
                    if t < 0.0:
                        t = 0.0
                    if t > 1.0:
                        t = 1.0
                    theta[a] = t
                    base += ia * lat_strides[a]
                if not ok:
                    bad = OUTSIDE_DOMAIN
                    break
                for k in range(nv):
                    flat = base
                    for a in range(n):
                        if (k >> a) & 1:
                            flat += lat_strides[a]
                    vv[k] = node_values[lat_ids[flat]]
                st, wts, val, it = cell_lp(theta, vv, lp_iter, lp_tol, piv_tol)
                it_acc += it
                if st != OPTIMAL:
                    bad = NUMERICAL_FAILURE
                    break
                acc += probs[s] * val
            if bad != 0:
                scores[i, jb] = _BIG
                status_out[i] = bad
                break
            scores[i, jb] = action_cost[i, jb] + acc
        iters_out[i] = it_acc
    return scores, status_out, iters_out


# ---------------------------------------------------------------------------
# generic dense interior-point QP (assembled structured programs)
# ---------------------------------------------------------------------------


@jit()
def qp_ipm_dense(Q, c, Aeq, beq, G, h, max_iter, tol):
    """Mehrotra predictor-corrector for
        min 0.5 z'Qz + c'z  s.t.  Aeq z = beq,  G z <= h.

    Returns (status, z, objective, iterations, kkt_residual, nu, lam).
    """
    nz = c.shape[0]
    ne = Aeq.shape[0]
    ni = G.shape[0]

    z = np.zeros(nz)
    nu = np.zeros(ne)
    if ne > 0:
        sol, res, rank, sv = np.linalg.lstsq(Aeq, beq)
        for j in range(nz):
            z[j] = sol[j]

    if ni == 0:
        nk = nz + ne
        K = np.zeros((nk, nk))
        rhs = np.empty(nk)
        for i in range(nz):
            for j in range(nz):
                K[i, j] = Q[i, j]
            K[i, i] += 1e-12
            rhs[i] = -c[i]
        for e in range(ne):
            for j in range(nz):
                K[nz + e, j] = Aeq[e, j]
                K[j, nz + e] = Aeq[e, j]
            K[nz + e, nz + e] = -1e-12
            rhs[nz + e] = beq[e]
        sol = np.linalg.solve(K, rhs)
        for j in range(nz):
            z[j] = sol[j]
        for e in range(ne):
            nu[e] = sol[nz + e]
        obj = 0.0
        for i in range(nz):
            obj += c[i] * z[i]
            acc = 0.0
            for j in range(nz):
                acc += Q[i, j] * z[j]
            obj += 0.5 * z[i] * acc
        kkt = 0.0
        for e in range(ne):
            acc = -beq[e]
            for j in range(nz):
                acc += Aeq[e, j] * z[j]
            if abs(acc) > kkt:
                kkt = abs(acc)
        return OPTIMAL, z, obj, 1, kkt, nu, np.zeros(0)

    lam = np.ones(ni)
    slk = np.empty(ni)
    for i in range(ni):
        gz = 0.0
        for j in range(nz):
            gz += G[i, j] * z[j]
        s0 = h[i] - gz
        slk[i] = s0 if s0 > 1.0 else 1.0

    rd = np.empty(nz)
    rpe = np.empty(ne)
    rpi = np.empty(ni)
    qv = np.empty(ni)
    ds = np.empty(ni)
    dlam = np.empty(ni)
    nk = nz + ne
    status = ITERATION_LIMIT
    kkt = _BIG
    it = 0

    scale = 1.0
    for j in range(nz):
        if abs(c[j]) > scale:
            scale = abs(c[j])

    for it in range(max_iter):
        for j in range(nz):
            v = c[j]
            for jj in range(nz):
                v += Q[j, jj] * z[jj]
            for e in range(ne):
                v += Aeq[e, j] * nu[e]
            for i in range(ni):
                v += G[i, j] * lam[i]
            rd[j] = v
        for e in range(ne):
            v = -beq[e]
            for j in range(nz):
                v += Aeq[e, j] * z[j]
            rpe[e] = v
        for i in range(ni):
            v = -h[i] + slk[i]
            for j in range(nz):
                v += G[i, j] * z[j]
            rpi[i] = v
        mu = 0.0
        for i in range(ni):
            mu += slk[i] * lam[i]
        mu /= ni

        res = 0.0
        for j in range(nz):
            if abs(rd[j]) > res:
                res = abs(rd[j])
        for e in range(ne):
            if abs(rpe[e]) > res:
                res = abs(rpe[e])
        for i in range(ni):
            if abs(rpi[i]) > res:
                res = abs(rpi[i])
        kkt = max(res, mu)
        if kkt <= tol * (1.0 + scale):
            status = OPTIMAL
            break

        sigma_mu = 0.0
        corr = np.zeros(ni)
        dz = np.zeros(nz)
        dnu = np.zeros(ne)
        for _pass in range(2):
            for i in range(ni):
                rc = lam[i] * slk[i] + corr[i] - sigma_mu
                qv[i] = (lam[i] * rpi[i] - rc) / slk[i]
            K = np.zeros((nk, nk))
            rhs = np.empty(nk)
            for a in range(nz):
                for b2 in range(nz):
                    K[a, b2] = Q[a, b2]
                K[a, a] += 1e-13
            for i in range(ni):
                d = lam[i] / slk[i]
                for a in range(nz):
                    ga = G[i, a]
                    if ga != 0.0:
                        for b2 in range(nz):
                            K[a, b2] += d * ga * G[i, b2]
            for e in range(ne):
                for j in range(nz):
                    K[nz + e, j] = Aeq[e, j]
                    K[j, nz + e] = Aeq[e, j]
                K[nz + e, nz + e] = -1e-13
            for j in range(nz):
                v = -rd[j]
                for i in range(ni):
                    v -= G[i, j] * qv[i]
                rhs[j] = v
            for e in range(ne):
                rhs[nz + e] = -rpe[e]
            sol = np.linalg.solve(K, rhs)
            ok = True
            for j in range(nk):
                if not np.isfinite(sol[j]):
                    ok = False
            if not ok:
                return NUMERICAL_FAILURE, z, 0.0, it, kkt, nu, lam
            for j in range(nz):
                dz[j] = sol[j]
            for e in range(ne):
                dnu[e] = sol[nz + e]
            for i in range(ni):
                gdz = 0.0
                for j in range(nz):
                    gdz += G[i, j] * dz[j]
                ds[i] = -rpi[i] - gdz
            for i in range(ni):
                rc = lam[i] * slk[i] + corr[i] - sigma_mu
                dlam[i] = (-rc - lam[i] * ds[i]) / slk[i]

            if _pass == 0:
                ap = 1.0
                ad = 1.0
                for i in range(ni):
                    if ds[i] < 0.0:
                        t = -slk[i] / ds[i]
                        if t < ap:
                            ap = t
                    if dlam[i] < 0.0:
                        t = -lam[i] / dlam[i]
                        if t < ad:
                            ad = t
                mu_aff = 0.0
                for i in range(ni):
                    mu_aff += (slk[i] + 0.995 * ap * ds[i]) * (lam[i] + 0.995 * ad * dlam[i])
                mu_aff /= ni
                if mu_aff < 0.0:
                    mu_aff = 0.0
                ratio = mu_aff / (mu + 1e-300)
                sigma_mu = ratio * ratio * ratio * mu
                for i in range(ni):
                    corr[i] = ds[i] * dlam[i]

        ap = 1.0
        ad = 1.0
        for i in range(ni):
            if ds[i] < 0.0:
                t = -0.995 * slk[i] / ds[i]
                if t < ap:
                    ap = t
            if dlam[i] < 0.0:
                t = -0.995 * lam[i] / dlam[i]
                if t < ad:
                    ad = t
        for j in range(nz):
            z[j] += ap * dz[j]
        for e in range(ne):
            nu[e] += ad * dnu[e]
        for i in range(ni):
            slk[i] += ap * ds[i]
            lam[i] += ad * dlam[i]
            if slk[i] < 1e-300:
                slk[i] = 1e-300
            if lam[i] < 1e-300:
                lam[i] = 1e-300

    obj = 0.0
    for i in range(nz):
        obj += c[i] * z[i]
        acc = 0.0
        for j in range(nz):
            acc += Q[i, j] * z[j]
        obj += 0.5 * z[i] * acc
    return status, z, obj, it, kkt, nu, lam


# ---------------------------------------------------------------------------
# fast scalar-action policy minimizer for control-affine rollouts
#
#   u*(x) = argmin_{u in [lo,hi]}  R u^2 + c u + sum_s p_s env(Gd_s + Hd_s u)
#
# env is a 1-D convex piecewise-linear function given by ascending
# breakpoints bx (P+1) and per-piece slope/intercept arrays.
# ---------------------------------------------------------------------------


@jit()
def _pl_slope_at(bx, pa, y):
    P = pa.shape[0]
    i = np.searchsorted(bx, y) - 1
    if i < 0:
        i = 0
    if i > P - 1:
        i = P - 1
    return pa[i]


@jit(parallel=True)
def policy_min_quad_1d(Gd, Hd, R, cu, lo, hi, probs, bx, pa, fp_iters, bis_iters):
    """Batched exact-ish minimizer of a quadratic plus expected PL value.

    Gd, Hd: (B, N).  Uses a fixed-point pass (piece slopes frozen per
    iterate) with a bisection fallback on the monotone derivative; the
    returned u has ~1e-9 precision, giving second-order (~1e-18) value
    error.
    """
    B, N = Gd.shape
    out = np.empty(B)
    for i in prange(B):
        # derivative at the two ends decides boundary optima cheaply
        dlo = 2.0 * R * lo + cu
        dhi = 2.0 * R * hi + cu
        for s in range(N):
            dlo += probs[s] * _pl_slope_at(bx, pa, Gd[i, s] + Hd[i, s] * lo) * Hd[i, s]
            dhi += probs[s] * _pl_slope_at(bx, pa, Gd[i, s] + Hd[i, s] * hi) * Hd[i, s]
        if dlo >= 0.0:
            out[i] = lo
            continue
        if dhi <= 0.0:
            out[i] = hi
            continue
        u = 0.5 * (lo + hi)
        done = False
        if R > 0.0:
            for _k in range(fp_iters):
                acc = 0.0
                for s in range(N):
                    acc += probs[s] * _pl_slope_at(bx, pa, Gd[i, s] + Hd[i, s] * u) * Hd[i, s]
                un = (-cu - acc) / (2.0 * R)
                if un < lo:
                    un = lo
                if un > hi:
                    un = hi
                if abs(un - u) < 1e-12:
                    u = un
                    done = True
                    break
                u = un
        if not done:
            a = lo
            b = hi
            for _k in range(bis_iters):
                mid = 0.5 * (a + b)
                g = 2.0 * R * mid + cu
                for s in range(N):
                    g += probs[s] * _pl_slope_at(bx, pa, Gd[i, s] + Hd[i, s] * mid) * Hd[i, s]
                if g < 0.0:
                    a = mid
                else:
                    b = mid
            u = 0.5 * (a + b)
        out[i] = u
    return out
