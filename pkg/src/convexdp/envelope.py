"""Lower convex envelope of node values over a stage box.

The cheapest convex combination of all stage nodes reproducing a point y
equals the lower convex envelope of the lifted points (x_i, v_i) evaluated
at y.  The envelope is convex piecewise-linear, so it is the pointwise max
of its facet planes; facets come from the lower hull (qhull for n >= 2, a
monotone chain in 1-D).  Per-cell candidate facet lists make evaluation
O(few) instead of O(#facets).
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from . import kernels
from .errors import PointOutsideDomain
from .geometry import StagedGrid, multilinear_weights


class ValueEnvelope:
    """Facet-plane model of the envelope of one stage's node values."""

    def __init__(self, grid: StagedGrid, stage: int, planes, simplices,
                 cell_ptr, cell_idx):
        self.grid = grid
        self.stage = stage
        self.planes = planes          # (F, n+1) rows [a_1..a_n, b]
        self.simplices = simplices    # (F, n+1) global node ids, -1 = affine fit
        self.cell_ptr = cell_ptr      # CSR over stage-local cells
        self.cell_idx = cell_idx
        win = grid.stage_windows[stage]
        self.w_lo = np.ascontiguousarray(win[:, 0])
        self.w_hi = np.ascontiguousarray(win[:, 1])
        dims = self.w_hi - self.w_lo
        self.cstrides = np.ones(grid.dims, np.int64)
        for a in range(grid.dims - 2, -1, -1):
            self.cstrides[a] = self.cstrides[a + 1] * dims[a + 1]
        self.snap = grid.snap_units(stage)

    # -- evaluation -----------------------------------------------------------

    def locate(self, y) -> int:
        cf = kernels._envelope_locate(
            np.asarray(y, float), self.grid.axis_lo, self.grid.axis_inv_h,
            self.w_lo, self.w_hi, self.snap, self.cstrides)
        if cf < 0:
            raise PointOutsideDomain(f"{y!r} outside stage {self.stage} box")
        return int(cf)

    def value(self, y):
        y = np.asarray(y, float)
        v, f = kernels.envelope_eval(self.planes, self.cell_ptr, self.cell_idx,
                                     self.locate(y), y)
        return float(v), int(f)

    def value_batch(self, Y) -> np.ndarray:
        Y = np.atleast_2d(np.asarray(Y, float))
        out = np.empty(Y.shape[0])
        for i in range(Y.shape[0]):
            out[i], _ = self.value(Y[i])
        return out

    def _barycentric(self, f, y):
        simplex = self.simplices[f]
        pts = self.grid.node_coords[simplex]
        n = y.shape[0]
        M = np.ones((n + 1, n + 1))
        M[:n, :] = pts.T
        rhs = np.concatenate([y, [1.0]])
        try:
            lam = np.linalg.solve(M, rhs)
        except np.linalg.LinAlgError:
            lam = np.linalg.lstsq(M, rhs, rcond=None)[0]
        return simplex.copy(), lam

    def support(self, y):
        """Optimal sparse weights at y: (node_ids, weights).

        The supporting plane can be shared by several facet simplices
        (merged hull facets are triangulated); among the tied facets the
        one whose simplex contains y yields nonnegative weights.  The
        affine-fit fallback (single-plane envelopes) distributes weight
        multilinearly over the containing cell, which is optimal there
        because every node lies on the plane.
        """
        y = np.asarray(y, float)
        cell_flat = self.locate(y)
        val, f = kernels.envelope_eval(self.planes, self.cell_ptr,
                                       self.cell_idx, cell_flat, y)
        if self.simplices[f][0] < 0:
            cell = self.grid.locate_cell(self.stage, y)
            return cell.vertex_node_ids, multilinear_weights(cell, y)
        ids, lam = self._barycentric(f, y)
        if lam.min() >= -1e-9:
            return ids, lam
        lo, hi = self.cell_ptr[cell_flat], self.cell_ptr[cell_flat + 1]
        cands = self.cell_idx[lo:hi] if hi > lo else np.arange(self.planes.shape[0])
        vals = self.planes[cands, :-1] @ y + self.planes[cands, -1]
        best = (ids, lam)
        for k in np.argsort(-vals, kind="stable"):
            if vals[k] < val - 1e-8:
                break
            ids_k, lam_k = self._barycentric(int(cands[k]), y)
            if lam_k.min() >= -1e-9:
                return ids_k, lam_k
            if lam_k.min() > best[1].min():
                best = (ids_k, lam_k)
        return best


def _monotone_chain_1d(xs, vs):
    """Indices of the lower-hull vertices of 1-D lifted points (xs sorted)."""
    hull = []
    for i in range(xs.shape[0]):
        while len(hull) >= 2:
            i0, i1 = hull[-2], hull[-1]
            # keep the chain convex: drop i1 when it lies on or above the
            # segment (i0, i)
            cross = (xs[i1] - xs[i0]) * (vs[i] - vs[i0]) - (xs[i] - xs[i0]) * (vs[i1] - vs[i0])
            if cross <= 0.0:
                hull.pop()
            else:
                break
        hull.append(i)
    return hull


def build_envelope(grid: StagedGrid, stage: int, node_values) -> ValueEnvelope:
    """Lower hull of the stage nodes lifted by their values."""
    node_values = np.asarray(node_values, float)
    M = grid.node_count(stage)
    if node_values.shape[0] < M:
        raise ValueError("value table shorter than the stage node count")
    pts = grid.node_coords[:M]
    vals = node_values[:M]
    n = grid.dims

    win = grid.stage_windows[stage]
    dims = win[:, 1] - win[:, 0]
    n_cells = int(np.prod(dims))

    # affine tables need no hull: a single exact plane
    X1 = np.column_stack([pts, np.ones(M)])
    coef, *_ = np.linalg.lstsq(X1, vals, rcond=None)
    resid = np.max(np.abs(X1 @ coef - vals))
    vspan = max(float(vals.max() - vals.min()), 1.0)
    if resid <= 1e-12 * vspan:
        planes = coef.reshape(1, n + 1)
        simplices = np.full((1, n + 1), -1, np.int64)
        cell_ptr = np.zeros(n_cells + 1, np.int64)
        cell_idx = np.zeros(0, np.int64)
        return ValueEnvelope(grid, stage, planes, simplices, cell_ptr, cell_idx)

    if n == 1:
        order = np.argsort(pts[:, 0], kind="stable")
        xs = pts[order, 0]
        vs = vals[order]
        hull = _monotone_chain_1d(xs, vs)
        F = len(hull) - 1
        planes = np.empty((F, 2))
        simplices = np.empty((F, 2), np.int64)
        for k in range(F):
            i0, i1 = hull[k], hull[k + 1]
            a = (vs[i1] - vs[i0]) / (xs[i1] - xs[i0])
            planes[k, 0] = a
            planes[k, 1] = vs[i0] - a * xs[i0]
            simplices[k, 0] = order[i0]
            simplices[k, 1] = order[i1]
        vert_coords = pts[simplices.ravel()].reshape(F, 2, n)
    else:
        center = pts.mean(axis=0)
        scale = np.maximum(pts.max(axis=0) - pts.min(axis=0), 1e-12)
        vc = vals.mean()
        lifted = np.column_stack([(pts - center) / scale, (vals - vc) / vspan])
        try:
            hull = ConvexHull(lifted, qhull_options="Qt")
        except QhullError:
            hull = ConvexHull(lifted, qhull_options="Qt QJ")
        eq = hull.equations
        lower = eq[:, n] < -1e-12
        gz = eq[lower, n]
        a_sc = -eq[lower, :n] / gz[:, None]
        b_sc = -eq[lower, n + 1] / gz
        # map the scaled planes back to original units
        a = vspan * a_sc / scale
        b = vc + vspan * (b_sc - a_sc @ (center / scale))
        planes = np.column_stack([a, b])
        simplices = hull.simplices[lower].astype(np.int64)
        F = planes.shape[0]
        vert_coords = pts[simplices.ravel()].reshape(F, n + 1, n)

    # CSR candidate lists: a facet is a candidate in every cell its
    # projected simplex bounding box touches (inflated by the face snap)
    lo_idx = np.empty((F, n), np.int64)
    hi_idx = np.empty((F, n), np.int64)
    for a_ in range(n):
        r_lo = (vert_coords[:, :, a_].min(axis=1) - grid.axis_lo[a_]) * grid.axis_inv_h[a_]
        r_hi = (vert_coords[:, :, a_].max(axis=1) - grid.axis_lo[a_]) * grid.axis_inv_h[a_]
        lo_idx[:, a_] = np.clip(np.floor(r_lo - 1e-7).astype(np.int64),
                                win[a_, 0], win[a_, 1] - 1)
        hi_idx[:, a_] = np.clip(np.ceil(r_hi + 1e-7).astype(np.int64) - 1,
                                win[a_, 0], win[a_, 1] - 1)
    counts = np.prod(hi_idx - lo_idx + 1, axis=1)
    total = int(counts.sum())
    pair_cell = np.empty(total, np.int64)
    pair_facet = np.empty(total, np.int64)
    strides = np.ones(n, np.int64)
    for a_ in range(n - 2, -1, -1):
        strides[a_] = strides[a_ + 1] * dims[a_ + 1]
    pos = 0
    for fidx in range(F):
        ranges = [range(lo_idx[fidx, a_], hi_idx[fidx, a_] + 1) for a_ in range(n)]
        if n == 1:
            for i0 in ranges[0]:
                pair_cell[pos] = (i0 - win[0, 0]) * strides[0]
                pair_facet[pos] = fidx
                pos += 1
        elif n == 2:
            for i0 in ranges[0]:
                base0 = (i0 - win[0, 0]) * strides[0]
                for i1 in ranges[1]:
                    pair_cell[pos] = base0 + (i1 - win[1, 0]) * strides[1]
                    pair_facet[pos] = fidx
                    pos += 1
        else:
            grids_nd = np.meshgrid(*[np.arange(r.start, r.stop) for r in ranges],
                                   indexing="ij")
            flat = np.zeros(grids_nd[0].size, np.int64)
            for a_ in range(n):
                flat += (grids_nd[a_].ravel() - win[a_, 0]) * strides[a_]
            k = flat.shape[0]
            pair_cell[pos:pos + k] = flat
            pair_facet[pos:pos + k] = fidx
            pos += k
    order2 = np.argsort(pair_cell, kind="stable")
    pair_cell = pair_cell[order2]
    pair_facet = pair_facet[order2]
    cell_ptr = np.zeros(n_cells + 1, np.int64)
    np.add.at(cell_ptr, pair_cell + 1, 1)
    cell_ptr = np.cumsum(cell_ptr)
    return ValueEnvelope(grid, stage, np.ascontiguousarray(planes),
                         np.ascontiguousarray(simplices),
                         np.ascontiguousarray(cell_ptr),
                         np.ascontiguousarray(pair_facet))
