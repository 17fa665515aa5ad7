"""Staged rectilinear discretization of the state space.

A problem declares nested stage boxes box(0) ⊆ … ⊆ box(K); the grid lays a
single rectilinear lattice over box(K) and relabels nodes and cells so that
stage membership is a prefix: the first M_t node ids (and the first N_{C,t}
cell ids) are exactly those inside box(t).  All queries are read-only after
construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (BoundsOffLattice, InclusionViolation, NonNestedDomains,
                     PointOutsideCell, PointOutsideDomain)

FACE_TOL = 1e-9  # clamp tolerance, relative to the axis span


@dataclass(frozen=True)
class StagedDomain:
    """Nested per-stage boxes: lower/upper are (K+1, n) arrays."""

    dims: int
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, float)
        upper = np.asarray(self.upper, float)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        if lower.ndim != 2 or lower.shape != upper.shape or lower.shape[1] != self.dims:
            raise ValueError("lower/upper must be (K+1, dims) arrays")
        if not np.all(lower < upper):
            raise NonNestedDomains("every axis needs lower < upper at every stage")
        if np.any(lower[1:] > lower[:-1]) or np.any(upper[1:] < upper[:-1]):
            raise NonNestedDomains("stage boxes must be nested: box(t) ⊆ box(t+1)")

    @property
    def horizon(self) -> int:
        return self.lower.shape[0] - 1

    def box(self, t: int):
        return self.lower[t], self.upper[t]

    def contains(self, t: int, x, tol_rel: float = FACE_TOL) -> bool:
        lo, hi = self.box(t)
        tol = tol_rel * (hi - lo)
        x = np.asarray(x, float)
        return bool(np.all(x >= lo - tol) and np.all(x <= hi + tol))


@dataclass(frozen=True)
class Cell:
    """Axis-aligned grid cell: interval indices, corner ids and bounds.

    vertex_node_ids is ordered by binary corner index: bit a of position k
    is the offset along axis a, so id 0 is the lower corner and id 2^n - 1
    the upper one.
    """

    axis_interval_index: tuple
    vertex_node_ids: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.upper - self.lower))


class StagedGrid:
    """Rectilinear grid over box(K) with prefix-ordered stage membership."""

    def __init__(self, domain: StagedDomain, spacing, axis_nodes, node_lattice,
                 node_coords, stage_counts, lattice_ids, stage_windows,
                 cell_lattice, stage_cell_counts):
        self.domain = domain
        self.spacing = spacing                  # (n,) lattice step per axis
        self.axis_nodes = axis_nodes            # list of n sorted coordinate arrays
        self.node_lattice = node_lattice        # (M, n) int axis indices per node
        self.node_coords = node_coords          # (M, n) float coordinates
        self.stage_counts = stage_counts        # (K+1,) M_t
        self.lattice_ids = lattice_ids          # flat C-order lattice -> global id
        self.stage_windows = stage_windows      # (K+1, n, 2) node-index windows
        self.cell_lattice = cell_lattice        # (NC, n) int interval indices
        self.stage_cell_counts = stage_cell_counts  # (K+1,) N_{C,t}
        self._cell_ids = {tuple(row): i for i, row in enumerate(cell_lattice)}
        counts = np.array([len(a) for a in axis_nodes], np.int64)
        self.axis_counts = counts
        self.lat_strides = np.ones(self.dims, np.int64)
        for a in range(self.dims - 2, -1, -1):
            self.lat_strides[a] = self.lat_strides[a + 1] * counts[a + 1]
        self.axis_lo = np.array([a[0] for a in axis_nodes])
        self.axis_inv_h = 1.0 / np.asarray(spacing, float)

    # -- basic queries ------------------------------------------------------

    @property
    def dims(self) -> int:
        return self.domain.dims

    @property
    def horizon(self) -> int:
        return self.domain.horizon

    @property
    def num_nodes(self) -> int:
        return self.node_coords.shape[0]

    @property
    def num_cells(self) -> int:
        return self.cell_lattice.shape[0]

    def node_count(self, t: int) -> int:
        return int(self.stage_counts[t])

    def cell_count(self, t: int) -> int:
        return int(self.stage_cell_counts[t])

    def stage_node_index(self, t: int) -> np.ndarray:
        """Global node ids inside box(t) (a prefix by construction)."""
        return np.arange(self.stage_counts[t])

    def stage_nodes(self, t: int) -> np.ndarray:
        return self.node_coords[: self.stage_counts[t]]

    def node_ids_at(self, X) -> np.ndarray:
        """Global ids of lattice points given by coordinates (exact match)."""
        X = np.atleast_2d(np.asarray(X, float))
        flat = np.zeros(X.shape[0], np.int64)
        for a in range(self.dims):
            r = (X[:, a] - self.axis_lo[a]) * self.axis_inv_h[a]
            i = np.round(r).astype(np.int64)
            if np.max(np.abs(r - i)) > 1e-6 or i.min() < 0 \
                    or i.max() >= self.axis_counts[a]:
                raise ValueError("coordinates do not sit on grid nodes")
            flat += i * self.lat_strides[a]
        return self.lattice_ids[flat]

    @property
    def delta(self) -> float:
        """Largest Euclidean cell diagonal (all cells share it here)."""
        return float(np.linalg.norm(np.asarray(self.spacing, float)))

    # -- cells ---------------------------------------------------------------

    def cell(self, cell_id: int) -> Cell:
        idx = self.cell_lattice[cell_id]
        n = self.dims
        lower = np.array([self.axis_nodes[a][idx[a]] for a in range(n)])
        upper = np.array([self.axis_nodes[a][idx[a] + 1] for a in range(n)])
        verts = np.empty(1 << n, np.int64)
        for k in range(1 << n):
            flat = 0
            for a in range(n):
                flat += (idx[a] + ((k >> a) & 1)) * self.lat_strides[a]
            verts[k] = self.lattice_ids[flat]
        return Cell(tuple(int(v) for v in idx), verts, lower, upper)

    @property
    def cells(self):
        """All cells in stage-prefix order (materialized on demand)."""
        return [self.cell(i) for i in range(self.num_cells)]

    def snap_units(self, t: int) -> np.ndarray:
        """Face tolerance per axis in node-index units for stage t."""
        lo, hi = self.domain.box(t)
        return FACE_TOL * (hi - lo) * self.axis_inv_h

    def locate_cell(self, t: int, x) -> Cell:
        """The cell of box(t) containing x (lowest-index rule on ties)."""
        x = np.asarray(x, float)
        win = self.stage_windows[t]
        snap = self.snap_units(t)
        idx = np.empty(self.dims, np.int64)
        for a in range(self.dims):
            ia = kernels.locate_interval(x[a], self.axis_lo[a], self.axis_inv_h[a],
                                         win[a, 0], win[a, 1], snap[a])
            if ia < 0:
                lo, hi = self.domain.box(t)
                raise PointOutsideDomain(
                    f"coordinate {x[a]!r} on axis {a} outside [{lo[a]}, {hi[a]}] "
                    f"of stage {t}")
            idx[a] = ia
        return self.cell(self._cell_ids[tuple(int(v) for v in idx)])

    def locate_cell_id(self, t: int, x) -> int:
        x = np.asarray(x, float)
        win = self.stage_windows[t]
        snap = self.snap_units(t)
        idx = np.empty(self.dims, np.int64)
        for a in range(self.dims):
            ia = kernels.locate_interval(x[a], self.axis_lo[a], self.axis_inv_h[a],
                                         win[a, 0], win[a, 1], snap[a])
            if ia < 0:
                raise PointOutsideDomain(f"{x!r} outside stage {t} box")
            idx[a] = ia
        return self._cell_ids[tuple(int(v) for v in idx)]


def build_staged_grid(domain: StagedDomain, spacing) -> StagedGrid:
    """Lay the lattice over box(K) and relabel nodes/cells by first stage.

    Every stage bound must sit on the lattice anchored at box(K)'s lower
    corner (1e-9 relative tolerance), otherwise BoundsOffLattice.
    """
    n = domain.dims
    spacing = np.asarray(spacing, float)
    if spacing.shape != (n,) or np.any(spacing <= 0):
        raise ValueError("spacing must be positive with one entry per axis")
    K = domain.horizon
    lo_K, hi_K = domain.box(K)

    counts = np.empty(n, np.int64)
    axis_nodes = []
    for a in range(n):
        span = hi_K[a] - lo_K[a]
        steps = span / spacing[a]
        if abs(steps - round(steps)) > 1e-9 * max(1.0, abs(steps)):
            raise BoundsOffLattice(
                f"axis {a}: box span {span} is not a multiple of spacing {spacing[a]}")
        counts[a] = int(round(steps)) + 1
        axis_nodes.append(lo_K[a] + spacing[a] * np.arange(counts[a]))

    # stage windows: node-index ranges of each stage box on each axis
    windows = np.empty((K + 1, n, 2), np.int64)
    for t in range(K + 1):
        lo_t, hi_t = domain.box(t)
        for a in range(n):
            for side, bound in ((0, lo_t[a]), (1, hi_t[a])):
                off = (bound - lo_K[a]) / spacing[a]
                if abs(off - round(off)) > 1e-9 * max(1.0, counts[a]):
                    raise BoundsOffLattice(
                        f"stage {t} bound {bound} on axis {a} is off the lattice "
                        f"anchored at {lo_K[a]} with step {spacing[a]}")
                windows[t, a, side] = int(round(off))

    # first stage containing each lattice node, then lexicographic order
    grids = np.meshgrid(*[np.arange(c) for c in counts], indexing="ij")
    lattice = np.stack([g.ravel() for g in grids], axis=1)  # (prod, n) C-order
    first_stage = np.full(lattice.shape[0], K, np.int64)
    for t in range(K, -1, -1):
        inside = np.ones(lattice.shape[0], bool)
        for a in range(n):
            inside &= (lattice[:, a] >= windows[t, a, 0]) & (lattice[:, a] <= windows[t, a, 1])
        first_stage[inside] = t
    order = np.lexsort(tuple(lattice[:, a] for a in range(n - 1, -1, -1)) + (first_stage,))
    node_lattice = lattice[order]
    lattice_ids = np.empty(lattice.shape[0], np.int64)
    flat = np.zeros(node_lattice.shape[0], np.int64)
    strides = np.ones(n, np.int64)
    for a in range(n - 2, -1, -1):
        strides[a] = strides[a + 1] * counts[a + 1]
    for a in range(n):
        flat += node_lattice[:, a] * strides[a]
    lattice_ids[flat] = np.arange(node_lattice.shape[0])
    node_coords = np.empty(node_lattice.shape, float)
    for a in range(n):
        node_coords[:, a] = axis_nodes[a][node_lattice[:, a]]
    stage_counts = np.empty(K + 1, np.int64)
    fs_sorted = first_stage[order]
    for t in range(K + 1):
        stage_counts[t] = int(np.searchsorted(fs_sorted, t, side="right"))

    # cells analogously, keyed by their lower-corner interval index
    cgrids = np.meshgrid(*[np.arange(c - 1) for c in counts], indexing="ij")
    clattice = np.stack([g.ravel() for g in cgrids], axis=1)
    cfirst = np.full(clattice.shape[0], K, np.int64)
    for t in range(K, -1, -1):
        inside = np.ones(clattice.shape[0], bool)
        for a in range(n):
            inside &= (clattice[:, a] >= windows[t, a, 0]) & (clattice[:, a] <= windows[t, a, 1] - 1)
        cfirst[inside] = t
    corder = np.lexsort(tuple(clattice[:, a] for a in range(n - 1, -1, -1)) + (cfirst,))
    cell_lattice = clattice[corder]
    stage_cell_counts = np.empty(K + 1, np.int64)
    cf_sorted = cfirst[corder]
    for t in range(K + 1):
        stage_cell_counts[t] = int(np.searchsorted(cf_sorted, t, side="right"))

    return StagedGrid(domain, spacing, axis_nodes, node_lattice, node_coords,
                      stage_counts, lattice_ids, windows, cell_lattice,
                      stage_cell_counts)


def multilinear_weights(cell: Cell, y) -> np.ndarray:
    """Product-form interpolation weights of y over the cell corners."""
    y = np.asarray(y, float)
    n = y.shape[0]
    theta = (y - cell.lower) / (cell.upper - cell.lower)
    theta = np.clip(theta, 0.0, 1.0)
    w = np.ones(1 << n)
    for k in range(1 << n):
        for a in range(n):
            w[k] *= theta[a] if (k >> a) & 1 else 1.0 - theta[a]
    return w


@dataclass
class InclusionReport:
    """Worst one-step overshoot of box(t+1) per stage (0 means contained)."""

    method: str
    worst_violation: np.ndarray = field(default=None)

    @property
    def passed(self) -> bool:
        return bool(np.all(self.worst_violation <= 1e-12))

    def require(self):
        if not self.passed:
            t = int(np.argmax(self.worst_violation))
            raise InclusionViolation(
                f"dynamics leave box({t + 1}) by {self.worst_violation[t]:.3e} "
                f"(method={self.method}); shrink the action set or grow the boxes")
        return self


def validate_inclusion(problem, grid: StagedGrid, n_samples: int = 2000,
                       seed: int = 0) -> InclusionReport:
    """Check f(box(t), U, Ξ) ⊆ box(t+1) for every stage.

    Affine dynamics with a state-independent box action set are checked
    exactly with interval arithmetic; anything else is sampled with the
    seeded generator and the report carries the worst observed violation.
    """
    from .operators import AffineDynamics, BoxActionSet, FiniteActionSet

    if problem.n != grid.dims:
        raise ValueError("problem and grid dimension mismatch")
    K = grid.horizon
    dom = grid.domain
    dyn = problem.dynamics
    aset = problem.action_set
    xi = problem.disturbance.support

    exact = isinstance(dyn, AffineDynamics) and isinstance(aset, BoxActionSet) \
        and aset.bounds_fn is None and np.all(np.isfinite(aset.lower)) \
        and np.all(np.isfinite(aset.upper))
    worst = np.zeros(K)
    if exact:
        A, B, C = dyn.a_mat, dyn.b_mat, dyn.c_mat
        cxi = xi @ C.T
        bu_lo = np.minimum(B, 0.0) @ aset.upper + np.maximum(B, 0.0) @ aset.lower
        bu_hi = np.maximum(B, 0.0) @ aset.upper + np.minimum(B, 0.0) @ aset.lower
        for t in range(K):
            lo_t, hi_t = dom.box(t)
            ax_lo = np.minimum(A, 0.0) @ hi_t + np.maximum(A, 0.0) @ lo_t
            ax_hi = np.maximum(A, 0.0) @ hi_t + np.minimum(A, 0.0) @ lo_t
            reach_lo = ax_lo + bu_lo + cxi.min(axis=0)
            reach_hi = ax_hi + bu_hi + cxi.max(axis=0)
            lo_n, hi_n = dom.box(t + 1)
            worst[t] = max(0.0, float(np.max(reach_hi - hi_n)),
                           float(np.max(lo_n - reach_lo)))
        return InclusionReport("interval", worst)

    rng = np.random.default_rng(seed)
    for t in range(K):
        lo_t, hi_t = dom.box(t)
        X = rng.uniform(lo_t, hi_t, size=(n_samples, problem.n))
        if isinstance(aset, FiniteActionSet):
            U = aset.actions[rng.integers(0, len(aset.actions), n_samples)]
        elif isinstance(aset, BoxActionSet) and aset.bounds_fn is None:
            U = rng.uniform(aset.lower, aset.upper, size=(n_samples, problem.m))
        elif isinstance(aset, BoxActionSet):
            U = np.empty((n_samples, problem.m))
            for i in range(n_samples):
                blo, bhi = aset.bounds_at(X[i])
                U[i] = rng.uniform(blo, bhi)
        else:
            # linear-inequality sets: sample their bounding box and keep all
            # points (a superset of U, so violations are conservative)
            blo, bhi = aset.bounding_box()
            U = rng.uniform(blo, bhi, size=(n_samples, problem.m))
        S = rng.integers(0, xi.shape[0], n_samples)
        Y = problem.dynamics.batch(X, U, xi[S])
        lo_n, hi_n = dom.box(t + 1)
        over = np.maximum(Y - hi_n, 0.0) + np.maximum(lo_n - Y, 0.0)
        worst[t] = float(over.max(initial=0.0))
    return InclusionReport("sampled", worst)


def barycentric_in_cell(cell: Cell, y, weights) -> float:
    """Max-norm reconstruction error of y by the given corner weights."""
    n = cell.lower.shape[0]
    corners = np.empty((1 << n, n))
    for k in range(1 << n):
        for a in range(n):
            corners[k, a] = cell.upper[a] if (k >> a) & 1 else cell.lower[a]
    rec = weights @ corners
    return float(np.max(np.abs(rec - np.asarray(y, float))))


def check_point_in_cell(cell: Cell, y, tol_rel: float = FACE_TOL):
    y = np.asarray(y, float)
    span = cell.upper - cell.lower
    if np.any(y < cell.lower - tol_rel * span) or np.any(y > cell.upper + tol_rel * span):
        raise PointOutsideCell(f"{y!r} outside cell [{cell.lower}, {cell.upper}]")
