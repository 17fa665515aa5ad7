import itertools

import numpy as np
import pytest

from convexdp import (BoundsOffLattice, NonNestedDomains, PointOutsideDomain,
                      StagedDomain, build_staged_grid, inner_lp_weights,
                      make_linear_convex, multilinear_weights,
                      validate_inclusion)
from convexdp.geometry import multilinear_weights as mw


def staged_2d(k=5, growth=0.2, spacing=0.2):
    t = np.arange(k + 1, dtype=float)
    lo = np.stack([-1.0 - growth * t] * 2, axis=1)
    return StagedDomain(2, lo, -lo)


def test_linear_convex_grid_counts():
    # nested squares growing by 0.2 per stage, spacing 0.2
    grid = build_staged_grid(staged_2d(), [0.2, 0.2])
    assert grid.node_count(0) == 11 ** 2 == 121
    assert grid.node_count(5) == 21 ** 2 == 441
    assert grid.delta == pytest.approx(0.2 * np.sqrt(2.0), abs=1e-12)


def test_tiny_1d_grid():
    dom = StagedDomain(1, np.array([[0.0]]), np.array([[1.0]]))
    grid = build_staged_grid(dom, [0.5])
    assert np.allclose(grid.node_coords.ravel(), [0.0, 0.5, 1.0])
    assert grid.num_cells == 2
    assert grid.delta == 0.5


def test_non_nested_domains_rejected():
    with pytest.raises(NonNestedDomains):
        StagedDomain(1, np.array([[0.0], [0.1]]), np.array([[1.0], [0.9]]))


def test_off_lattice_bound_rejected():
    dom = StagedDomain(1, np.array([[-0.25], [-1.0]]),
                       np.array([[0.25], [1.0]]))
    with pytest.raises(BoundsOffLattice):
        build_staged_grid(dom, [0.2])


def test_locate_cell_interior_and_ties():
    dom = StagedDomain(1, np.array([[0.0]]), np.array([[1.0]]))
    grid = build_staged_grid(dom, [0.5])
    c = grid.locate_cell(0, [0.75])
    assert (c.lower[0], c.upper[0]) == (0.5, 1.0)
    # a shared node belongs to the lower-index cell
    c = grid.locate_cell(0, [0.5])
    assert (c.lower[0], c.upper[0]) == (0.0, 0.5)
    with pytest.raises(PointOutsideDomain):
        grid.locate_cell(0, [1.2])


def test_locate_respects_stage_window():
    grid = build_staged_grid(staged_2d(), [0.2, 0.2])
    # the stage-0 upper face is interior to the final box; the located cell
    # must still sit inside stage 0
    c = grid.locate_cell(0, [1.0, 1.0])
    assert np.all(c.upper <= 1.0 + 1e-12)
    with pytest.raises(PointOutsideDomain):
        grid.locate_cell(0, [1.05, 0.0])
    grid.locate_cell(1, [1.05, 0.0])  # fine one stage later


def test_stage_membership_is_prefix():
    grid = build_staged_grid(staged_2d(), [0.2, 0.2])
    for t in range(grid.horizon + 1):
        lo, hi = grid.domain.box(t)
        inside = np.all((grid.node_coords >= lo - 1e-12)
                        & (grid.node_coords <= hi + 1e-12), axis=1)
        m = grid.node_count(t)
        assert inside[:m].all() and not inside[m:].any()
        assert set(grid.stage_node_index(t)) <= set(grid.stage_node_index(min(t + 1, grid.horizon)))
    assert np.all(np.diff(grid.stage_counts) >= 0)
    assert np.all(np.diff(grid.stage_cell_counts) >= 0)


def test_cells_cover_each_stage_box():
    grid = build_staged_grid(staged_2d(k=2), [0.2, 0.2])
    for t in range(grid.horizon + 1):
        lo, hi = grid.domain.box(t)
        vol = 0.0
        for i in range(grid.cell_count(t)):
            c = grid.cell(i)
            assert np.all(c.lower >= lo - 1e-12) and np.all(c.upper <= hi + 1e-12)
            vol += np.prod(c.upper - c.lower)
        assert vol == pytest.approx(np.prod(hi - lo), rel=1e-12)


def test_cell_vertices_are_corner_products():
    grid = build_staged_grid(staged_2d(k=1), [0.2, 0.2])
    c = grid.cell(17)
    corners = list(itertools.product(*[(c.lower[a], c.upper[a]) for a in range(2)]))
    # binary ordering: bit a of k = offset on axis a
    for k, vid in enumerate(c.vertex_node_ids):
        expect = np.array([c.upper[a] if (k >> a) & 1 else c.lower[a]
                           for a in range(2)])
        assert np.allclose(grid.node_coords[vid], expect, atol=1e-12)
        assert tuple(expect) in {tuple(reversed(x)) for x in corners} or \
            tuple(expect) in {tuple(x) for x in corners}


def test_delta_matches_cell_enumeration():
    grid = build_staged_grid(staged_2d(k=2), [0.2, 0.2])
    diags = [grid.cell(i).diagonal for i in range(grid.num_cells)]
    assert grid.delta == pytest.approx(max(diags), rel=1e-12)


def test_barycentric_reconstruction_everywhere():
    grid = build_staged_grid(staged_2d(k=1), [0.2, 0.2])
    rng = np.random.default_rng(3)
    for t in (0, 1):
        lo, hi = grid.domain.box(t)
        for _ in range(40):
            p = rng.uniform(lo, hi)
            cell = grid.locate_cell(t, p)
            vals = rng.normal(size=4)
            w, _ = inner_lp_weights(cell, vals, p)
            corners = np.array([[cell.upper[a] if (k >> a) & 1 else cell.lower[a]
                                 for a in range(2)] for k in range(4)])
            assert np.max(np.abs(w @ corners - p)) <= 1e-8
            assert abs(w.sum() - 1.0) <= 1e-9 and w.min() >= -1e-9


def test_shared_face_value_is_tie_rule_independent():
    grid = build_staged_grid(staged_2d(k=1), [0.2, 0.2])
    rng = np.random.default_rng(5)
    # points on interior vertical faces: both neighboring cells must give
    # the same inner value because off-face corners get zero weight
    for _ in range(20):
        iy = rng.integers(0, 10)
        x_face = -1.0 + 0.2 * rng.integers(1, 10)
        y = -1.0 + 0.2 * iy + 0.2 * rng.uniform(0.05, 0.95)
        p = np.array([x_face, y])
        left = grid.locate_cell(0, p)  # lower-index cell by the tie rule
        # right neighbor shares the face
        right_id = None
        for i in range(grid.num_cells):
            c = grid.cell(i)
            if abs(c.lower[0] - x_face) < 1e-12 and c.lower[1] <= y <= c.upper[1]:
                right_id = i
                break
        assert right_id is not None
        vals = rng.normal(size=4)

        def value_on(cell):
            # assign each corner its value keyed by coordinates so both
            # cells agree on shared corners
            corner_vals = []
            for k in range(4):
                cx = cell.upper[0] if k & 1 else cell.lower[0]
                cy = cell.upper[1] if k >> 1 & 1 else cell.lower[1]
                corner_vals.append(np.sin(3 * cx) + np.cos(2 * cy))
            return inner_lp_weights(cell, np.array(corner_vals), p)[1]

        v_left = value_on(left)
        v_right = value_on(grid.cell(right_id))
        assert v_left == pytest.approx(v_right, abs=1e-9)


def test_multilinear_weights_reconstruct():
    grid = build_staged_grid(staged_2d(k=1), [0.2, 0.2])
    cell = grid.locate_cell(0, [0.13, -0.41])
    w = multilinear_weights(cell, [0.13, -0.41])
    corners = np.array([[cell.upper[a] if (k >> a) & 1 else cell.lower[a]
                         for a in range(2)] for k in range(4)])
    assert np.allclose(w @ corners, [0.13, -0.41], atol=1e-12)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)


class TestValidateInclusion:
    def test_linear_convex_passes_exactly(self):
        prob, dom = make_linear_convex(seed=1, m=10)
        grid = build_staged_grid(dom, [0.2, 0.2])
        rep = validate_inclusion(prob, grid)
        assert rep.method == "interval"
        assert rep.passed and np.all(rep.worst_violation == 0.0)

    def test_shrunken_next_box_reports_violation(self):
        prob, dom = make_linear_convex(seed=1, m=10)
        # freeze every stage at the stage-0 box: growth can no longer absorb
        # the one-step reach
        lo = np.repeat(dom.lower[:1], dom.horizon + 1, axis=0)
        hi = np.repeat(dom.upper[:1], dom.horizon + 1, axis=0)
        bad = StagedDomain(2, lo, hi)
        grid = build_staged_grid(bad, [0.2, 0.2])
        rep = validate_inclusion(prob, grid)
        assert not rep.passed
        assert rep.worst_violation.max() > 0.0

    def test_zero_dynamics_pass(self):
        from convexdp import (AffineDynamics, ControlProblem,
                              FiniteDisturbance, QuadraticActionCost,
                              BoxActionSet)
        dom = StagedDomain(1, np.array([[-1.0], [-1.0]]),
                           np.array([[1.0], [1.0]]))
        grid = build_staged_grid(dom, [0.5])
        prob = ControlProblem(
            n=1, m=1, horizon=1,
            dynamics=AffineDynamics(np.zeros((1, 1)), np.zeros((1, 1)),
                                    np.zeros((1, 1))),
            stage_cost=QuadraticActionCost(lambda X: np.zeros(len(X)),
                                           np.eye(1)),
            terminal_cost=lambda X: np.zeros(len(X)),
            action_set=BoxActionSet(np.array([-1.0]), np.array([1.0])),
            disturbance=FiniteDisturbance(np.array([[0.0]]), np.array([1.0])))
        rep = validate_inclusion(prob, grid)
        assert rep.passed
