import json
import os

import numpy as np
import pytest

from convexdp import (ParseError, ValidationError, build_staged_grid,
                      load_problem, make_dubins, make_epidemic,
                      make_linear_convex, sample_support, validate_inclusion)
from convexdp.problems import problem_from_dict, serialize_config


class TestLinearConvex:
    def test_row_normalization(self):
        for seed in (0, 3, 99):
            p, _ = make_linear_convex(seed=seed, m=17)
            B = p.dynamics.b_mat
            assert np.max(np.abs(np.abs(B).sum(axis=1) - 1.0)) <= 1e-12

    def test_m1_forces_unit_gain(self):
        p, _ = make_linear_convex(seed=5, m=1)
        assert np.allclose(p.dynamics.b_mat, [[1.0], [1.0]])

    def test_reference_shape(self):
        p, dom = make_linear_convex(seed=0, m=1000, n_samples=10)
        assert p.m == 1000 and p.horizon == 5
        assert np.allclose(p.dynamics.a_mat, [[0.85, 0.1], [0.1, 0.85]])
        assert np.allclose(dom.lower[0], [-1.0, -1.0])
        assert np.allclose(dom.upper[5], [2.0, 2.0])
        grid = build_staged_grid(dom, [0.2, 0.2])
        assert grid.node_count(0) == 121 and grid.node_count(5) == 441

    def test_support_nesting_across_sizes(self):
        pa, _ = make_linear_convex(seed=4, m=3, n_samples=20)
        pb, _ = make_linear_convex(seed=4, m=3, n_samples=160)
        assert np.array_equal(pa.disturbance.support,
                              pb.disturbance.support[:20])
        assert np.array_equal(pa.dynamics.b_mat, pb.dynamics.b_mat)

    def test_inclusion_exact(self):
        p, dom = make_linear_convex(seed=1, m=10)
        rep = validate_inclusion(p, build_staged_grid(dom, [0.2, 0.2]))
        assert rep.method == "interval" and rep.passed


class TestEpidemic:
    def test_disease_free_state_invariant(self):
        p, _ = make_epidemic()
        X = np.zeros((7, 1))
        U = np.linspace(0, 1, 7).reshape(-1, 1)
        W = np.linspace(1, 2, 7).reshape(-1, 1)
        assert np.allclose(p.dynamics.batch(X, U, W), 0.0)

    def test_saturated_state_fixed_without_treatment(self):
        p, _ = make_epidemic()
        X = np.ones((5, 1))
        U = np.zeros((5, 1))
        W = np.linspace(1, 2, 5).reshape(-1, 1)
        assert np.allclose(p.dynamics.batch(X, U, W), 1.0)

    def test_inclusion_sampled_zero_violation(self):
        p, dom = make_epidemic()
        grid = build_staged_grid(dom, [0.01])
        rep = validate_inclusion(p, grid, n_samples=4000, seed=1)
        assert rep.method == "sampled"
        assert rep.passed

    def test_support_range(self):
        p, _ = make_epidemic(n_samples=10, seed=0)
        w = p.disturbance.support
        assert w.shape == (10, 1)
        assert w.min() >= 1.0 and w.max() <= 2.0


class TestDubins:
    def test_zero_speed_freezes_state(self):
        p, _ = make_dubins()
        X = np.array([[0.2, -0.3, 1.1]])
        U = np.array([[0.0, 1.0]])
        out = p.dynamics.batch(X, U, np.zeros((1, 1)))
        assert np.allclose(out, X)

    def test_straight_backward_step(self):
        p, _ = make_dubins()
        X = np.array([[0.0, 0.0, 0.0]])
        U = np.array([[-0.1, 0.0]])
        out = p.dynamics.batch(X, U, np.zeros((1, 1)))
        assert np.allclose(out, [[-0.1, 0.0, 0.0]], atol=1e-15)

    def test_terminal_cost_zero_on_target_set(self):
        p, _ = make_dubins()
        X = np.array([[0.0, 0.37, np.pi], [0.0, -0.9, np.pi]])
        assert np.allclose(p.terminal_cost(X), 0.0, atol=1e-15)

    def test_heading_wraps_and_inclusion_holds(self):
        p, dom = make_dubins()
        X = np.array([[0.0, 0.0, 6.2]])
        U = np.array([[-0.1, -1.0]])
        out = p.dynamics.batch(X, U, np.zeros((1, 1)))
        assert 0.0 <= out[0, 2] <= 2 * np.pi
        grid = build_staged_grid(dom, [0.1, 0.1, np.pi / 20])
        rep = validate_inclusion(p, grid, n_samples=3000, seed=2)
        assert rep.passed


class TestSampleSupport:
    def test_single_point(self):
        d = sample_support("uniform", 1, 0, -0.1, 0.1)
        assert d.support.shape == (1, 1) and d.probs[0] == 1.0

    def test_degenerate_interval(self):
        d = sample_support("uniform", 5, 0, 0.0, 0.0)
        assert np.all(d.support == 0.0)

    def test_empirical_mean(self):
        n = 100_000
        d = sample_support("uniform", n, 123, -0.1, 0.1)
        sigma = 0.2 / np.sqrt(12.0)
        assert abs(d.support.mean()) <= 3.0 * sigma / np.sqrt(n)

    def test_determinism(self):
        a = sample_support("uniform", 50, 7, -1.0, 1.0)
        b = sample_support("uniform", 50, 7, -1.0, 1.0)
        assert np.array_equal(a.support, b.support)

    def test_unknown_distribution(self):
        with pytest.raises(ValueError):
            sample_support("gaussian", 5, 0, 0, 1)


class TestLoadProblem:
    def test_builtin_epidemic_matches_factory(self, tmp_path):
        cfg = {"builtin": "epidemic", "params": {"n_samples": 10, "seed": 0},
               "spacing": 0.01}
        path = tmp_path / "e.json"
        path.write_text(json.dumps(cfg))
        loaded = load_problem(str(path))
        ref, ref_dom = make_epidemic(n_samples=10, seed=0)
        assert np.array_equal(loaded.problem.disturbance.support,
                              ref.disturbance.support)
        assert np.array_equal(loaded.domain.lower, ref_dom.lower)
        assert loaded.problem.horizon == ref.horizon

    def test_bad_probability_sum_named(self):
        cfg = {
            "name": "bad", "m": 1, "horizon": 1,
            "dynamics": {"kind": "affine", "A": [[1.0]], "B": [[1.0]],
                         "C": [[0.0]]},
            "cost": {"kind": "quadratic_action", "state": "zero"},
            "actions": {"kind": "box", "lower": -1, "upper": 1},
            "domains": {"lower": [[-1.0], [-2.0]], "upper": [[1.0], [2.0]]},
            "spacing": 0.5,
            "disturbance": {"support": [[0.0], [0.1]], "probs": [0.45, 0.45]},
        }
        with pytest.raises(ValidationError) as ei:
            problem_from_dict(cfg)
        assert "probs" in str(ei.value)

    def test_non_nested_domains_named(self):
        cfg = {
            "name": "bad", "m": 1, "horizon": 1,
            "dynamics": {"kind": "affine", "A": [[1.0]], "B": [[1.0]],
                         "C": [[0.0]]},
            "cost": {"kind": "quadratic_action", "state": "zero"},
            "actions": {"kind": "box", "lower": -1, "upper": 1},
            "domains": {"lower": [[-2.0], [-1.0]], "upper": [[2.0], [1.0]]},
            "spacing": 0.5,
            "disturbance": {"support": [[0.0]], "probs": [1.0]},
        }
        with pytest.raises(ValidationError) as ei:
            problem_from_dict(cfg)
        assert "nested" in str(ei.value)

    def test_multiple_violations_all_reported(self):
        cfg = {
            "name": "bad", "m": 1, "horizon": 2,
            "dynamics": {"kind": "affine", "A": [[1.0]], "B": [[1.0]],
                         "C": [[0.0]]},
            "cost": {"kind": "quadratic_action", "state": "nope"},
            "actions": {"kind": "box", "lower": 1, "upper": -1},
            "domains": {"lower": [[-2.0], [-1.0]], "upper": [[2.0], [1.0]]},
            "spacing": -0.5,
            "disturbance": {"support": [[0.0]], "probs": [1.0]},
        }
        with pytest.raises(ValidationError) as ei:
            problem_from_dict(cfg)
        msg = str(ei.value)
        for token in ("cost.state", "actions", "spacing", "stages"):
            assert token in msg

    def test_parse_error_on_bad_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ParseError):
            load_problem(str(path))

    def test_serialize_round_trip(self, tmp_path):
        path = tmp_path / "t.json"
        cfg = {
            "name": "toy", "m": 1, "horizon": 1,
            "dynamics": {"kind": "affine", "A": [[0.9]], "B": [[0.5]],
                         "C": [[1.0]]},
            "cost": {"kind": "quadratic_action", "state": "l1",
                     "action_weight": 1.0},
            "actions": {"kind": "box", "lower": -0.2, "upper": 0.2},
            "domains": {"lower": [[-1.0], [-1.5]], "upper": [[1.0], [1.5]]},
            "spacing": 0.1,
            "disturbance": {"support": [[-0.05], [0.08]],
                            "probs": [0.55, 0.45]},
        }
        path.write_text(json.dumps(cfg))
        loaded = load_problem(str(path))
        assert serialize_config(loaded) == cfg
        again = problem_from_dict(serialize_config(loaded))
        assert np.array_equal(again.domain.lower, loaded.domain.lower)
        assert again.problem.horizon == loaded.problem.horizon

    def test_repo_configs_load(self):
        root = os.path.join(os.path.dirname(__file__), os.pardir, "configs")
        for name in ("epidemic", "linear_convex", "dubins", "toy_affine"):
            cfg = load_problem(os.path.join(root, f"{name}.json"))
            assert cfg.problem.n >= 1
