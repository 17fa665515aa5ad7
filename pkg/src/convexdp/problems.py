"""Benchmark problems and JSON problem ingestion.

Three builtins: a linear system with L1 state cost and a high-dimensional
action space, a scalar epidemic-intervention model (control-affine), and a
Dubins vehicle with a finite action set.  Generic problems load from JSON
configuration files; the schema is documented in the README with one
example per builtin under configs/.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
import numpy as np

from .errors import ParseError, ValidationError
from .geometry import StagedDomain
from .operators import (AffineDynamics, BoxActionSet, ControlAffineDynamics,
                        ControlProblem, FiniteActionSet, FiniteDisturbance,
                        GeneralDynamics, QuadraticActionCost)


def sample_support(dist: str, n_samples: int, seed: int, low=None, high=None,
                   dims: int = 1) -> FiniteDisturbance:
    """Equal-probability i.i.d. support draws; deterministic per seed.

    Only the uniform family is implemented; the config schema reserves the
    distribution tag for extensions.
    """
    if dist != "uniform":
        raise ValueError(f"unsupported distribution {dist!r} (only 'uniform')")
    if n_samples < 1:
        raise ValueError("need at least one support point")
    rng = np.random.default_rng(seed)
    lo = np.broadcast_to(np.asarray(low, float), (dims,))
    hi = np.broadcast_to(np.asarray(high, float), (dims,))
    pts = rng.uniform(lo, hi, size=(n_samples, dims))
    return FiniteDisturbance(pts, np.full(n_samples, 1.0 / n_samples))


# ---------------------------------------------------------------------------
# builtin: linear system, L1 state cost, wide action space
# ---------------------------------------------------------------------------


def make_linear_convex(seed: int, m: int, n_samples: int = 10, horizon: int = 5):
    """2-state linear system with m-dimensional actions and L1 + quadratic cost.

    The gain matrix B is uniform[0,1] with rows normalized to unit 1-norm;
    B and the disturbance support come from independent substreams of
    `seed`, so growing n_samples extends the support as a prefix without
    changing B.
    """
    if m < 1:
        raise ValueError("action dimension must be >= 1")
    A = np.array([[0.85, 0.10], [0.10, 0.85]])
    C = np.array([[1.0], [1.0]])
    rng_b = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    B = rng_b.uniform(0.0, 1.0, size=(2, m))
    B /= np.abs(B).sum(axis=1, keepdims=True)
    dist = sample_support("uniform", n_samples,
                          np.random.SeedSequence([seed, 1]), -0.1, 0.1)
    t = np.arange(horizon + 1, dtype=float)
    lower = np.stack([-1.0 - 0.2 * t, -1.0 - 0.2 * t], axis=1)
    upper = -lower
    problem = ControlProblem(
        n=2, m=m, horizon=horizon,
        dynamics=AffineDynamics(A, B, C),
        stage_cost=QuadraticActionCost(
            lambda X: np.abs(X).sum(axis=1), np.eye(m)),
        terminal_cost=lambda X: np.zeros(X.shape[0]),
        action_set=BoxActionSet(np.full(m, -0.15), np.full(m, 0.15)),
        disturbance=dist,
        name="linear_convex",
    )
    return problem, StagedDomain(2, lower, upper)


# ---------------------------------------------------------------------------
# builtin: epidemic intervention (control-affine, scalar state)
# ---------------------------------------------------------------------------


def make_epidemic(n_samples: int = 10, seed: int = 0, horizon: int = 20,
                  dt: float = 0.1, u_max: float = 1.0, penalty: float = 0.1):
    """Infection-ratio dynamics x' = x + [w (1-x) x - x u] dt.

    State is the infected fraction, the action is treatment effort, w is a
    random infectivity with uniform[1,2] support.  The state never leaves
    [0, 1], so every stage box is the unit interval.
    """
    dist = sample_support("uniform", n_samples, seed, 1.0, 2.0)

    def drift(X, W):
        x = X[:, 0]
        return (x + W[:, 0] * (1.0 - x) * x * dt).reshape(-1, 1)

    def gain(X, W):
        return (-X[:, 0] * dt).reshape(-1, 1, 1)

    K = horizon
    problem = ControlProblem(
        n=1, m=1, horizon=K,
        dynamics=ControlAffineDynamics(drift, gain),
        stage_cost=QuadraticActionCost(
            lambda X: X[:, 0].copy(), np.array([[penalty]])),
        terminal_cost=lambda X: np.zeros(X.shape[0]),
        action_set=BoxActionSet(np.array([0.0]), np.array([u_max])),
        disturbance=dist,
        name="epidemic",
    )
    dom = StagedDomain(1, np.zeros((K + 1, 1)), np.ones((K + 1, 1)))
    return problem, dom


# ---------------------------------------------------------------------------
# builtin: Dubins vehicle (finite actions, fully nonlinear, deterministic)
# ---------------------------------------------------------------------------


def make_dubins(horizon: int = 20, wheelbase: float = 0.5):
    """Planar vehicle steered to the vertical axis with heading pi.

    State (x, y, heading); actions are {0, -0.1} x {-1, 0, 1} as
    (speed, steering).  The heading wraps modulo 2*pi so one-step dynamics
    stay inside the stage boxes; the grid itself does not wrap.
    """
    speeds = np.array([0.0, -0.1])
    steers = np.array([-1.0, 0.0, 1.0])
    actions = np.array([(v, s) for v in speeds for s in steers])
    two_pi = 2.0 * np.pi

    def step(X, U, Xi):
        x, y, th = X[:, 0], X[:, 1], X[:, 2]
        v, s = U[:, 0], U[:, 1]
        out = np.empty_like(X)
        out[:, 0] = x + v * np.cos(th)
        out[:, 1] = y + v * np.sin(th)
        out[:, 2] = np.mod(th + v / wheelbase * np.tan(s), two_pi)
        return out

    def terminal(X):
        return X[:, 0] ** 2 + (X[:, 2] - np.pi) ** 2

    K = horizon
    t = np.arange(K + 1, dtype=float)
    lower = np.stack([-0.5 - 0.1 * t, -0.5 - 0.1 * t, np.zeros(K + 1)], axis=1)
    upper = np.stack([0.5 + 0.1 * t, 0.5 + 0.1 * t, np.full(K + 1, two_pi)], axis=1)
    problem = ControlProblem(
        n=3, m=2, horizon=K,
        dynamics=GeneralDynamics(step),
        stage_cost=QuadraticActionCost(
            lambda X: np.zeros(X.shape[0]), np.zeros((2, 2))),
        terminal_cost=terminal,
        action_set=FiniteActionSet(actions),
        disturbance=FiniteDisturbance(np.zeros((1, 1)), np.array([1.0])),
        name="dubins",
    )
    return problem, StagedDomain(3, lower, upper)


BUILTINS = {
    "linear_convex": lambda params: make_linear_convex(
        seed=int(params.get("seed", 0)), m=int(params.get("m", 1000)),
        n_samples=int(params.get("n_samples", 10)),
        horizon=int(params.get("horizon", 5))),
    "epidemic": lambda params: make_epidemic(
        n_samples=int(params.get("n_samples", 10)),
        seed=int(params.get("seed", 0)),
        horizon=int(params.get("horizon", 20))),
    "dubins": lambda params: make_dubins(
        horizon=int(params.get("horizon", 20))),
}


# ---------------------------------------------------------------------------
# configuration files
# ---------------------------------------------------------------------------


@dataclass
class ProblemConfig:
    """Parsed and validated problem + experiment description."""

    name: str
    raw: dict
    problem: ControlProblem
    domain: StagedDomain
    spacing: np.ndarray
    solver: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    experiment: dict = field(default_factory=dict)


def _build_dynamics(spec, errs, n, m, l):
    kind = spec.get("kind")
    if kind == "affine":
        try:
            A = np.asarray(spec["A"], float)
            B = np.asarray(spec["B"], float)
            C = np.asarray(spec["C"], float)
        except KeyError as e:
            errs.append(f"dynamics: missing matrix {e}")
            return None
        for nm, M, shape in (("A", A, (n, n)), ("B", B, (n, m)), ("C", C, (n, l))):
            if M.shape != shape:
                errs.append(f"dynamics.{nm}: shape {M.shape} != {shape}")
        return AffineDynamics(A, B, C)
    errs.append(f"dynamics.kind: unsupported {kind!r} (configs support 'affine'; "
                "use a builtin for control-affine or general dynamics)")
    return None


_STATE_TERMS = {
    "l1": lambda X: np.abs(X).sum(axis=1),
    "sum": lambda X: X.sum(axis=1),
    "quadratic": lambda X: (X ** 2).sum(axis=1),
    "zero": lambda X: np.zeros(X.shape[0]),
}


def _build_cost(spec, errs, m):
    kind = spec.get("kind", "quadratic_action")
    if kind != "quadratic_action":
        errs.append(f"cost.kind: unsupported {kind!r}")
        return None
    state = spec.get("state", "zero")
    if state not in _STATE_TERMS:
        errs.append(f"cost.state: unknown state term {state!r} "
                    f"(choose from {sorted(_STATE_TERMS)})")
        return None
    w = spec.get("action_weight", 1.0)
    W = np.eye(m) * float(w) if np.isscalar(w) else np.asarray(w, float)
    if W.shape != (m, m):
        errs.append(f"cost.action_weight: shape {W.shape} != ({m}, {m})")
        return None
    return QuadraticActionCost(_STATE_TERMS[state], W)


def _build_actions(spec, errs, m):
    kind = spec.get("kind")
    if kind == "box":
        lo = np.broadcast_to(np.asarray(spec.get("lower"), float), (m,))
        hi = np.broadcast_to(np.asarray(spec.get("upper"), float), (m,))
        if np.any(lo >= hi):
            errs.append("actions: lower must be below upper on every axis")
        return BoxActionSet(lo.copy(), hi.copy())
    if kind == "finite":
        acts = np.atleast_2d(np.asarray(spec.get("values"), float))
        if acts.shape[1] != m:
            errs.append(f"actions.values: {acts.shape[1]} columns != m = {m}")
        return FiniteActionSet(acts)
    errs.append(f"actions.kind: unsupported {kind!r}")
    return None


def _build_disturbance(spec, errs):
    if "support" in spec:
        sup = np.atleast_2d(np.asarray(spec["support"], float))
        pr = np.asarray(spec.get("probs", []), float)
        if pr.shape[0] != sup.shape[0]:
            errs.append("disturbance.probs: length must match support")
            return None
        if abs(pr.sum() - 1.0) > 1e-12:
            errs.append(f"disturbance.probs: sum to {pr.sum()!r}, not 1")
            return None
        return FiniteDisturbance(sup, pr)
    if "sampled" in spec:
        s = spec["sampled"]
        try:
            return sample_support(s.get("distribution", "uniform"),
                                  int(s["n"]), int(s.get("seed", 0)),
                                  s["low"], s["high"], int(s.get("dims", 1)))
        except (KeyError, ValueError) as e:
            errs.append(f"disturbance.sampled: {e}")
            return None
    errs.append("disturbance: needs 'support'+'probs' or 'sampled'")
    return None


def load_problem(path: str) -> ProblemConfig:
    """Parse a JSON problem file into a validated configuration.

    Every invariant violation is collected and reported with its field
    path in a single ValidationError.
    """
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"{path} is not valid JSON: {e}") from e
    return problem_from_dict(raw)


def problem_from_dict(raw: dict) -> ProblemConfig:
    errs = []
    name = raw.get("name", "unnamed")
    builtin = raw.get("builtin")
    if builtin is not None:
        if builtin not in BUILTINS:
            raise ValidationError([f"builtin: unknown problem {builtin!r} "
                                   f"(choose from {sorted(BUILTINS)})"])
        problem, domain = BUILTINS[builtin](raw.get("params", {}))
        spacing = np.broadcast_to(
            np.asarray(raw.get("spacing"), float), (problem.n,)).copy()
        return ProblemConfig(name=builtin, raw=raw, problem=problem,
                             domain=domain, spacing=spacing,
                             solver=raw.get("solver", {}),
                             seeds=raw.get("seeds", {}),
                             experiment=raw.get("experiment", {}))

    for key in ("dynamics", "cost", "actions", "horizon", "domains",
                "spacing", "disturbance"):
        if key not in raw:
            errs.append(f"{key}: missing required key")
    if errs:
        raise ValidationError(errs)

    doms = raw["domains"]
    lower = np.asarray(doms.get("lower"), float)
    upper = np.asarray(doms.get("upper"), float)
    if lower.ndim != 2 or lower.shape != upper.shape:
        errs.append("domains: lower/upper must be equal-shape (K+1, n) arrays")
        raise ValidationError(errs)
    n = lower.shape[1]
    K = int(raw["horizon"])
    if lower.shape[0] != K + 1:
        errs.append(f"domains: {lower.shape[0]} stages != horizon+1 = {K + 1}")
    if np.any(lower >= upper):
        errs.append("domains: lower must be strictly below upper everywhere")
    if np.any(lower[1:] > lower[:-1]) or np.any(upper[1:] < upper[:-1]):
        errs.append("domains: boxes must be nested, box(t) ⊆ box(t+1)")

    dist = _build_disturbance(raw["disturbance"], errs)
    l = dist.support.shape[1] if dist is not None else 1
    m = int(raw.get("m", 1))
    dyn = _build_dynamics(raw["dynamics"], errs, n, m, l)
    cost = _build_cost(raw["cost"], errs, m)
    actions = _build_actions(raw["actions"], errs, m)
    spacing = np.broadcast_to(np.asarray(raw["spacing"], float), (n,)).copy()
    if np.any(spacing <= 0):
        errs.append("spacing: must be positive")
    if errs:
        raise ValidationError(errs)

    terminal = raw.get("terminal_cost", "zero")
    if terminal not in _STATE_TERMS:
        raise ValidationError([f"terminal_cost: unknown term {terminal!r}"])
    problem = ControlProblem(
        n=n, m=m, horizon=K, dynamics=dyn, stage_cost=cost,
        terminal_cost=_STATE_TERMS[terminal], action_set=actions,
        disturbance=dist, name=name)
    try:
        domain = StagedDomain(n, lower, upper)
    except Exception as e:
        raise ValidationError([f"domains: {e}"])
    return ProblemConfig(name=name, raw=raw, problem=problem, domain=domain,
                         spacing=spacing, solver=raw.get("solver", {}),
                         seeds=raw.get("seeds", {}),
                         experiment=raw.get("experiment", {}))


def serialize_config(cfg: ProblemConfig) -> dict:
    """Round-trippable dict form of a configuration (identity on raw)."""
    return json.loads(json.dumps(cfg.raw))
