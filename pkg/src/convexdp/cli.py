"""Experiment runner.

    convexdp <solve|converge-grid|converge-samples|rollout|gap>
             --config <path> [--out <dir>] [--workers N] [--seed S]

Every run writes its artifacts under --out together with a manifest.json
listing the files, the configuration hash, and the seeds in effect.
Exit codes: 0 success, 2 configuration/validation problems, 1 runtime
failures (with stage/node context in the message).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time

import numpy as np

from .backend import BACKEND_NAME, default_workers
from .engine import (EngineConfig, aposteriori_gap, backward_induction,
                     policy_cost_tables, rollout, save_bundle)
from .errors import ConvexDPError, ParseError, ValidationError
from .geometry import build_staged_grid
from .operators import FiniteDisturbance, OperatorKind
from .problems import ProblemConfig, load_problem
from .solver import SolverConfig


def _config_hash(raw: dict) -> str:
    return hashlib.sha256(
        json.dumps(raw, sort_keys=True).encode()).hexdigest()


def _solver_config(cfg: ProblemConfig) -> SolverConfig:
    s = cfg.solver or {}
    return SolverConfig(
        kkt_tol=float(s.get("kkt_tol", 1e-8)),
        max_iter=int(s.get("max_iter", 200)),
        lp_pivot_tol=float(s.get("lp_pivot_tol", 1e-9)))


def _engine_config(cfg: ProblemConfig, args) -> EngineConfig:
    exp = cfg.experiment or {}
    action_grid = exp.get("action_grid")
    return EngineConfig(
        solver=_solver_config(cfg),
        action_grid=action_grid,
        check_inclusion=bool(exp.get("check_inclusion", True)),
        seed=int(args.seed if args.seed is not None
                 else cfg.seeds.get("engine", 0)),
        workers=args.workers,
        checkpoint_dir=exp.get("checkpoint_dir"))


def _operator_kind(cfg: ProblemConfig) -> OperatorKind:
    return OperatorKind(str(cfg.experiment.get("operator", "convex")).lower())


class Manifest:
    def __init__(self, out_dir: str, raw_config: dict, seeds: dict):
        self.out_dir = out_dir
        self.files = []
        self.raw_config = raw_config
        self.seeds = seeds
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        self.files.append(name)
        return os.path.join(self.out_dir, name)

    def write(self):
        payload = {
            "files": sorted(self.files),
            "config_hash": _config_hash(self.raw_config),
            "seeds": self.seeds,
            "backend": BACKEND_NAME,
        }
        with open(os.path.join(self.out_dir, "manifest.json"), "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)


def _write_csv(path: str, header: str, rows):
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join("%.17g" % v if isinstance(v, float) else str(v)
                              for v in row) + "\n")


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------


def run_solve(cfg: ProblemConfig, out_dir: str, args) -> int:
    tic = time.perf_counter()
    grid = build_staged_grid(cfg.domain, cfg.spacing)
    engine_cfg = _engine_config(cfg, args)
    bundle = backward_induction(cfg.problem, grid, _operator_kind(cfg), engine_cfg)
    wall = time.perf_counter() - tic
    man = Manifest(out_dir, cfg.raw, {"engine": engine_cfg.seed})
    save_bundle(bundle, out_dir, seeds={"engine": engine_cfg.seed}, wall_time=wall)
    man.files += ["values.csv", "policy.csv", "values.json"]
    with open(man.path("stats.json"), "w") as fh:
        json.dump({"stages": bundle.stats, "wall_time_seconds": wall},
                  fh, indent=2, sort_keys=True)
    man.write()
    print(f"solved {cfg.name}: {grid.horizon + 1} stage tables, "
          f"{grid.node_count(grid.horizon)} nodes at the final stage, "
          f"{wall:.2f}s")
    return 0


# ---------------------------------------------------------------------------
# grid convergence
# ---------------------------------------------------------------------------


def _table0_on_shared_nodes(bundle, ref_bundle):
    """Reference stage-0 values at the coarse grid's stage-0 nodes."""
    ref = ref_bundle.grid
    X = bundle.grid.stage_nodes(0)
    try:
        ref_ids = ref.node_ids_at(X)
    except ValueError:
        raise ValidationError(
            ["spacings: coarse nodes must lie on the reference lattice "
             "(reference spacing must divide each coarse spacing)"])
    return ref_bundle.tables[0].node_values[ref_ids]


def run_converge_grid(cfg: ProblemConfig, out_dir: str, args) -> int:
    exp = cfg.experiment
    spacings = [float(s) for s in exp.get("spacings", [])]
    ref_spacing = float(exp.get("reference_spacing", 0))
    if not spacings or ref_spacing <= 0:
        raise ValidationError(["experiment: converge-grid needs 'spacings' "
                               "(strictly decreasing) and 'reference_spacing'"])
    if any(b >= a for a, b in zip(spacings, spacings[1:])):
        raise ValidationError(["experiment.spacings: must be strictly decreasing"])
    if ref_spacing > spacings[-1]:
        raise ValidationError(["experiment.reference_spacing: must be finer "
                               "than every compared spacing"])
    engine_cfg = _engine_config(cfg, args)
    kind = _operator_kind(cfg)
    man = Manifest(out_dir, cfg.raw, {"engine": engine_cfg.seed})

    runs = []
    for sp in spacings + [ref_spacing]:
        tic = time.perf_counter()
        grid = build_staged_grid(cfg.domain, np.full(cfg.problem.n, sp))
        bundle = backward_induction(cfg.problem, grid, kind, engine_cfg)
        runs.append((sp, bundle, time.perf_counter() - tic))
    ref_bundle = runs[-1][1]

    rows = []
    errors = []
    for sp, bundle, secs in runs[:-1]:
        ref_vals = _table0_on_shared_nodes(bundle, ref_bundle)
        diff = bundle.tables[0].node_values - ref_vals
        l1 = float(np.mean(np.abs(diff)))
        linf = float(np.max(np.abs(diff)))
        errors.append((l1, linf))
        rows.append([sp, bundle.grid.num_nodes, l1, linf, float(secs),
                     float("nan"), float("nan")])
    for k in range(1, len(rows)):
        rows[k][5] = float(np.log2(errors[k - 1][0] / errors[k][0]))
        rows[k][6] = float(np.log2(errors[k - 1][1] / errors[k][1]))
    _write_csv(man.path("convergence_grid.csv"),
               "spacing,nodes,l1_error,linf_error,seconds,order_l1,order_linf",
               rows)
    save_bundle(ref_bundle, os.path.join(out_dir, "reference"),
                seeds={"engine": engine_cfg.seed}, wall_time=runs[-1][2])
    man.files += ["reference/values.csv", "reference/policy.csv",
                  "reference/values.json"]
    man.write()
    for row in rows:
        print(f"spacing {row[0]:g}: nodes {row[1]}, l1 {row[2]:.6g}, "
              f"linf {row[3]:.6g}, {row[4]:.2f}s")
    return 0


# ---------------------------------------------------------------------------
# sample-size convergence (nested supports)
# ---------------------------------------------------------------------------


def run_converge_samples(cfg: ProblemConfig, out_dir: str, args) -> int:
    exp = cfg.experiment
    sizes = [int(s) for s in exp.get("sample_sizes", [])]
    ref_n = int(exp.get("reference_samples", 0))
    if not sizes or ref_n <= 0:
        raise ValidationError(["experiment: converge-samples needs "
                               "'sample_sizes' (strictly increasing) and "
                               "'reference_samples'"])
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValidationError(["experiment.sample_sizes: must be strictly increasing"])
    if ref_n < sizes[-1]:
        raise ValidationError(["experiment.reference_samples: must exceed the "
                               "compared sizes"])
    engine_cfg = _engine_config(cfg, args)
    kind = _operator_kind(cfg)
    man = Manifest(out_dir, cfg.raw, {"engine": engine_cfg.seed})

    base = cfg.problem
    if base.disturbance.n_samples < ref_n:
        raise ValidationError([
            f"disturbance: the problem carries {base.disturbance.n_samples} "
            f"support points, fewer than reference_samples = {ref_n}; "
            "configure the problem with at least that many"])
    support = base.disturbance.support

    grid = build_staged_grid(cfg.domain, cfg.spacing)
    runs = []
    for nn in sizes + [ref_n]:
        sub = dataclasses.replace(
            base, disturbance=FiniteDisturbance(
                support[:nn], np.full(nn, 1.0 / nn)))
        tic = time.perf_counter()
        bundle = backward_induction(sub, grid, kind, engine_cfg)
        runs.append((nn, bundle, time.perf_counter() - tic))
    ref_vals = runs[-1][1].tables[0].node_values

    rows = []
    for nn, bundle, secs in runs[:-1]:
        diff = bundle.tables[0].node_values - ref_vals
        rows.append([nn, bundle.grid.num_nodes,
                     float(np.mean(np.abs(diff))), float(np.max(np.abs(diff))),
                     float(secs)])
    _write_csv(man.path("convergence_samples.csv"),
               "n_samples,nodes,l1_error,linf_error,seconds", rows)
    man.write()
    for row in rows:
        print(f"N {row[0]}: l1 {row[2]:.6g}, linf {row[3]:.6g}, {row[4]:.2f}s")
    return 0


# ---------------------------------------------------------------------------
# rollout and gap
# ---------------------------------------------------------------------------


def run_rollout(cfg: ProblemConfig, out_dir: str, args) -> int:
    exp = cfg.experiment
    starts = np.atleast_2d(np.asarray(exp.get("initial_states", []), float))
    if starts.size == 0:
        raise ValidationError(["experiment: rollout needs 'initial_states'"])
    n_paths = int(exp.get("n_paths", 1))
    engine_cfg = _engine_config(cfg, args)
    grid = build_staged_grid(cfg.domain, cfg.spacing)
    bundle = backward_induction(cfg.problem, grid, _operator_kind(cfg), engine_cfg)
    man = Manifest(out_dir, cfg.raw,
                   {"engine": engine_cfg.seed, "rollout": engine_cfg.seed})
    handles = bundle.policy_handles(0)
    p = cfg.problem
    summary = []
    for si, x0 in enumerate(starts):
        # one traced trajectory per start (first sampled path), plus stats
        rng = np.random.default_rng([engine_cfg.seed, si])
        X = x0.copy()
        rows = []
        total = 0.0
        for t in range(p.horizon):
            u = handles[t].query(X)
            r = float(p.stage_cost.batch(X.reshape(1, -1), u.reshape(1, -1))[0])
            rows.append([t] + [float(v) for v in X] + [float(v) for v in u] + [r])
            total += r
            s = rng.choice(p.disturbance.n_samples, p=p.disturbance.probs)
            X = p.dynamics.batch(X.reshape(1, -1), u.reshape(1, -1),
                                 p.disturbance.support[s].reshape(1, -1))[0]
        rows.append([p.horizon] + [float(v) for v in X]
                    + [float("nan")] * p.m
                    + [float(p.terminal_cost(X.reshape(1, -1))[0])])
        header = ("t," + ",".join(f"x_{a + 1}" for a in range(p.n)) + ","
                  + ",".join(f"u_{j + 1}" for j in range(p.m)) + ",stage_cost")
        _write_csv(man.path(f"trajectory_{si:02d}.csv"), header, rows)
        stats = rollout(p, handles, x0, n_paths, seed=engine_cfg.seed + si) \
            if n_paths > 1 else None
        summary.append({
            "initial_state": x0.tolist(),
            "traced_cost": total + rows[-1][-1],
            "mean": stats.mean if stats else None,
            "stderr": stats.stderr if stats else None,
            "min": stats.min if stats else None,
            "max": stats.max if stats else None,
            "n_paths": n_paths,
        })
    with open(man.path("rollout_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    man.write()
    for s in summary:
        print(f"x0={s['initial_state']}: traced cost {s['traced_cost']:.6g}")
    return 0


def run_gap(cfg: ProblemConfig, out_dir: str, args) -> int:
    exp = cfg.experiment
    engine_cfg = _engine_config(cfg, args)
    grid = build_staged_grid(cfg.domain, cfg.spacing)
    bundle = backward_induction(cfg.problem, grid, OperatorKind.CONVEX, engine_cfg)
    man = Manifest(out_dir, cfg.raw, {"engine": engine_cfg.seed})

    report = {}
    x0 = exp.get("initial_state")
    if x0 is not None:
        g = aposteriori_gap(cfg.problem, bundle, np.asarray(x0, float),
                            n_paths=int(exp.get("n_paths", 10_000)),
                            seed=engine_cfg.seed)
        report["point"] = dataclasses.asdict(g)

    ref_spec = exp.get("reference")
    if ref_spec:
        ref_engine = EngineConfig(
            solver=_solver_config(cfg),
            action_grid=ref_spec.get("action_grid", 1001),
            check_inclusion=False, seed=engine_cfg.seed, workers=args.workers)
        ref_bundle = backward_induction(cfg.problem, grid,
                                        OperatorKind.BILEVEL, ref_engine)
        vals, errs = policy_cost_tables(
            cfg.problem, bundle, n_paths=int(exp.get("n_paths", 10_000)),
            seed=engine_cfg.seed, tree_cap=int(exp.get("tree_cap", 10 ** 6)))
        rows = []
        rel_all = []
        for t in range(grid.horizon + 1):
            ref_vals = ref_bundle.tables[t].node_values
            vp = vals[t]
            rel = np.where(np.abs(ref_vals) > 1e-12,
                           (vp - ref_vals) / np.where(np.abs(ref_vals) > 1e-12,
                                                      ref_vals, 1.0),
                           np.where(np.abs(vp - ref_vals) <= 1e-9, 0.0, np.inf))
            rel_all.append(rel)
            for i in range(vp.shape[0]):
                rows.append([t, i, float(vp[i]), float(errs[t][i]),
                             float(ref_vals[i]), float(rel[i])])
        _write_csv(man.path("relative_error.csv"),
                   "stage,node_id,policy_value,policy_stderr,reference_value,"
                   "relative_error", rows)
        flat = np.concatenate(rel_all)
        report["relative_error"] = {
            "linf_percent": float(np.max(np.abs(flat)) * 100.0),
            "l1_percent": float(np.mean(np.abs(flat)) * 100.0),
        }
    with open(man.path("gap_report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    man.write()
    if "point" in report:
        print(f"policy value {report['point']['policy_value']:.6g}, "
              f"table value {report['point']['table_value']:.6g}, "
              f"bound {report['point']['bound']:.6g}")
    if "relative_error" in report:
        print(f"relative error: linf {report['relative_error']['linf_percent']:.3f}%, "
              f"l1 {report['relative_error']['l1_percent']:.3f}%")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


_MODES = {
    "solve": run_solve,
    "converge-grid": run_converge_grid,
    "converge-samples": run_converge_samples,
    "rollout": run_rollout,
    "gap": run_gap,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="convexdp",
        description="Grid-based dynamic programming experiment runner")
    parser.add_argument("mode", choices=sorted(_MODES))
    parser.add_argument("--config", required=True, help="problem JSON file")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--workers", type=int,
                        default=None, help="stage-kernel worker threads "
                        "(default: CONVEXDP_WORKERS or all cores)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the experiment seed")
    args = parser.parse_args(argv)
    if args.workers is None:
        args.workers = default_workers()

    try:
        cfg = load_problem(args.config)
        return _MODES[args.mode](cfg, args.out, args)
    except (ParseError, ValidationError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except ConvexDPError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
