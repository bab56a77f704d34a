"""Command-line surface for the regional NMPC toolkit.

Subcommands:
  solve      one OCP solve at a given state, printed as a JSON record
  explore    grid sweep of the state space -> atlas JSON + plotting CSV
  regions    fit and verify ellipsoids from an atlas -> region store
  simulate   closed-loop run with a store -> trajectory CSV + summary
  coverage   Monte Carlo estimate of the store's feasible-set coverage
  pipeline   explore -> regions -> coverage in one deterministic run

Exit codes: 0 success (solver converged where relevant); 2 infeasible
problem or aborted simulation; 3 solver or pipeline-stage failure;
4 bad input, bad arguments, or failed file validation.

Every output file embeds the run configuration, tolerances, seeds and the
model hash; rerunning a command with identical inputs reproduces its output
files byte for byte (no timestamps are ever written).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .atlas import (export_atlas_csv, explore_grid, feasible_window,
                    group_by_subset, load_atlas, save_atlas, saturated_subset)
from .controller import (RegionStore, StoreValidationError, build_store,
                         coverage_estimate, empty_store, export_trajectory_csv,
                         load_store, run_closed_loop, save_store)
from .ellipsoids import FitParams, fit_inner_ellipsoids
from .model import (SystemModel, builtin_example_model, canonical_json,
                    load_model, model_hash)
from .ocp import make_ocp
from .sqp import SolverOptions, check_region_regularity, classify_active_sets, solve_ocp

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_FAILURE = 3
EXIT_BAD_INPUT = 4


class _Parser(argparse.ArgumentParser):
    # argparse defaults to exit code 2; bad input is 4 here, 2 means infeasible
    def error(self, message):
        self.exit(EXIT_BAD_INPUT, f"{self.prog}: error: {message}\n")


def _parse_vector(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")], dtype=float)
    except ValueError:
        raise ValueError(f"cannot parse vector {text!r}; expected comma-"
                         f"separated numbers") from None


def _parse_window(text: str) -> tuple:
    vals = _parse_vector(text)
    if len(vals) < 2 or len(vals) % 2:
        raise ValueError(f"window {text!r} must list lo,hi per axis")
    pairs = tuple((float(vals[2 * j]), float(vals[2 * j + 1]))
                  for j in range(len(vals) // 2))
    for lo, hi in pairs:
        if not hi > lo:
            raise ValueError(f"window {text!r} has lo >= hi")
    return pairs


def _parse_grid(text: str, n_axes: int) -> tuple:
    parts = text.replace("x", ",").split(",")
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise ValueError(f"cannot parse grid {text!r}") from None
    if len(vals) == 1:
        vals = vals * n_axes
    if len(vals) != n_axes or any(v < 2 for v in vals):
        raise ValueError(f"grid {text!r} needs >= 2 points per axis")
    return tuple(vals)


def _load_model_arg(spec: str) -> SystemModel:
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        if name != "integrator_cubic":
            raise ValueError(f"unknown builtin model {name!r}")
        return builtin_example_model()
    return load_model(spec)


def _options(args) -> SolverOptions:
    return SolverOptions(eps_act=args.eps_act, eps_lambda=args.eps_lambda)


def _py(obj):
    if isinstance(obj, np.ndarray):
        return [_py(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (list, tuple)):
        return [_py(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _py(v) for k, v in obj.items()}
    return obj


def _config_echo(args, model: SystemModel, **extra) -> dict:
    cfg = {"command": args.cmd, "model": args.model,
           "model_hash": model_hash(model),
           "eps_act": getattr(args, "eps_act", None),
           "eps_lambda": getattr(args, "eps_lambda", None)}
    cfg.update(extra)
    return _py(cfg)


def cmd_solve(args) -> int:
    model = _load_model_arg(args.model)
    x0 = _parse_vector(args.x0)
    if x0.shape != (model.n,):
        raise ValueError(f"x0 has {len(x0)} components, model needs {model.n}")
    opt = _options(args)
    instance = make_ocp(model, x0)
    sol = solve_ocp(instance, options=opt)
    record = {
        "x0": _py(x0), "status": sol.status, "iterations": sol.iterations,
        "kkt_residual": float(sol.kkt_residual),
        "model_hash": model_hash(model),
        "tolerances": {"eps_act": opt.eps_act, "eps_lambda": opt.eps_lambda,
                       "tol_kkt": opt.tol_kkt},
    }
    if sol.converged:
        info = classify_active_sets(instance, sol, options=opt)
        record.update({
            "U": _py(sol.U), "lambda": _py(sol.lam), "V": float(sol.V),
            "u_star": _py(sol.u0(model.m)),
            "A": list(info.A), "A_tilde": list(saturated_subset(info.A, model.q_u)),
            "W": list(info.W),
            "regular": check_region_regularity(instance, sol, info),
        })
    text = json.dumps(record, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    if sol.converged:
        return EXIT_OK
    return EXIT_INFEASIBLE if sol.status == "infeasible" else EXIT_FAILURE


def cmd_explore(args) -> int:
    model = _load_model_arg(args.model)
    window = _parse_window(args.window)
    resolution = _parse_grid(args.grid, len(window))
    opt = _options(args)
    atlas = explore_grid(model, window, resolution, options=opt)
    out = Path(args.out)
    save_atlas(atlas, out)
    cfg = _config_echo(args, model, window=list(map(list, window)),
                       resolution=list(resolution))
    export_atlas_csv(atlas, out.with_suffix(".csv"),
                     config_comment=canonical_json(cfg))
    print(f"samples: {len(atlas.status)}")
    print(f"feasible: {atlas.n_feasible}")
    print(f"distinct active sets: {len(atlas.active_sets)}")
    print(f"atlas: {out}")
    print(f"csv: {out.with_suffix('.csv')}")
    return EXIT_OK


def _fit_classes(model, atlas, classes, args, opt):
    fitted = []
    for cls in classes:
        complement = np.delete(atlas.states, np.array(cls.member_indices, int),
                               axis=0)
        params = FitParams(complement=complement, window=atlas.grid.window,
                           spacing=atlas.grid.spacing, seed=args.seed,
                           n_probe=args.probe_samples,
                           n_verify=args.verify_samples)
        pairs = fit_inner_ellipsoids(cls, model, args.max_ellipsoids, params,
                                     options=opt)
        fitted.append((cls, pairs))
    return fitted


def cmd_regions(args) -> int:
    model = _load_model_arg(args.model)
    atlas = load_atlas(args.atlas)
    if atlas.model_hash != model_hash(model):
        raise StoreValidationError("atlas was built for a different model")
    opt = _options(args)
    classes = group_by_subset(atlas, model)
    fitted = _fit_classes(model, atlas, classes, args, opt)
    cfg = _config_echo(args, model, atlas=str(args.atlas), seed=args.seed,
                       max_ellipsoids=args.max_ellipsoids,
                       verify_samples=args.verify_samples,
                       probe_samples=args.probe_samples,
                       window=list(map(list, atlas.grid.window)),
                       resolution=list(atlas.grid.resolution))
    cfg["coverage_window"] = [list(w) for w in feasible_window(atlas)]
    store = build_store(model, fitted, metadata=cfg)
    save_store(store, args.out)
    for cls, pairs in fitted:
        print(f"class A~={list(cls.A_tilde)}: u* = {_py(cls.u_star)}, "
              f"{len(cls.member_active_sets)} member active sets, "
              f"{len(pairs)} ellipsoids")
    print(f"store entries: {len(store)}")
    print(f"store: {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    model = _load_model_arg(args.model)
    if args.no_store:
        store = empty_store(model)
    else:
        if not args.store:
            raise ValueError("--store is required unless --no-store is given")
        store = load_store(args.store, model)
    x0 = _parse_vector(args.x0)
    opt = _options(args)
    traj = run_closed_loop(x0, args.steps, store, model, options=opt)
    cfg = _config_echo(args, model, x0=_py(x0), steps=args.steps,
                       store=None if args.no_store else str(args.store))
    export_trajectory_csv(traj, args.out, config_comment=canonical_json(cfg))
    print(f"steps executed: {traj.steps} / {args.steps}")
    print(f"ocp avoided fraction: {traj.ocp_avoided_fraction():.6f}")
    print(f"accumulated stage cost: {traj.accumulated_cost(model):.9g}")
    print(f"final state norm: {float(np.linalg.norm(traj.states[-1])):.6g}")
    print(f"status: {traj.status}")
    print(f"trajectory: {args.out}")
    return EXIT_OK if traj.status == "ok" else EXIT_INFEASIBLE


def cmd_coverage(args) -> int:
    model = _load_model_arg(args.model)
    store = load_store(args.store, model)
    if args.window:
        window = _parse_window(args.window)
    elif store.metadata.get("coverage_window"):
        window = tuple(tuple(w) for w in store.metadata["coverage_window"])
    else:
        raise ValueError("no --window given and the store records none")
    opt = _options(args)
    frac, half = coverage_estimate(store, model, window, args.samples,
                                   args.seed, options=opt)
    report = {"coverage": frac, "half_width": half,
              "window": [list(w) for w in window],
              "n_samples": args.samples, "seed": args.seed,
              "config": _config_echo(args, model, store=str(args.store))}
    print(json.dumps(_py(report), indent=2, sort_keys=True))
    if args.out:
        Path(args.out).write_text(canonical_json(_py(report)) + "\n")
    return EXIT_OK


def run_pipeline(model, window, resolution, options, seed, max_ellipsoids,
                 verify_samples, coverage_samples, coverage_seed,
                 probe_samples=400, outdir=None, config=None, log=None) -> dict:
    """Explore, fit, store and measure in one deterministic pass.

    When ``outdir`` is set, writes atlas.json/atlas.csv/store.json/
    coverage.json there as stages complete; on a stage failure the files
    already written stay in place and a FAILED marker names the stage.
    Returns a dict with the in-memory artifacts and stage timings.
    """
    log = log or (lambda msg: None)
    config = config or {}
    outdir = Path(outdir) if outdir is not None else None
    if outdir is not None:
        outdir.mkdir(parents=True, exist_ok=True)
        marker = outdir / "FAILED"
        if marker.exists():
            marker.unlink()
    timings = {}
    stage = "explore"
    try:
        t0 = time.perf_counter()
        atlas = explore_grid(model, window, resolution, options=options)
        timings["explore_s"] = time.perf_counter() - t0
        if outdir is not None:
            save_atlas(atlas, outdir / "atlas.json")
            export_atlas_csv(atlas, outdir / "atlas.csv",
                             config_comment=canonical_json(_py(config)))
        log(f"explore: {atlas.n_feasible}/{len(atlas.status)} feasible, "
            f"{len(atlas.active_sets)} active sets "
            f"({timings['explore_s']:.1f}s)")

        stage = "regions"
        t0 = time.perf_counter()
        classes = group_by_subset(atlas, model)
        fitted = []
        for cls in classes:
            complement = np.delete(atlas.states,
                                   np.array(cls.member_indices, int), axis=0)
            params = FitParams(complement=complement, window=atlas.grid.window,
                               spacing=atlas.grid.spacing, seed=seed,
                               n_probe=probe_samples, n_verify=verify_samples)
            pairs = fit_inner_ellipsoids(cls, model, max_ellipsoids, params,
                                         options=options)
            fitted.append((cls, pairs))
            log(f"class A~={list(cls.A_tilde)}: u* = {_py(cls.u_star)}, "
                f"{len(cls.member_active_sets)} member active sets, "
                f"{len(pairs)} ellipsoids")
        cov_window = feasible_window(atlas)
        store = build_store(model, fitted,
                            metadata=dict(_py(config),
                                          coverage_window=[list(w) for w in cov_window]))
        timings["regions_s"] = time.perf_counter() - t0
        if outdir is not None:
            save_store(store, outdir / "store.json")
        log(f"store: {len(store)} entries ({timings['regions_s']:.1f}s)")

        stage = "coverage"
        t0 = time.perf_counter()
        frac, half = coverage_estimate(store, model, cov_window,
                                       coverage_samples, coverage_seed,
                                       options=options)
        timings["coverage_s"] = time.perf_counter() - t0
        report = {"coverage": frac, "half_width": half,
                  "window": [list(w) for w in cov_window],
                  "n_samples": coverage_samples, "seed": coverage_seed,
                  "config": _py(config)}
        if outdir is not None:
            (outdir / "coverage.json").write_text(canonical_json(report) + "\n")
        log(f"coverage: {frac:.4f} +/- {half:.4f} ({timings['coverage_s']:.1f}s)")
    except Exception as exc:
        if outdir is not None:
            (outdir / "FAILED").write_text(f"stage: {stage}\nerror: {exc}\n")
        raise
    return {"atlas": atlas, "classes": classes, "fitted": fitted,
            "store": store, "coverage": frac, "half_width": half,
            "coverage_window": cov_window, "timings": timings}


def cmd_pipeline(args) -> int:
    model = _load_model_arg(args.model)
    window = _parse_window(args.window)
    resolution = _parse_grid(args.grid, len(window))
    opt = _options(args)
    cfg = _config_echo(args, model, window=list(map(list, window)),
                       resolution=list(resolution), seed=args.seed,
                       max_ellipsoids=args.max_ellipsoids,
                       verify_samples=args.verify_samples,
                       probe_samples=args.probe_samples,
                       coverage_samples=args.samples,
                       coverage_seed=args.seed + 1)
    try:
        result = run_pipeline(model, window, resolution, opt, args.seed,
                              args.max_ellipsoids, args.verify_samples,
                              args.samples, args.seed + 1,
                              probe_samples=args.probe_samples,
                              outdir=args.out, config=cfg, log=print)
    except Exception as exc:
        print(f"pipeline failed: {exc}", file=sys.stderr)
        print(f"partial outputs kept in {args.out}; see FAILED marker",
              file=sys.stderr)
        return EXIT_FAILURE
    total = sum(result["timings"].values())
    print(f"done in {total:.1f}s; outputs in {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="regional-nmpc",
                     description="Regional NMPC: offline region discovery and "
                                 "an online controller that skips OCP solves.")
    sub = parser.add_subparsers(dest="cmd", required=True)

    def common(p):
        p.add_argument("--model", default="builtin:integrator_cubic",
                       help="model JSON path or builtin:<name>")
        p.add_argument("--eps-act", type=float, default=1e-6,
                       help="active-set detection tolerance")
        p.add_argument("--eps-lambda", type=float, default=1e-8,
                       help="weakly-active multiplier threshold")

    p = sub.add_parser("solve", parents=[], help="solve one OCP")
    common(p)
    p.add_argument("--x0", required=True, help="initial state, comma-separated")
    p.add_argument("--out", default=None, help="also write the record here")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("explore", help="grid sweep -> atlas")
    common(p)
    p.add_argument("--window", default="-6,6,-7,7",
                   help="state window lo,hi per axis")
    p.add_argument("--grid", default="241", help="grid points per axis")
    p.add_argument("--out", default="atlas.json")
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("regions", help="atlas -> verified region store")
    common(p)
    p.add_argument("--atlas", required=True)
    p.add_argument("--out", default="store.json")
    p.add_argument("--seed", type=int, default=20110913)
    p.add_argument("--max-ellipsoids", type=int, default=4,
                   help="ellipsoid budget per feedback class")
    p.add_argument("--verify-samples", type=int, default=2000)
    p.add_argument("--probe-samples", type=int, default=400,
                   help="verification samples per fit probe")
    p.set_defaults(func=cmd_regions)

    p = sub.add_parser("simulate", help="closed loop -> trajectory CSV")
    common(p)
    p.add_argument("--x0", required=True)
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--store", default=None)
    p.add_argument("--no-store", action="store_true",
                   help="plain NMPC baseline without a store")
    p.add_argument("--out", default="trajectory.csv")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("coverage", help="Monte Carlo coverage of a store")
    common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--window", default=None,
                   help="sampling window; defaults to the one in the store")
    p.add_argument("--samples", type=int, default=100000)
    p.add_argument("--seed", type=int, default=20110914)
    p.add_argument("--out", default=None, help="also write the report here")
    p.set_defaults(func=cmd_coverage)

    p = sub.add_parser("pipeline", help="explore -> regions -> coverage")
    common(p)
    p.add_argument("--window", default="-6,6,-7,7")
    p.add_argument("--grid", default="241")
    p.add_argument("--seed", type=int, default=20110913)
    p.add_argument("--max-ellipsoids", type=int, default=4)
    p.add_argument("--verify-samples", type=int, default=2000)
    p.add_argument("--probe-samples", type=int, default=400,
                   help="verification samples per fit probe")
    p.add_argument("--samples", type=int, default=100000,
                   help="coverage Monte Carlo samples")
    p.add_argument("--out", default="out", help="output directory")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, StoreValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
