"""Command-line front end: simulate, map, localize, evaluate, experiment.

Exit codes: 0 success, 2 usage, 3 input format, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .core import EmptySessionError, normalize_session
from .evaluation import evaluate, write_error_series_csv
from .experiment import (
    ArtifactCache,
    ExperimentPlan,
    StageError,
    plan_from_config,
    run_experiment,
    session_spec,
    world_from_config,
    write_results,
)
from .filters import MAP_TYPES, METHODS, ConfigurationError
from .mcl import run_localization
from .ndt import build_map
from .sim import SimulationError, generate

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("dynloc")

__all__ = ["main", "build_parser", "ExperimentPlan"]


class UsageError(Exception):
    pass


def _load_config(args) -> io.Config:
    return io.load_config(args.config) if args.config else io.Config()


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    world = world_from_config(cfg)
    reference = args.mapping_seed
    spec = session_spec(cfg, world, args.seed, reference)
    session = generate(spec)
    io.write_session(args.out, session)
    points = sum(len(f.scan) for f in session)
    kind = "mapping" if reference is None else f"localization (mapping seed {reference})"
    print(f"{kind} session: {len(session)} frames, {points} points, {len(world.dynamic_agents)} dynamic agents -> {args.out}")
    return EXIT_OK


def cmd_map(args) -> int:
    cfg = _load_config(args)
    session = normalize_session(io.read_session(args.session))
    grid = build_map(session, cfg.partition, MAP_TYPES[args.map_type].delta, cfg.map, filter_config=cfg.filter)
    io.write_map(args.out, grid)
    print(f"{args.map_type} map: {len(grid)} cells, {int(grid.queryable_mask().sum())} queryable -> {args.out}")
    return EXIT_OK


def _check_extent(grid, session):
    gt = session.ground_truth_trajectory().xy
    idx = grid.cell_of(gt)
    if not np.all(grid.in_extent(idx)):
        raise StageError("localize", "session trajectory leaves the map extent")


def cmd_localize(args) -> int:
    cfg = _load_config(args)
    session = normalize_session(io.read_session(args.session))
    grid = io.read_map(args.map)
    _check_extent(grid, session)
    run = run_localization(session, grid, args.method, cfg.localization, args.seed, cfg.partition, cfg.filter)
    gt = session.ground_truth_trajectory()
    io.write_trajectory_csv(args.out, run.trajectory,
                            {"gt_x": gt.poses[:, 0], "gt_y": gt.poses[:, 1], "gt_psi": gt.poses[:, 2]})
    summary = evaluate(run.trajectory, gt)
    print(f"{args.method}: {len(session)} frames, ATE {summary.ate_rmse:.4f} m, RPE {summary.rpe_rmse:.4f} m -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    est = io.read_trajectory_csv(args.trajectory)
    session = normalize_session(io.read_session(args.session))
    summary = evaluate(est, session.ground_truth_trajectory())
    if args.out:
        write_error_series_csv(args.out, summary)
    print(f"ATE {summary.ate_rmse!r} RPE {summary.rpe_rmse!r}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _load_config(args)
    overrides = {
        "map_types": tuple(args.map_type) if args.map_type else None,
        "methods": tuple(args.method) if args.method else None,
        "mapping_seeds": tuple(args.mapping_seeds) if args.mapping_seeds else None,
        "localization_seeds": tuple(args.localization_seeds) if args.localization_seeds else None,
        "base_seed": args.seed,
    }
    try:
        plan = plan_from_config(cfg, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.dry_run:
        print(f"{len(plan)} runs")
        print("mapping_seed,map_type,localization_seed,method")
        for m, mt, ls, meth in plan.runs():
            print(f"{m},{mt},{ls},{meth}")
        return EXIT_OK
    out = Path(args.out)
    cache_root = Path(args.cache) if args.cache else out / "cache"
    result = run_experiment(plan, cfg, cache_root, jobs=args.jobs)
    write_results(result, out)
    for row in result.summary():
        print(f"{row['map_type']:>8} {row['method']:>8}  ATE mean {row['ate_mean']:.4f} var {row['ate_var']:.4f}"
              f"  RPE mean {row['rpe_mean']:.4f}  n={row['n_runs']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynloc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="YAML config file (flags override it)")
        if seed:
            p.add_argument("--seed", type=int, default=0)
        return p

    p = common(sub.add_parser("simulate", help="generate a session log"))
    p.add_argument("--mapping-seed", type=int, default=None,
                   help="make a localization session derived from this mapping session")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser("map", help="build an NDT map from a session"), seed=False)
    p.add_argument("session")
    p.add_argument("--map-type", choices=sorted(MAP_TYPES), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_map)

    p = common(sub.add_parser("localize", help="run MCL on a session against a map"))
    p.add_argument("session")
    p.add_argument("map")
    p.add_argument("--method", choices=list(METHODS), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("evaluate", help="ATE / RPE of a trajectory CSV against a session's ground truth")
    p.add_argument("trajectory")
    p.add_argument("session")
    p.add_argument("--out", help="per-frame error CSV")
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("experiment", help="run the map type x method matrix"))
    p.add_argument("--out", required=True)
    p.add_argument("--map-type", action="append", choices=sorted(MAP_TYPES))
    p.add_argument("--method", action="append", choices=list(METHODS))
    p.add_argument("--mapping-seeds", type=int, nargs="+")
    p.add_argument("--localization-seeds", type=int, nargs="+")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--cache", help="artifact cache directory (default OUT/cache)")
    p.add_argument("--dry-run", action="store_true", help="print the run matrix and exit")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.print_usage(sys.stderr)
        print("dynloc: error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"dynloc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (io.FileFormatError, io.ConfigError, SimulationError, FileNotFoundError) as exc:
        print(f"dynloc: input error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (StageError, EmptySessionError, ValueError, RuntimeError) as exc:
        print(f"dynloc: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
