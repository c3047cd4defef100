"""The (mapping seed x map type x localization seed x method) experiment matrix."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .core import SessionLog, normalize_session
from .evaluation import MetricSummary, aggregate, evaluate, write_error_series_csv, write_summary_csv
from .filters import MAP_TYPES, METHODS
from .mcl import prepare_measurements, run_localization
from .ndt import build_map
from .sim import SessionSpec, WorldSpec, default_world, generate

RUN_COLUMNS = ("map_type", "method", "mapping_seed", "localization_seed", "ate_rmse", "rpe_rmse")


class StageError(RuntimeError):
    """A stage of the pipeline failed; ``stage`` names which one."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class ExperimentPlan:
    mapping_seeds: tuple[int, ...] = (1, 2)
    localization_seeds: tuple[int, ...] = tuple(range(1, 8))
    map_types: tuple[str, ...] = tuple(MAP_TYPES)
    methods: tuple[str, ...] = tuple(METHODS)
    base_seed: int = 0

    def __post_init__(self):
        if not self.mapping_seeds or not self.localization_seeds:
            raise ValueError("a plan needs at least one mapping and one localization seed")
        bad = [m for m in self.map_types if m not in MAP_TYPES] + [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown map type / method names: {bad}")
        if len(set(self.localization_seeds)) != len(self.localization_seeds):
            raise ValueError("localization seeds must be distinct")

    def runs(self) -> list[tuple[int, str, int, str]]:
        return [
            (m, mt, ls, meth)
            for m in self.mapping_seeds
            for mt in self.map_types
            for ls in self.localization_seeds
            for meth in self.methods
        ]

    def __len__(self):
        return len(self.mapping_seeds) * len(self.map_types) * len(self.localization_seeds) * len(self.methods)


def mcl_seed(base_seed: int, mapping_seed: int, localization_seed: int) -> list[int]:
    """Particle-filter seed shared by every map type and method of one session (common random numbers)."""
    return [int(base_seed), int(mapping_seed), int(localization_seed)]


def world_from_config(cfg: io.Config) -> WorldSpec:
    w = cfg.world
    if w.get("file"):
        import yaml

        doc = yaml.safe_load(Path(w["file"]).read_text())
        world = WorldSpec.from_dict(doc)
        world.validate()
        return world
    return default_world(int(w.get("seed", 0)), int(w.get("n_slots", 40)), int(w.get("n_agents", 6)))


def session_spec(cfg: io.Config, world: WorldSpec, seed: int, reference_seed: int | None = None) -> SessionSpec:
    from .sim import OdometryNoise

    values = dict(cfg.session)
    if "odom_noise" in values:
        values["odom_noise"] = OdometryNoise(**values["odom_noise"])
    return SessionSpec(world, seed=seed, reference_seed=reference_seed, **values)


def config_digest(cfg: io.Config) -> str:
    blob = json.dumps(io.config_to_dict(cfg), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _atomic_write(path: Path, writer, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp, obj)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


class ArtifactCache:
    """Sessions and maps on disk, keyed by config digest and seeds.

    Everything is read back from the file even right after writing, so a
    cached and a fresh run see bit-identical inputs.
    """

    def __init__(self, root, cfg: io.Config):
        self.cfg = cfg
        self.root = Path(root) / config_digest(cfg)
        self._world = None

    @property
    def world(self) -> WorldSpec:
        if self._world is None:
            self._world = world_from_config(self.cfg)
        return self._world

    def session(self, mapping_seed: int, localization_seed: int | None = None) -> SessionLog:
        if localization_seed is None:
            path = self.root / "sessions" / f"mapping-{mapping_seed}.bin"
            spec = (mapping_seed, None)
        else:
            path = self.root / "sessions" / f"loc-{mapping_seed}-{localization_seed}.bin"
            spec = (localization_seed, mapping_seed)
        if not path.exists():
            try:
                log = generate(session_spec(self.cfg, self.world, *spec))
            except Exception as exc:
                raise StageError("simulate", str(exc)) from exc
            _atomic_write(path, io.write_session, log)
        return io.read_session(path)

    def map(self, mapping_seed: int, map_type: str):
        path = self.root / "maps" / f"{map_type}-{mapping_seed}.bin"
        if not path.exists():
            log = normalize_session(self.session(mapping_seed))
            try:
                grid = build_map(log, self.cfg.partition, MAP_TYPES[map_type].delta, self.cfg.map,
                                 filter_config=self.cfg.filter)
            except Exception as exc:
                raise StageError("map", str(exc)) from exc
            _atomic_write(path, io.write_map, grid)
        return io.read_map(path)


def _session_runs(args) -> list[MetricSummary]:
    """All (map type, method) runs of one localization session."""
    cache_root, cfg, plan, mapping_seed, loc_seed = args
    cache = ArtifactCache(cache_root, cfg)
    log = normalize_session(cache.session(mapping_seed, loc_seed))
    gt = log.ground_truth_trajectory()
    maps = {mt: cache.map(mapping_seed, mt) for mt in plan.map_types}
    seed = mcl_seed(plan.base_seed, mapping_seed, loc_seed)
    out = []
    for method in plan.methods:
        try:
            meas = prepare_measurements(log, method, cfg.partition, cfg.localization, cfg.filter)
        except Exception as exc:
            raise StageError("filter", str(exc)) from exc
        for mt in plan.map_types:
            try:
                run = run_localization(log, maps[mt], method, cfg.localization, seed, cfg.partition, cfg.filter,
                                       measurements=meas)
            except Exception as exc:
                raise StageError("localize", str(exc)) from exc
            try:
                summary = evaluate(run.trajectory, gt, map_type=mt, method=method, run=f"m{mapping_seed}-l{loc_seed}",
                                   mapping_seed=mapping_seed, localization_seed=loc_seed)
            except Exception as exc:
                raise StageError("evaluate", str(exc)) from exc
            out.append(summary)
    return out


@dataclass
class ExperimentResult:
    plan: ExperimentPlan
    runs: list[MetricSummary] = field(default_factory=list)

    def summary(self) -> list[dict]:
        return aggregate(self.runs, self.plan.map_types, self.plan.methods)

    def ate(self, map_type: str, method: str) -> np.ndarray:
        return np.array([r.ate_rmse for r in self.runs if r.map_type == map_type and r.method == method])

    def rpe(self, map_type: str, method: str) -> np.ndarray:
        return np.array([r.rpe_rmse for r in self.runs if r.map_type == map_type and r.method == method])


def run_experiment(plan: ExperimentPlan, cfg: io.Config, cache_root, jobs: int = 1) -> ExperimentResult:
    cache = ArtifactCache(cache_root, cfg)
    # maps first, serially, so parallel workers only ever read them
    for m in plan.mapping_seeds:
        for mt in plan.map_types:
            cache.map(m, mt)
    tasks = [(cache_root, cfg, plan, m, ls) for m in plan.mapping_seeds for ls in plan.localization_seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_session_runs, tasks))
    else:
        chunks = [_session_runs(t) for t in tasks]
    runs = [r for chunk in chunks for r in chunk]
    order = {key: k for k, key in enumerate(plan.runs())}
    runs.sort(key=lambda r: order[(r.mapping_seed, r.map_type, r.localization_seed, r.method)])
    return ExperimentResult(plan, runs)


def write_results(result: ExperimentResult, out_dir):
    out = Path(out_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    write_summary_csv(out / "summary.csv", result.summary())
    with open(out / "runs.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RUN_COLUMNS)
        for r in result.runs:
            writer.writerow([r.map_type, r.method, r.mapping_seed, r.localization_seed,
                             repr(float(r.ate_rmse)), repr(float(r.rpe_rmse))])
    for r in result.runs:
        name = f"{r.map_type}_{r.method}_m{r.mapping_seed}_l{r.localization_seed}.csv"
        write_error_series_csv(out / "runs" / name, r)


def plan_from_config(cfg: io.Config, **overrides) -> ExperimentPlan:
    values = {k: v for k, v in cfg.experiment.items()}
    for key in ("mapping_seeds", "localization_seeds", "map_types", "methods"):
        if key in values:
            values[key] = tuple(values[key])
    values.update({k: v for k, v in overrides.items() if v is not None})
    return dataclasses.replace(ExperimentPlan(), **values)
