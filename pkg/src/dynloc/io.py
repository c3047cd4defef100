"""File formats: binary session logs and maps, YAML configs, trajectory CSV.

Binary layouts (all little-endian)::

    session file
      magic   8s   b"DYNLSES\\0"
      version u32
      hlen    u32  length of the UTF-8 JSON header that follows
      header  hlen bytes: {"frame_rate": .., "frame_count": .., "header": {...}}
      frame_count records, each
        rlen  u64  byte length of the rest of the record
        t     f64
        gt    3 x f64   (x, y, psi)
        odom  3 x f64
        n     u32       point count
        xy    n x 2 x f64
        label n x i32

    map file
      magic   8s   b"DYNLMAP\\0"
      version u32
      hlen    u32, header (JSON: MapConfig fields, dropped_points, cell_count)
      cell_count records of
        i, j      2 x i32
        count     i64
        sum       2 x f64
        outer     3 x f64   (xx, xy, yy)
        log_odds  f64
"""

from __future__ import annotations

import csv
import dataclasses
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .core import Frame, LabeledScan, LabelPartition, Pose2, SessionLog, Trajectory
from .filters import FilterConfig
from .mcl import LocalizationConfig, MotionNoise
from .ndt import MapConfig, NdtGrid

SESSION_MAGIC = b"DYNLSES\0"
MAP_MAGIC = b"DYNLMAP\0"
SESSION_VERSION = 1
MAP_VERSION = 1

_PREAMBLE = struct.Struct("<8sII")
_RECORD_LEN = struct.Struct("<Q")
_FRAME_FIXED = struct.Struct("<d3d3dI")
_CELL = np.dtype([("i", "<i4"), ("j", "<i4"), ("count", "<i8"), ("sum", "<f8", (2,)),
                  ("outer", "<f8", (3,)), ("log_odds", "<f8")])


class FileFormatError(ValueError):
    """Base class for unreadable input files."""


class BadMagicError(FileFormatError):
    pass


class VersionMismatchError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass


class CountMismatchError(FileFormatError):
    pass


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------------
# shared framing


def _write_preamble(fh, magic: bytes, version: int, header: dict):
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    fh.write(_PREAMBLE.pack(magic, version, len(blob)))
    fh.write(blob)


def _read_exact(buf: memoryview, pos: int, n: int, what: str) -> tuple[memoryview, int]:
    if pos + n > len(buf):
        raise TruncatedFileError(f"file ends inside {what} (need {n} bytes at offset {pos}, have {len(buf) - pos})")
    return buf[pos:pos + n], pos + n


def _read_preamble(buf: memoryview, magic: bytes, version: int) -> tuple[dict, int]:
    raw, pos = _read_exact(buf, 0, _PREAMBLE.size, "preamble")
    got_magic, got_version, hlen = _PREAMBLE.unpack(raw)
    if got_magic != magic:
        raise BadMagicError(f"not a {magic[:-1].decode()} file (magic {bytes(got_magic)!r})")
    if got_version != version:
        raise VersionMismatchError(f"format version {got_version}, this reader supports {version}")
    raw, pos = _read_exact(buf, pos, hlen, "header")
    try:
        header = json.loads(bytes(raw).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"corrupt header: {exc}") from None
    return header, pos


# ----------------------------------------------------------------------------
# session logs


def write_session(path, log: SessionLog):
    meta = {"frame_rate": log.frame_rate, "frame_count": len(log), "header": log.header}
    with open(path, "wb") as fh:
        _write_preamble(fh, SESSION_MAGIC, SESSION_VERSION, meta)
        for f in log:
            n = len(f.scan)
            body = _FRAME_FIXED.pack(f.timestamp, *f.ground_truth, *f.odometry, n)
            xy = np.ascontiguousarray(f.scan.xy, dtype="<f8").tobytes()
            labels = np.ascontiguousarray(f.scan.labels, dtype="<i4").tobytes()
            fh.write(_RECORD_LEN.pack(len(body) + len(xy) + len(labels)))
            fh.write(body)
            fh.write(xy)
            fh.write(labels)


def read_session(path) -> SessionLog:
    buf = memoryview(Path(path).read_bytes())
    meta, pos = _read_preamble(buf, SESSION_MAGIC, SESSION_VERSION)
    try:
        declared = int(meta["frame_count"])
        frame_rate = float(meta["frame_rate"])
        header = meta.get("header", {})
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(f"session header missing fields: {exc}") from None
    frames = []
    for k in range(declared):
        raw, pos = _read_exact(buf, pos, _RECORD_LEN.size, f"frame {k} length")
        (rlen,) = _RECORD_LEN.unpack(raw)
        record, pos = _read_exact(buf, pos, rlen, f"frame {k}")
        if rlen < _FRAME_FIXED.size:
            raise CountMismatchError(f"frame {k}: record of {rlen} bytes is shorter than its fixed part")
        vals = _FRAME_FIXED.unpack(record[:_FRAME_FIXED.size])
        n = vals[7]
        if _FRAME_FIXED.size + n * 20 != rlen:
            raise CountMismatchError(f"frame {k}: declares {n} points but the record holds {rlen - _FRAME_FIXED.size} bytes")
        off = _FRAME_FIXED.size
        xy = np.frombuffer(record, "<f8", 2 * n, off).reshape(n, 2).astype(np.float64)
        labels = np.frombuffer(record, "<i4", n, off + 16 * n).astype(np.int32)
        frames.append(Frame(vals[0], Pose2(*vals[1:4]), Pose2(*vals[4:7]), LabeledScan(vals[0], xy, labels)))
    if pos != len(buf):
        raise CountMismatchError(f"{len(buf) - pos} trailing bytes after the declared {declared} frames")
    return SessionLog(frames, frame_rate, header)


# ----------------------------------------------------------------------------
# maps


def write_map(path, grid: NdtGrid):
    idx = grid.touched()
    cells = np.zeros(len(idx), _CELL)
    if len(idx):
        i, j = idx[:, 0], idx[:, 1]
        cells["i"], cells["j"] = i, j
        cells["count"] = grid.count[i, j]
        cells["sum"] = grid.sums[i, j]
        cells["outer"] = grid.outers[i, j]
        cells["log_odds"] = grid.log_odds[i, j]
    meta = {
        "config": dataclasses.asdict(grid.config),
        "dropped_points": int(grid.dropped_points),
        "cell_count": int(len(idx)),
    }
    with open(path, "wb") as fh:
        _write_preamble(fh, MAP_MAGIC, MAP_VERSION, meta)
        fh.write(cells.tobytes())


def read_map(path) -> NdtGrid:
    buf = memoryview(Path(path).read_bytes())
    meta, pos = _read_preamble(buf, MAP_MAGIC, MAP_VERSION)
    try:
        config = MapConfig(**meta["config"])
        declared = int(meta["cell_count"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(f"map header invalid: {exc}") from None
    payload = len(buf) - pos
    if payload < declared * _CELL.itemsize:
        raise TruncatedFileError(f"map declares {declared} cells but holds {payload // _CELL.itemsize}")
    if payload != declared * _CELL.itemsize:
        raise CountMismatchError(f"map declares {declared} cells but holds {payload} bytes of cell data")
    cells = np.frombuffer(buf, _CELL, declared, pos)
    grid = NdtGrid(config)
    i, j = cells["i"].astype(np.int64), cells["j"].astype(np.int64)
    if declared and (i.min() < 0 or j.min() < 0 or i.max() >= grid.nx or j.max() >= grid.ny):
        raise FileFormatError("map cell index outside the declared extent")
    grid.count[i, j] = cells["count"]
    grid.sums[i, j] = cells["sum"]
    grid.outers[i, j] = cells["outer"]
    grid.log_odds[i, j] = cells["log_odds"]
    grid.dropped_points = int(meta.get("dropped_points", 0))
    return grid


# ----------------------------------------------------------------------------
# trajectories

TRAJECTORY_COLUMNS = ("timestamp", "x", "y", "psi")


def write_trajectory_csv(path, traj: Trajectory, extra: dict[str, np.ndarray] | None = None):
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRAJECTORY_COLUMNS + tuple(extra))
        for k in range(len(traj)):
            row = [traj.timestamps[k], *traj.poses[k]] + [col[k] for col in extra.values()]
            writer.writerow([repr(float(v)) for v in row])


def read_trajectory_csv(path) -> Trajectory:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        head = next(reader, None)
        if head is None or tuple(head[:4]) != TRAJECTORY_COLUMNS:
            raise FileFormatError(f"{path}: expected columns {TRAJECTORY_COLUMNS}")
        try:
            rows = np.array([[float(v) for v in r[:4]] for r in reader], dtype=float).reshape(-1, 4)
        except ValueError as exc:
            raise FileFormatError(f"{path}: {exc}") from None
    return Trajectory(rows[:, 0], rows[:, 1:])


# ----------------------------------------------------------------------------
# configuration

SESSION_KEYS = (
    "persistence", "spawn_rate", "park_jitter", "label_flip_prob", "range_noise_sigma", "frame_rate",
    "duration", "beam_count", "max_range", "ground_return_fraction", "ground_range", "agent_label_policy",
    "odom_noise",
)
WORLD_KEYS = ("seed", "n_slots", "n_agents", "file")
EXPERIMENT_KEYS = ("mapping_seeds", "localization_seeds", "map_types", "methods")


@dataclasses.dataclass
class Config:
    """Everything a command can be configured with; each section has documented defaults."""

    map: MapConfig = dataclasses.field(default_factory=MapConfig)
    filter: FilterConfig = dataclasses.field(default_factory=FilterConfig)
    localization: LocalizationConfig = dataclasses.field(default_factory=LocalizationConfig)
    session: dict = dataclasses.field(default_factory=dict)  # SessionSpec overrides
    world: dict = dataclasses.field(default_factory=lambda: {"seed": 0, "n_slots": 40, "n_agents": 6})
    partition: LabelPartition = dataclasses.field(default_factory=LabelPartition.semantic_kitti)
    experiment: dict = dataclasses.field(default_factory=dict)


def _check_keys(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")


def _fields(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls)]


def _build(cls, section: str, values: dict):
    _check_keys(section, values, _fields(cls))
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r}: {exc}") from None


def config_from_dict(doc: dict[str, Any] | None) -> Config:
    doc = doc or {}
    _check_keys("<root>", doc, _fields(Config))
    for section, value in doc.items():
        if not isinstance(value, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
    cfg = Config()
    if "map" in doc:
        values = dict(doc["map"])
        for key in ("origin", "extent"):
            if key in values:
                values[key] = tuple(values[key])
        cfg.map = _build(MapConfig, "map", values)
    if "filter" in doc:
        cfg.filter = _build(FilterConfig, "filter", dict(doc["filter"]))
    if "localization" in doc:
        values = dict(doc["localization"])
        _check_keys("localization", values, _fields(LocalizationConfig))
        if "motion_noise" in values:
            noise = dict(values["motion_noise"])
            _check_keys("localization.motion_noise", noise, _fields(MotionNoise))
            values["motion_noise"] = _build(MotionNoise, "localization.motion_noise",
                                            {k: tuple(v) for k, v in noise.items()})
        cfg.localization = _build(LocalizationConfig, "localization", values)
    if "session" in doc:
        values = dict(doc["session"])
        _check_keys("session", values, SESSION_KEYS)
        if "odom_noise" in values:
            _check_keys("session.odom_noise", values["odom_noise"], ("trans_per_m", "rot_per_m", "rot_per_rad"))
        cfg.session = values
    if "world" in doc:
        _check_keys("world", doc["world"], WORLD_KEYS)
        cfg.world = {**cfg.world, **doc["world"]}
    if "partition" in doc:
        values = dict(doc["partition"])
        _check_keys("partition", values, _fields(LabelPartition))
        try:
            cfg.partition = LabelPartition(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid 'partition': {exc}") from None
    if "experiment" in doc:
        _check_keys("experiment", doc["experiment"], EXPERIMENT_KEYS)
        cfg.experiment = dict(doc["experiment"])
    return cfg


def load_config(path) -> Config:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(doc)


def config_to_dict(cfg: Config) -> dict:
    part = cfg.partition
    return {
        "map": dataclasses.asdict(cfg.map),
        "filter": dataclasses.asdict(cfg.filter),
        "localization": dataclasses.asdict(cfg.localization),
        "session": dict(cfg.session),
        "world": dict(cfg.world),
        "partition": {
            "static_labels": sorted(part.static_labels),
            "semi_static_labels": sorted(part.semi_static_labels),
            "dynamic_labels": sorted(part.dynamic_labels),
            "ground_labels": sorted(part.ground_labels),
            "registry": list(part.registry),
        },
        "experiment": dict(cfg.experiment),
    }


def dump_config(cfg: Config) -> str:
    def plain(v):
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        return v

    return yaml.safe_dump(plain(config_to_dict(cfg)), sort_keys=False)
