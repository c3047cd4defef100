"""Trajectory alignment, ATE / RPE and aggregation of experiment runs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import Pose2, Trajectory, compose_arrays


@dataclass
class AlignedPair:
    estimated: Trajectory  # already mapped through ``alignment``
    reference: Trajectory
    alignment: Pose2


def _check_pair(est: Trajectory, ref: Trajectory, minimum: int = 2):
    if len(est) != len(ref):
        raise ValueError(f"trajectory length mismatch: {len(est)} vs {len(ref)}")
    if len(est) < minimum:
        raise ValueError(f"need at least {minimum} poses")


def rigid_fit_2d(src: np.ndarray, dst: np.ndarray, rotation: bool = True) -> Pose2:
    """Least-squares rigid transform T minimizing sum |T(src) - dst|^2 (no scale)."""
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    if not rotation:
        t = mu_d - mu_s
        return Pose2(t[0], t[1], 0.0)
    h = (src - mu_s).T @ (dst - mu_d)
    u, _, vt = np.linalg.svd(h)
    fix = np.diag([1.0, np.sign(np.linalg.det(vt.T @ u.T)) or 1.0])
    r = vt.T @ fix @ u.T
    t = mu_d - r @ mu_s
    return Pose2(t[0], t[1], math.atan2(r[1, 0], r[0, 0]))


def apply(transform: Pose2, traj: Trajectory) -> Trajectory:
    return Trajectory(traj.timestamps, compose_arrays(transform.as_array()[None], traj.poses))


def align(est: Trajectory, ref: Trajectory, rotation: bool = True) -> AlignedPair:
    """Align ``est`` onto ``ref`` by a 2D rigid transform of the translations."""
    _check_pair(est, ref)
    transform = rigid_fit_2d(est.xy, ref.xy, rotation)
    return AlignedPair(apply(transform, est), ref, transform)


def translation_errors(pair: AlignedPair) -> np.ndarray:
    return np.linalg.norm(pair.estimated.xy - pair.reference.xy, axis=1)


def ate_rmse(pair: AlignedPair) -> float:
    e = translation_errors(pair)
    return float(np.sqrt(np.mean(e**2)))


def _relative(poses: np.ndarray, delta_k: int) -> np.ndarray:
    a, b = poses[:-delta_k], poses[delta_k:]
    inv = np.empty_like(a)
    c, s = np.cos(a[:, 2]), np.sin(a[:, 2])
    inv[:, 0] = -c * a[:, 0] - s * a[:, 1]
    inv[:, 1] = s * a[:, 0] - c * a[:, 1]
    inv[:, 2] = -a[:, 2]
    return compose_arrays(inv, b)


def rpe_errors(pair: AlignedPair, delta_k: int = 1) -> np.ndarray:
    """Translational norm of (ref_i^-1 ref_i+k)^-1 (est_i^-1 est_i+k) per step."""
    est, ref = pair.estimated, pair.reference
    if len(est) <= delta_k:
        raise ValueError("trajectory shorter than delta_k + 1")
    d_est = _relative(est.poses, delta_k)
    d_ref = _relative(ref.poses, delta_k)
    c, s = np.cos(d_ref[:, 2]), np.sin(d_ref[:, 2])
    inv_ref = np.stack([-c * d_ref[:, 0] - s * d_ref[:, 1], s * d_ref[:, 0] - c * d_ref[:, 1], -d_ref[:, 2]], 1)
    err = compose_arrays(inv_ref, d_est)
    return np.hypot(err[:, 0], err[:, 1])


def rpe_rmse(pair: AlignedPair, delta_k: int = 1) -> float:
    e = rpe_errors(pair, delta_k)
    return float(np.sqrt(np.mean(e**2)))


@dataclass
class MetricSummary:
    ate_rmse: float
    rpe_rmse: float
    errors: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))
    timestamps: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))
    map_type: str = ""
    method: str = ""
    run: str = ""
    mapping_seed: int = 0
    localization_seed: int = 0


def evaluate(est: Trajectory, ref: Trajectory, rotation: bool = True, **labels) -> MetricSummary:
    pair = align(est, ref, rotation)
    return MetricSummary(ate_rmse(pair), rpe_rmse(pair), translation_errors(pair), est.timestamps.copy(), **labels)


SUMMARY_COLUMNS = (
    "map_type", "method", "ate_mean", "ate_var", "rpe_mean", "rpe_var",
    "q25", "q50", "q75", "min", "max", "n_runs",
)


def aggregate(runs: Iterable[MetricSummary], map_types: Sequence[str] | None = None,
              methods: Sequence[str] | None = None) -> list[dict]:
    """One row per (map type, method): mean, sample variance and quartiles of ATE, mean/variance of RPE."""
    groups: dict[tuple[str, str], list[MetricSummary]] = {}
    for r in runs:
        groups.setdefault((r.map_type, r.method), []).append(r)
    keys = list(groups)
    if map_types is not None and methods is not None:
        keys = [(m, k) for m in map_types for k in methods if (m, k) in groups]
    rows = []
    for key in keys:
        ate = np.array([r.ate_rmse for r in groups[key]])
        rpe = np.array([r.rpe_rmse for r in groups[key]])
        n = len(ate)
        q25, q50, q75 = np.percentile(ate, [25, 50, 75])
        rows.append({
            "map_type": key[0],
            "method": key[1],
            "ate_mean": float(ate.mean()),
            "ate_var": float(ate.var(ddof=1)) if n > 1 else 0.0,
            "rpe_mean": float(rpe.mean()),
            "rpe_var": float(rpe.var(ddof=1)) if n > 1 else 0.0,
            "q25": float(q25),
            "q50": float(q50),
            "q75": float(q75),
            "min": float(ate.min()),
            "max": float(ate.max()),
            "n_runs": n,
        })
    return rows


def write_summary_csv(path, rows: list[dict]):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def write_error_series_csv(path, summary: MetricSummary):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", "err_m"])
        for t, e in zip(summary.timestamps, summary.errors):
            writer.writerow([repr(float(t)), repr(float(e))])
