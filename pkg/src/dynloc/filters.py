"""Per-measurement dynamic-class selection: the semantic label filter, the
clustering / centroid-tracking dynamic filter, and the method table that
mapping and localization share.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .core import ALL_CLASSES, D, E, S, DynamicClass, LabeledScan, LabelPartition, Pose2


class ConfigurationError(ValueError):
    pass


class OutOfOrderError(ValueError):
    """Scans reached the dynamic filter with non-increasing timestamps."""


@dataclass(frozen=True)
class FilterConfig:
    cluster_dist: float = 0.5
    min_cluster_size: int = 5
    speed_threshold: float = 0.5
    gate_radius: float = 2.0
    voxel_leaf: float = 0.2

    def __post_init__(self):
        for name in ("cluster_dist", "min_cluster_size", "speed_threshold", "gate_radius", "voxel_leaf"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class MethodSpec:
    name: str
    delta: frozenset[DynamicClass]
    dynamic_filter: bool
    semantic_filter: bool


METHODS: dict[str, MethodSpec] = {
    "baseline": MethodSpec("baseline", ALL_CLASSES, False, False),
    "filtered": MethodSpec("filtered", frozenset({S, E}), True, False),
    "static": MethodSpec("static", frozenset({S}), False, True),
    "combined": MethodSpec("combined", frozenset({S}), True, True),
}

# how each map type selects its measurements
MAP_TYPES: dict[str, MethodSpec] = {"baseline": METHODS["baseline"], "static": METHODS["static"]}


def method_for(delta: Iterable[DynamicClass], route: str = "semantic") -> MethodSpec:
    """Resolve a class selection to one of the four supported rows.

    ``{S}`` is reachable by two routes: ``"semantic"`` (label filter only)
    and ``"combined"`` (dynamic filter, then label filter).
    """
    delta = frozenset(delta)
    if delta == ALL_CLASSES:
        return METHODS["baseline"]
    if delta == frozenset({S, E}):
        return METHODS["filtered"]
    if delta == frozenset({S}):
        if route == "semantic":
            return METHODS["static"]
        if route == "combined":
            return METHODS["combined"]
        raise ConfigurationError(f"unknown route {route!r} for the static selection")
    raise ConfigurationError(f"unsupported class selection {sorted(c.value for c in delta)}")


def get_method(name: str) -> MethodSpec:
    try:
        return METHODS[name]
    except KeyError:
        raise ConfigurationError(f"unknown method {name!r}; expected one of {sorted(METHODS)}") from None


@dataclass(frozen=True)
class Cluster:
    point_indices: np.ndarray
    centroid: np.ndarray
    majority_label: int


@dataclass(frozen=True)
class Track:
    track_id: int
    centroid: tuple[float, float]
    timestamp: float
    speed: float


@dataclass(frozen=True)
class TrackState:
    tracks: tuple[Track, ...] = ()
    last_timestamp: float | None = None
    next_id: int = 0


def semantic_filter(scan: LabeledScan, partition: LabelPartition, keep: Iterable[DynamicClass]) -> LabeledScan:
    """Keep the points whose label class is in ``keep``; order is preserved."""
    return scan.subset(partition.mask(scan.labels, frozenset(keep)))


def remove_ground(scan: LabeledScan, partition: LabelPartition) -> tuple[LabeledScan, LabeledScan]:
    is_ground = np.isin(scan.labels, list(partition.ground_labels))
    return scan.subset(is_ground), scan.subset(~is_ground)


def modal_labels(groups: np.ndarray, labels: np.ndarray, n_groups: int) -> np.ndarray:
    """Most frequent label per group; ties go to the smallest label id."""
    if n_groups == 0:
        return np.empty(0, np.int32)
    pairs, counts = np.unique(np.stack([groups, labels], 1), axis=0, return_counts=True)
    # sort by group, then count descending, then label ascending
    order = np.lexsort((pairs[:, 1], -counts, pairs[:, 0]))
    pairs = pairs[order]
    first = np.ones(len(pairs), bool)
    first[1:] = pairs[1:, 0] != pairs[:-1, 0]
    out = np.empty(n_groups, np.int32)
    out[pairs[first, 0]] = pairs[first, 1]
    return out


def connected_groups(xy: np.ndarray, radius: float) -> np.ndarray:
    """Single-linkage component id per point (points within ``radius`` are linked)."""
    n = len(xy)
    if n == 0:
        return np.empty(0, np.int64)
    pairs = cKDTree(xy).query_pairs(radius, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    return connected_components(graph, directed=False)[1]


def cluster(points: LabeledScan, config: FilterConfig | None = None) -> list[Cluster]:
    """Euclidean clustering; components below ``min_cluster_size`` are dropped.

    Clusters come back ordered by their smallest point index.
    """
    config = config or FilterConfig()
    n = len(points)
    if n == 0:
        return []
    comp = connected_groups(points.xy, config.cluster_dist)
    n_comp = comp.max() + 1
    sizes = np.bincount(comp, minlength=n_comp)
    majority = modal_labels(comp, points.labels, n_comp)
    first_index = np.unique(comp, return_index=True)[1]
    out = []
    for c in np.argsort(first_index):
        if sizes[c] < config.min_cluster_size:
            continue
        members = np.flatnonzero(comp == c)
        out.append(Cluster(members, points.xy[members].mean(axis=0), int(majority[c])))
    return out


def voxel_subsample(scan: LabeledScan, leaf: float) -> tuple[LabeledScan, np.ndarray]:
    """One point per occupied voxel (centroid, modal label), plus the voxel of every input point."""
    if len(scan) == 0:
        return scan, np.empty(0, np.int64)
    keys = np.floor(scan.xy / leaf).astype(np.int64)
    _, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    k = inv.max() + 1
    counts = np.bincount(inv, minlength=k)
    xy = np.stack([np.bincount(inv, scan.xy[:, 0], k), np.bincount(inv, scan.xy[:, 1], k)], 1) / counts[:, None]
    return LabeledScan(scan.timestamp, xy, modal_labels(inv, scan.labels, k)), inv


def _associate(centroids: np.ndarray, tracks: tuple[Track, ...], gate: float) -> dict[int, int]:
    """Greedy nearest-neighbour matching: cluster index -> track index."""
    if len(centroids) == 0 or len(tracks) == 0:
        return {}
    prev = np.array([t.centroid for t in tracks])
    dist = np.linalg.norm(centroids[:, None, :] - prev[None, :, :], axis=2)
    ci, ti = np.nonzero(dist <= gate)
    order = np.lexsort((ti, ci, dist[ci, ti]))
    used_c, used_t, match = set(), set(), {}
    for k in order:
        c, t = int(ci[k]), int(ti[k])
        if c in used_c or t in used_t:
            continue
        used_c.add(c)
        used_t.add(t)
        match[c] = t
    return match


def dynamic_filter(scan: LabeledScan, sensor_pose: Pose2, state: TrackState, partition: LabelPartition,
                   config: FilterConfig | None = None) -> tuple[LabeledScan, TrackState]:
    """Remove clusters that move faster than ``speed_threshold`` and carry a movable label.

    Ground and unclustered points are always kept. Tracks live for one frame.
    """
    config = config or FilterConfig()
    if state.last_timestamp is not None and not scan.timestamp > state.last_timestamp:
        raise OutOfOrderError(f"scan at t={scan.timestamp} after t={state.last_timestamp}")
    voxels, voxel_of_point = voxel_subsample(scan, config.voxel_leaf)
    non_ground = np.flatnonzero(~np.isin(voxels.labels, list(partition.ground_labels)))
    clusters = cluster(voxels.subset(non_ground), config)
    centroids = (
        sensor_pose.transform_points(np.array([c.centroid for c in clusters])) if clusters else np.empty((0, 2))
    )
    match = _associate(centroids, state.tracks, config.gate_radius)

    dynamic_voxels = []
    tracks = []
    next_id = state.next_id
    for k, (cl, centroid) in enumerate(zip(clusters, centroids)):
        if k in match:
            prev = state.tracks[match[k]]
            dt = scan.timestamp - prev.timestamp
            speed = math.dist(centroid, prev.centroid) / dt
            track_id = prev.track_id
        else:
            speed = 0.0
            track_id = next_id
            next_id += 1
        if speed > config.speed_threshold and partition.is_movable(cl.majority_label):
            dynamic_voxels.append(non_ground[cl.point_indices])
        tracks.append(Track(track_id, (float(centroid[0]), float(centroid[1])), scan.timestamp, speed))

    new_state = TrackState(tuple(tracks), scan.timestamp, next_id)
    if not dynamic_voxels:
        return scan, new_state
    drop = np.zeros(len(voxels), bool)
    drop[np.concatenate(dynamic_voxels)] = True
    return scan.subset(~drop[voxel_of_point]), new_state


def select(scan: LabeledScan, sensor_pose: Pose2, state: TrackState, partition: LabelPartition,
           delta, config: FilterConfig | None = None, route: str = "semantic") -> tuple[LabeledScan, TrackState]:
    """Apply the filter chain of one method row to a scan.

    ``delta`` is either a :class:`MethodSpec` or a set of dynamic classes
    (resolved with ``route``).
    """
    method = delta if isinstance(delta, MethodSpec) else method_for(delta, route)
    if method.dynamic_filter:
        scan, state = dynamic_filter(scan, sensor_pose, state, partition, config)
    if method.semantic_filter:
        scan = semantic_filter(scan, partition, {S})
    return scan, state
