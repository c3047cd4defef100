"""NDT occupancy grid: per-cell Gaussian fusion, log-odds occupancy and the
L2 distribution-to-distribution likelihood used by the localizer.

The grid keeps dense arrays internally (the default 200 m x 200 m map at
0.6 m is ~111k cells) and exposes the touched cells as a sparse mapping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np
from numba import njit

from .core import DynamicClass, LabelPartition, Pose2, SessionLog, EmptySessionError

_DEFAULT_P_HIT = 0.7
_DEFAULT_P_MISS = 0.4


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


@dataclass(frozen=True)
class MapConfig:
    resolution: float = 0.6
    origin: tuple[float, float] = (0.0, 0.0)
    extent: tuple[float, float] = (200.0, 200.0)
    min_points: int = 3
    eigen_floor: float = 1e-3
    p_hit: float = _DEFAULT_P_HIT
    p_miss: float = _DEFAULT_P_MISS
    l_min: float = -2.0
    l_max: float = 3.5
    occupancy_threshold: float = 0.0
    d1: float = 1.0
    d2: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "extent", tuple(float(v) for v in self.extent))
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.min_points < 2:
            raise ValueError("min_points must be at least 2")
        if not (0.0 < self.p_miss < 0.5 < self.p_hit < 1.0):
            raise ValueError("need 0 < p_miss < 0.5 < p_hit < 1")
        if self.l_min > 0 or self.l_max < 0:
            raise ValueError("log-odds clamp must contain 0")

    @property
    def l_hit(self) -> float:
        return logit(self.p_hit)

    @property
    def l_miss(self) -> float:
        return logit(self.p_miss)


@dataclass
class NdtCell:
    count: int = 0
    sum: np.ndarray = field(default_factory=lambda: np.zeros(2))
    outer_sum: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    log_odds: float = 0.0

    @property
    def mean(self) -> np.ndarray | None:
        if self.count < 1:
            return None
        return self.sum / self.count

    def covariance(self, min_points: int = 3) -> np.ndarray | None:
        """Unbiased sample covariance, or ``None`` below ``min_points``."""
        if self.count < max(min_points, 2):
            return None
        n = self.count
        return (self.outer_sum - np.outer(self.sum, self.sum) / n) / (n - 1)

    def is_valid(self, min_points: int = 3) -> bool:
        return self.count >= min_points


@dataclass(frozen=True)
class GaussianComponent:
    mean: np.ndarray
    cov: np.ndarray
    weight: int


def regularize(covs: np.ndarray, eigen_floor: float = 1e-3) -> np.ndarray:
    """Clamp eigenvalues of (K, 2, 2) covariances to >= eigen_floor * largest."""
    covs = np.asarray(covs, dtype=float)
    if covs.size == 0:
        return covs.reshape(-1, 2, 2).copy()
    sym = 0.5 * (covs + np.swapaxes(covs, -1, -2))
    vals, vecs = np.linalg.eigh(sym)
    floor = eigen_floor * vals[..., -1:]
    vals = np.maximum(vals, floor)
    return np.einsum("...ij,...j,...kj->...ik", vecs, vals, vecs)


def cell_statistics(points: np.ndarray, origin, resolution: float):
    """Group points by cell and return (keys (K,2), counts, sums (K,2), outers (K,3)).

    ``outers`` holds the xx, xy, yy entries of sum(p p^T).
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return (np.empty((0, 2), np.int64), np.empty(0, np.int64), np.empty((0, 2)), np.empty((0, 3)))
    idx = np.floor((pts - np.asarray(origin, dtype=float)) / resolution).astype(np.int64)
    # row-major linear keys give the same (i, j) order as a 2-D unique, far cheaper
    lo = idx.min(0)
    width = int(idx[:, 1].max() - lo[1]) + 1
    lin, inv = np.unique((idx[:, 0] - lo[0]) * width + (idx[:, 1] - lo[1]), return_inverse=True)
    keys = np.column_stack([lin // width + lo[0], lin % width + lo[1]])
    inv = inv.reshape(-1)
    k = len(keys)
    counts = np.bincount(inv, minlength=k)
    x, y = pts[:, 0], pts[:, 1]
    sums = np.stack([np.bincount(inv, x, k), np.bincount(inv, y, k)], axis=1)
    outers = np.stack(
        [np.bincount(inv, x * x, k), np.bincount(inv, x * y, k), np.bincount(inv, y * y, k)], axis=1
    )
    return keys, counts, sums, outers


def _covariances(counts, sums, outers) -> np.ndarray:
    n = counts.astype(float)[:, None]
    c = (outers - np.stack([sums[:, 0] ** 2, sums[:, 0] * sums[:, 1], sums[:, 1] ** 2], 1) / n) / (n - 1)
    return np.stack([np.stack([c[:, 0], c[:, 1]], -1), np.stack([c[:, 1], c[:, 2]], -1)], -2)


@njit(cache=True)
def _traverse_kernel(ox, oy, ends, gx0, gy0, res, nx, ny, mark, stamp, log_odds, l_hit, l_miss, l_min, l_max):
    # cells are updated once per scan: endpoints first, then every other cell crossed by a ray
    n = ends.shape[0]
    for r in range(n):
        i = int(math.floor((ends[r, 0] - gx0) / res))
        j = int(math.floor((ends[r, 1] - gy0) / res))
        if 0 <= i < nx and 0 <= j < ny and mark[i, j] != stamp:
            mark[i, j] = stamp
            v = log_odds[i, j] + l_hit
            log_odds[i, j] = min(max(v, l_min), l_max)
    hit_stamp = stamp
    miss_stamp = stamp + 1
    ux = (ox - gx0) / res
    uy = (oy - gy0) / res
    for r in range(n):
        ex = (ends[r, 0] - gx0) / res
        ey = (ends[r, 1] - gy0) / res
        i = int(math.floor(ux))
        j = int(math.floor(uy))
        ei = int(math.floor(ex))
        ej = int(math.floor(ey))
        dx = ex - ux
        dy = ey - uy
        step_i = 1 if dx > 0 else -1
        step_j = 1 if dy > 0 else -1
        if dx != 0.0:
            t_max_x = ((i + (1 if dx > 0 else 0)) - ux) / dx
            t_dx = abs(1.0 / dx)
        else:
            t_max_x = math.inf
            t_dx = math.inf
        if dy != 0.0:
            t_max_y = ((j + (1 if dy > 0 else 0)) - uy) / dy
            t_dy = abs(1.0 / dy)
        else:
            t_max_y = math.inf
            t_dy = math.inf
        remaining = abs(ei - i) + abs(ej - j)
        while remaining > 0:
            if not (0 <= i < nx and 0 <= j < ny):
                break
            m = mark[i, j]
            if m != hit_stamp and m != miss_stamp:
                mark[i, j] = miss_stamp
                v = log_odds[i, j] + l_miss
                log_odds[i, j] = min(max(v, l_min), l_max)
            # the axis checks keep rounding from overshooting the endpoint cell
            if j == ej or (i != ei and t_max_x < t_max_y):
                i += step_i
                t_max_x += t_dx
            else:
                j += step_j
                t_max_y += t_dy
            remaining -= 1


@njit(cache=True)
def _score_kernel(poses, cm, cc, lookup, mm, mc, gx0, gy0, res, d1, d2, out):
    n_pose = poses.shape[0]
    n_comp = cm.shape[0]
    nx = lookup.shape[0]
    ny = lookup.shape[1]
    singular = 0
    for p in range(n_pose):
        c = math.cos(poses[p, 2])
        s = math.sin(poses[p, 2])
        tx = poses[p, 0]
        ty = poses[p, 1]
        total = 0.0
        for k in range(n_comp):
            mx = c * cm[k, 0] - s * cm[k, 1] + tx
            my = s * cm[k, 0] + c * cm[k, 1] + ty
            a = cc[k, 0]
            b = cc[k, 1]
            d = cc[k, 2]
            ra = c * c * a - 2.0 * c * s * b + s * s * d
            rb = c * s * a + (c * c - s * s) * b - c * s * d
            rd = s * s * a + 2.0 * c * s * b + c * c * d
            ci = int(math.floor((mx - gx0) / res))
            cj = int(math.floor((my - gy0) / res))
            best = 0.0
            for di in range(-1, 2):
                i = ci + di
                if i < 0 or i >= nx:
                    continue
                for dj in range(-1, 2):
                    j = cj + dj
                    if j < 0 or j >= ny:
                        continue
                    m = lookup[i, j]
                    if m < 0:
                        continue
                    sa = ra + mc[m, 0]
                    sb = rb + mc[m, 1]
                    sd = rd + mc[m, 2]
                    det = sa * sd - sb * sb
                    if not det > 0.0:
                        singular += 1
                        continue
                    ex = mx - mm[m, 0]
                    ey = my - mm[m, 1]
                    q = (sd * ex * ex - 2.0 * sb * ex * ey + sa * ey * ey) / det
                    v = d1 * math.exp(-0.5 * d2 * q)
                    if v > best:
                        best = v
            total += best
        out[p] = total / n_comp if n_comp > 0 else 0.0
    return singular


@dataclass(frozen=True)
class ScoringIndex:
    """Immutable query view of a grid: the valid, occupied cells only."""

    lookup: np.ndarray  # (nx, ny) int32, -1 where no queryable cell
    means: np.ndarray  # (K, 2)
    covs: np.ndarray  # (K, 3) xx, xy, yy of the regularized covariance
    origin: tuple[float, float]
    resolution: float


class NdtGrid:
    """Fixed-resolution 2D NDT occupancy grid.

    ``cell_of(p) = floor((p - origin) / resolution)``; cells outside
    ``extent`` are never stored and points falling there are counted in
    ``dropped_points``.
    """

    def __init__(self, config: MapConfig | None = None, **overrides):
        config = config or MapConfig()
        if overrides:
            config = replace(config, **overrides)
        self.config = config
        self.nx = int(math.ceil(config.extent[0] / config.resolution - 1e-9))
        self.ny = int(math.ceil(config.extent[1] / config.resolution - 1e-9))
        shape = (self.nx, self.ny)
        self.count = np.zeros(shape, np.int64)
        self.sums = np.zeros(shape + (2,))
        self.outers = np.zeros(shape + (3,))
        self.log_odds = np.zeros(shape)
        self.dropped_points = 0
        self._mark = np.zeros(shape, np.int64)
        self._stamp = 0
        self._index: ScoringIndex | None = None

    # geometry -----------------------------------------------------------
    @property
    def resolution(self) -> float:
        return self.config.resolution

    @property
    def origin(self) -> np.ndarray:
        return np.array(self.config.origin)

    @property
    def extent(self) -> tuple[float, float]:
        return self.config.extent

    def cell_of(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return np.floor((pts - self.origin) / self.resolution).astype(np.int64)

    def in_extent(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx)
        return (idx[..., 0] >= 0) & (idx[..., 0] < self.nx) & (idx[..., 1] >= 0) & (idx[..., 1] < self.ny)

    def contains(self, point) -> bool:
        return bool(self.in_extent(self.cell_of(np.asarray(point, dtype=float))))

    # sparse view ----------------------------------------------------------
    def touched(self) -> np.ndarray:
        """Indices (K, 2) of cells holding points or occupancy evidence, row-major order."""
        return np.argwhere((self.count > 0) | (self.log_odds != 0.0))

    def cell(self, i: int, j: int) -> NdtCell:
        xx, xy, yy = self.outers[i, j]
        return NdtCell(
            int(self.count[i, j]),
            self.sums[i, j].copy(),
            np.array([[xx, xy], [xy, yy]]),
            float(self.log_odds[i, j]),
        )

    @property
    def cells(self) -> dict[tuple[int, int], NdtCell]:
        return {(int(i), int(j)): self.cell(i, j) for i, j in self.touched()}

    def __len__(self):
        return len(self.touched())

    # updates ----------------------------------------------------------------
    def _changed(self):
        self._index = None

    def insert_points(self, points) -> NdtGrid:
        """Add world-frame points to the per-cell sufficient statistics."""
        keys, counts, sums, outers = cell_statistics(points, self.origin, self.resolution)
        if len(keys) == 0:
            return self
        ok = self.in_extent(keys)
        self.dropped_points += int(counts[~ok].sum())
        i, j = keys[ok, 0], keys[ok, 1]
        self.count[i, j] += counts[ok]
        self.sums[i, j] += sums[ok]
        self.outers[i, j] += outers[ok]
        self._changed()
        return self

    def update_occupancy(self, sensor_origin, scan_endpoints) -> NdtGrid:
        """Inverse-sensor update: one hit per endpoint cell, one miss per other crossed cell."""
        ends = np.ascontiguousarray(np.asarray(scan_endpoints, dtype=float).reshape(-1, 2))
        if len(ends) == 0:
            return self
        ox, oy = (float(v) for v in sensor_origin)
        if not self.contains((ox, oy)):
            raise ValueError("sensor origin outside grid extent")
        cfg = self.config
        self._stamp += 2
        _traverse_kernel(
            ox, oy, ends, cfg.origin[0], cfg.origin[1], cfg.resolution, self.nx, self.ny,
            self._mark, self._stamp, self.log_odds, cfg.l_hit, cfg.l_miss, cfg.l_min, cfg.l_max,
        )
        self._changed()
        return self

    # queries ------------------------------------------------------------
    def queryable_mask(self) -> np.ndarray:
        cfg = self.config
        return (self.count >= cfg.min_points) & (self.log_odds >= cfg.occupancy_threshold)

    def components(self, queryable_only: bool = True) -> list[GaussianComponent]:
        """Valid cells as world-frame Gaussians with regularized covariance."""
        mask = self.queryable_mask() if queryable_only else self.count >= self.config.min_points
        ij = np.argwhere(mask)
        if len(ij) == 0:
            return []
        counts = self.count[ij[:, 0], ij[:, 1]]
        sums = self.sums[ij[:, 0], ij[:, 1]]
        covs = regularize(_covariances(counts, sums, self.outers[ij[:, 0], ij[:, 1]]), self.config.eigen_floor)
        means = sums / counts[:, None]
        return [GaussianComponent(m, c, int(n)) for m, c, n in zip(means, covs, counts)]

    def scoring_index(self) -> ScoringIndex:
        if self._index is None:
            mask = self.queryable_mask()
            ij = np.argwhere(mask)
            lookup = np.full((self.nx, self.ny), -1, np.int32)
            lookup[ij[:, 0], ij[:, 1]] = np.arange(len(ij), dtype=np.int32)
            counts = self.count[ij[:, 0], ij[:, 1]]
            sums = self.sums[ij[:, 0], ij[:, 1]]
            if len(ij):
                covs = regularize(_covariances(counts, sums, self.outers[ij[:, 0], ij[:, 1]]), self.config.eigen_floor)
                means = sums / counts[:, None]
            else:
                covs = np.empty((0, 2, 2))
                means = np.empty((0, 2))
            flat = np.ascontiguousarray(np.stack([covs[:, 0, 0], covs[:, 0, 1], covs[:, 1, 1]], 1))
            self._index = ScoringIndex(lookup, np.ascontiguousarray(means), flat, self.config.origin, self.resolution)
        return self._index

    def __eq__(self, other):
        if not isinstance(other, NdtGrid):
            return NotImplemented
        return (
            self.config == other.config
            and np.array_equal(self.count, other.count)
            and np.array_equal(self.sums, other.sums)
            and np.array_equal(self.outers, other.outers)
            and np.array_equal(self.log_odds, other.log_odds)
        )

    def __repr__(self):
        return f"NdtGrid(res={self.resolution}, shape={self.nx}x{self.ny}, touched={len(self)})"


def rasterize_scan(points, resolution: float = 0.6, min_points: int = 3, eigen_floor: float = 1e-3) -> list[GaussianComponent]:
    """Local NDT of a sensor-frame scan; the grid is anchored at the sensor."""
    means, covs, counts = scan_components(points, resolution, min_points, eigen_floor)
    return [GaussianComponent(m, c, int(n)) for m, c, n in zip(means, covs, counts)]


def scan_components(points, resolution: float = 0.6, min_points: int = 3, eigen_floor: float = 1e-3):
    """Array form of :func:`rasterize_scan`: (means (K,2), covs (K,2,2), counts (K,))."""
    keys, counts, sums, outers = cell_statistics(points, (0.0, 0.0), resolution)
    ok = counts >= min_points
    counts, sums, outers = counts[ok], sums[ok], outers[ok]
    if len(counts) == 0:
        return np.empty((0, 2)), np.empty((0, 2, 2)), counts
    covs = regularize(_covariances(counts, sums, outers), eigen_floor)
    return sums / counts[:, None], covs, counts


def _as_arrays(scan_ndt) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(scan_ndt, tuple):
        means, covs = scan_ndt[0], scan_ndt[1]
    else:
        comps = list(scan_ndt)
        means = np.array([c.mean for c in comps], dtype=float).reshape(-1, 2)
        covs = np.array([c.cov for c in comps], dtype=float).reshape(-1, 2, 2)
    return np.asarray(means, float), np.asarray(covs, float)


def l2_score(grid: NdtGrid, scan_ndt, pose: Pose2, d1: float | None = None, d2: float | None = None,
             diagnostics: dict | None = None) -> float:
    """L2 likelihood of a sensor-frame scan NDT against the map at ``pose``.

    Each scan component is moved into the world, compared with the valid map
    cells in the 3x3 block around its mean, and contributes its best pair
    term ``d1 * exp(-d2/2 * mu^T (S_scan + S_map)^-1 mu)``. The score is the
    mean contribution over scan components. Straight-line reference code;
    :func:`score_poses` is the fast path.
    """
    d1 = grid.config.d1 if d1 is None else d1
    d2 = grid.config.d2 if d2 is None else d2
    means, covs = _as_arrays(scan_ndt)
    if len(means) == 0:
        return 0.0
    index = grid.scoring_index()
    rot = pose.rotation()
    total = 0.0
    for mean, cov in zip(means, covs):
        m_world = rot @ mean + pose.translation
        c_world = rot @ cov @ rot.T
        ci, cj = (int(v) for v in np.floor((m_world - grid.origin) / grid.resolution))
        best = 0.0
        for i in range(ci - 1, ci + 2):
            for j in range(cj - 1, cj + 2):
                if not (0 <= i < grid.nx and 0 <= j < grid.ny):
                    continue
                k = index.lookup[i, j]
                if k < 0:
                    continue
                xx, xy, yy = index.covs[k]
                summed = c_world + np.array([[xx, xy], [xy, yy]])
                if not np.linalg.det(summed) > 0.0:
                    if diagnostics is not None:
                        diagnostics["singular_pairs"] = diagnostics.get("singular_pairs", 0) + 1
                    continue
                mu = m_world - index.means[k]
                best = max(best, d1 * math.exp(-0.5 * d2 * float(mu @ np.linalg.solve(summed, mu))))
        total += best
    return total / len(means)


def score_poses(grid_or_index, means: np.ndarray, covs: np.ndarray, poses: np.ndarray,
                d1: float = 1.0, d2: float = 0.05) -> np.ndarray:
    """L2 score of one scan NDT at many poses (compiled)."""
    index = grid_or_index.scoring_index() if isinstance(grid_or_index, NdtGrid) else grid_or_index
    poses = np.ascontiguousarray(np.asarray(poses, dtype=float).reshape(-1, 3))
    out = np.zeros(len(poses))
    if len(means) == 0 or len(poses) == 0:
        return out
    covs = np.asarray(covs, dtype=float)
    flat = np.ascontiguousarray(np.stack([covs[:, 0, 0], covs[:, 0, 1], covs[:, 1, 1]], 1))
    _score_kernel(
        poses, np.ascontiguousarray(means, dtype=float), flat, index.lookup, index.means, index.covs,
        index.origin[0], index.origin[1], index.resolution, d1, d2, out,
    )
    return out


def build_map(log: SessionLog, partition: LabelPartition, delta_m: Iterable[DynamicClass],
              config: MapConfig | None = None, route: str = "semantic", filter_config=None) -> NdtGrid:
    """Fuse a session into an NDT occupancy map using ground-truth poses.

    Each frame goes through the same class selection the localizer uses,
    selected by ``delta_m`` (and ``route`` when ``delta_m`` is static only).
    """
    from .filters import FilterConfig, TrackState, method_for, select

    if len(log) == 0:
        raise EmptySessionError("cannot build a map from an empty session")
    method = method_for(frozenset(delta_m), route)
    fcfg = filter_config or FilterConfig()
    grid = NdtGrid(config or MapConfig())
    state = TrackState()
    for frame in log:
        scan, state = select(frame.scan, frame.ground_truth, state, partition, method, fcfg)
        if len(scan) == 0:
            continue
        world = frame.ground_truth.transform_points(scan.xy)
        grid.insert_points(world)
        grid.update_occupancy(frame.ground_truth.translation, world)
    return grid
