"""Deterministic 2D city world and lidar simulator.

A mapping session and any number of localization sessions are generated
from one :class:`WorldSpec`. Between sessions, parked cars (semi-static)
persist or relocate and moving agents (dynamic) follow their loops with
seeded phase offsets.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from numba import njit

from .core import (
    SEMANTIC_KITTI_LABELS,
    Frame,
    LabeledScan,
    Pose2,
    SessionLog,
    compose,
    inverse,
)

CAR_LABEL = 10
PERSON_LABEL = 30
MOVING_LABELS = {CAR_LABEL: 252, PERSON_LABEL: 254}
GROUND_LABEL = 40
BUILDING, FENCE, VEGETATION, TRUNK, POLE, SIGN = 50, 51, 70, 71, 80, 81

GROUND_ID = -1
NO_OBJECT = -2
PARKED_ID_BASE = 100_000
AGENT_ID_BASE = 200_000


class SimulationError(ValueError):
    pass


# ----------------------------------------------------------------------------
# geometry


def rect_corners(cx: float, cy: float, length: float, width: float, heading: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = length / 2, width / 2
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    return local @ np.array([[c, s], [-s, c]]) + (cx, cy)


def polygon_segments(corners: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return corners, np.roll(corners, -1, axis=0)


@dataclass(frozen=True)
class Shape:
    """A labeled obstacle: a rectangle (``width > 0``) or a thin segment (``width == 0``)."""

    label: int
    cx: float
    cy: float
    length: float
    width: float
    heading: float = 0.0

    def segments(self) -> tuple[np.ndarray, np.ndarray]:
        if self.width == 0:
            c, s = math.cos(self.heading), math.sin(self.heading)
            h = self.length / 2
            p = np.array([[self.cx - c * h, self.cy - s * h]])
            q = np.array([[self.cx + c * h, self.cy + s * h]])
            return p, q
        return polygon_segments(rect_corners(self.cx, self.cy, self.length, self.width, self.heading))


class Path:
    """Closed polyline loop with circular-arc corners, parameterized by arc length."""

    def __init__(self, waypoints, corner_radius: float = 0.0, step: float = 0.2):
        wp = np.asarray(waypoints, dtype=float).reshape(-1, 2)
        if len(wp) < 2:
            raise SimulationError("a path needs at least two waypoints")
        dense = []
        n = len(wp)
        for k in range(n):
            prev, corner, nxt = wp[k - 1], wp[k], wp[(k + 1) % n]
            u1, u2 = corner - prev, nxt - corner
            l1, l2 = np.linalg.norm(u1), np.linalg.norm(u2)
            if l1 == 0 or l2 == 0:
                dense.append(corner)
                continue
            u1, u2 = u1 / l1, u2 / l2
            turn = math.atan2(u1[0] * u2[1] - u1[1] * u2[0], float(u1 @ u2))
            r = min(corner_radius, 0.45 * min(l1, l2) / max(math.tan(abs(turn) / 2), 1e-9))
            if r <= 0 or abs(turn) < 1e-9:
                dense.append(corner)
                continue
            td = r * math.tan(abs(turn) / 2)
            a = corner - u1 * td
            side = 1.0 if turn > 0 else -1.0
            centre = a + side * r * np.array([-u1[1], u1[0]])
            start = math.atan2(a[1] - centre[1], a[0] - centre[0])
            m = max(2, int(math.ceil(abs(turn) * r / step)) + 1)
            for ang in start + np.linspace(0.0, turn, m):
                dense.append(centre + r * np.array([math.cos(ang), math.sin(ang)]))
        pts = np.array(dense)
        closed = np.vstack([pts, pts[:1]])
        seg = np.diff(closed, axis=0)
        seg_len = np.linalg.norm(seg, axis=1)
        keep = seg_len > 1e-12
        self.points = closed[:-1][keep]
        self.directions = seg[keep]
        self.seg_len = seg_len[keep]
        self.s = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.length = float(self.s[-1])
        if not self.length > 0:
            raise SimulationError("path has zero length")

    def pose_at(self, s: float) -> Pose2:
        s = s % self.length
        k = int(np.searchsorted(self.s, s, side="right") - 1)
        k = min(max(k, 0), len(self.seg_len) - 1)
        frac = (s - self.s[k]) / self.seg_len[k]
        p = self.points[k] + frac * self.directions[k]
        d = self.directions[k]
        return Pose2(p[0], p[1], math.atan2(d[1], d[0]))

    def distance_to(self, xy: np.ndarray) -> np.ndarray:
        """Distance from each (N, 2) point to the loop."""
        xy = np.asarray(xy, float).reshape(-1, 2)
        a = self.points[None]
        d = self.directions[None]
        w = xy[:, None, :] - a
        t = np.clip(np.sum(w * d, axis=2) / np.sum(d * d, axis=2), 0.0, 1.0)
        closest = a + t[..., None] * d
        return np.min(np.linalg.norm(xy[:, None, :] - closest, axis=2), axis=1)


def offset_loop(waypoints, offset: float) -> np.ndarray:
    """Shift a counter-clockwise rectangle-like loop sideways (positive = left)."""
    wp = np.asarray(waypoints, float)
    n = len(wp)
    out = []
    for k in range(n):
        prev, corner, nxt = wp[k - 1], wp[k], wp[(k + 1) % n]
        u1 = (corner - prev) / np.linalg.norm(corner - prev)
        u2 = (nxt - corner) / np.linalg.norm(nxt - corner)
        n1 = np.array([-u1[1], u1[0]])
        n2 = np.array([-u2[1], u2[0]])
        bis = n1 + n2
        scale = offset / max(float(bis @ n1), 1e-9)
        out.append(corner + bis * scale)
    return np.array(out)


@dataclass(frozen=True)
class ParkingSlot:
    x: float
    y: float
    heading: float
    occupancy_prob: float = 0.7


@dataclass(frozen=True)
class AgentSpec:
    waypoints: tuple[tuple[float, float], ...]
    speed: float
    kind: str = "car"  # "car" or "person"
    corner_radius: float = 4.0

    @property
    def size(self) -> tuple[float, float]:
        return (4.5, 1.8) if self.kind == "car" else (0.6, 0.6)

    @property
    def base_label(self) -> int:
        return CAR_LABEL if self.kind == "car" else PERSON_LABEL


@dataclass(frozen=True)
class RouteSpec:
    waypoints: tuple[tuple[float, float], ...]
    speed: float = 5.0
    corner_radius: float = 6.0
    start_offset: float = 0.0  # arc length at which every session starts


@dataclass(frozen=True)
class WorldSpec:
    bounds: tuple[float, float]
    static_shapes: tuple[Shape, ...]
    parking_slots: tuple[ParkingSlot, ...]
    dynamic_agents: tuple[AgentSpec, ...]
    route: RouteSpec
    car_size: tuple[float, float] = (4.5, 1.8)

    def route_path(self) -> Path:
        return Path(self.route.waypoints, self.route.corner_radius)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> WorldSpec:
        return cls(
            bounds=tuple(d["bounds"]),
            static_shapes=tuple(Shape(**s) for s in d["static_shapes"]),
            parking_slots=tuple(ParkingSlot(**s) for s in d["parking_slots"]),
            dynamic_agents=tuple(
                AgentSpec(tuple(tuple(p) for p in a["waypoints"]), a["speed"], a.get("kind", "car"),
                          a.get("corner_radius", 4.0))
                for a in d["dynamic_agents"]
            ),
            route=RouteSpec(tuple(tuple(p) for p in d["route"]["waypoints"]), d["route"].get("speed", 5.0),
                            d["route"].get("corner_radius", 6.0), d["route"].get("start_offset", 0.0)),
            car_size=tuple(d.get("car_size", (4.5, 1.8))),
        )

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self, corridor: float = 1.5):
        path = self.route_path()
        w, h = self.bounds
        pts = path.points
        if np.any(pts < 0) or np.any(pts[:, 0] > w) or np.any(pts[:, 1] > h):
            raise SimulationError("route leaves the world bounds")
        for shape in self.static_shapes:
            p, q = shape.segments()
            probe = np.vstack([p, q, (p + q) / 2])
            if np.any(path.distance_to(probe) < corridor):
                raise SimulationError(f"static shape at ({shape.cx:.1f}, {shape.cy:.1f}) blocks the route")


# ----------------------------------------------------------------------------
# default world


def default_world(seed: int = 0, n_slots: int = 40, n_agents: int = 6) -> WorldSpec:
    """200 m x 200 m block grid with building-lined streets around a 300 m loop.

    Street cross-section from the centreline: 3.5 m road, parking lane to
    6 m, sidewalk to 8 m, then facades with small random setbacks. The loop
    runs counter-clockwise around the central block.
    """
    rng = np.random.default_rng(seed)
    size = 200.0
    xs, ys = (40.0, 120.0), (50.0, 130.0)
    half = 8.0
    shapes: list[Shape] = []

    # building blocks between streets
    x_edges = [0.0, xs[0] - half, xs[0] + half, xs[1] - half, xs[1] + half, size]
    y_edges = [0.0, ys[0] - half, ys[0] + half, ys[1] - half, ys[1] + half, size]
    x_blocks = [(x_edges[0], x_edges[1]), (x_edges[2], x_edges[3]), (x_edges[4], x_edges[5])]
    y_blocks = [(y_edges[0], y_edges[1]), (y_edges[2], y_edges[3]), (y_edges[4], y_edges[5])]

    def facade_row(x0, x1, y_face, outward, horizontal=True):
        # buildings along one block edge; outward points to the street
        pos = x0 + rng.uniform(0.0, 3.0)
        while pos < x1 - 4.0:
            length = min(rng.uniform(8.0, 24.0), x1 - pos)
            depth = rng.uniform(8.0, 14.0)
            setback = rng.uniform(0.0, 2.0)
            centre_along = pos + length / 2
            centre_across = y_face - outward * (setback + depth / 2)
            if horizontal:
                shapes.append(Shape(BUILDING, centre_along, centre_across, length, depth))
            else:
                shapes.append(Shape(BUILDING, centre_across, centre_along, depth, length))
            gap = rng.uniform(1.0, 6.0)
            if gap > 3.5 and rng.uniform() < 0.5:
                # fence across the gap, flush with the facade line
                f_along = pos + length + gap / 2
                f_across = y_face - outward * 0.2
                if horizontal:
                    shapes.append(Shape(FENCE, f_along, f_across, gap - 0.4, 0.0, 0.0))
                else:
                    shapes.append(Shape(FENCE, f_across, f_along, gap - 0.4, 0.0, math.pi / 2))
            pos += length + gap

    for bx in x_blocks:
        for by in y_blocks:
            if bx[1] - bx[0] < 4 or by[1] - by[0] < 4:
                continue
            if by[0] > 0:
                facade_row(bx[0], bx[1], by[0], -1.0, True)
            if by[1] < size:
                facade_row(bx[0], bx[1], by[1], +1.0, True)
            if bx[0] > 0:
                facade_row(by[0], by[1], bx[0], -1.0, False)
            if bx[1] < size:
                facade_row(by[0], by[1], bx[1], +1.0, False)

    # loop (counter-clockwise) around the central block
    route_wp = ((xs[0], ys[0]), (xs[1], ys[0]), (xs[1], ys[1]), (xs[0], ys[1]))
    route = RouteSpec(route_wp, speed=5.0, corner_radius=6.0, start_offset=30.0)

    # street furniture on the loop's sidewalks: sparse poles, signs and tree trunks
    def along_loop(spacing_lo, spacing_hi, lateral, label, size_xy, length_range=None):
        for (ax, ay), (bx_, by_) in zip(route_wp, route_wp[1:] + route_wp[:1]):
            d = np.array([bx_ - ax, by_ - ay])
            length = np.linalg.norm(d)
            u = d / length
            n = np.array([-u[1], u[0]])
            t = rng.uniform(12.0, 20.0)
            while t < length - 12.0:
                side = rng.choice([-1.0, 1.0])
                p = np.array([ax, ay]) + u * t + n * side * lateral
                if length_range is None:
                    shapes.append(Shape(label, float(p[0]), float(p[1]), size_xy, size_xy))
                else:
                    # hedge running along the kerb
                    hedge = rng.uniform(*length_range)
                    p = p + u * hedge / 2
                    shapes.append(Shape(label, float(p[0]), float(p[1]), hedge, size_xy, math.atan2(u[1], u[0])))
                    t += hedge
                t += rng.uniform(spacing_lo, spacing_hi)

    along_loop(8.0, 20.0, 7.0, POLE, 0.3)
    along_loop(10.0, 30.0, 7.2, TRUNK, 0.5)
    along_loop(20.0, 40.0, 6.8, SIGN, 0.25)
    along_loop(15.0, 40.0, 7.4, VEGETATION, 0.8, (2.0, 6.0))

    # parking rows along the loop's curbs, away from intersections
    slots: list[ParkingSlot] = []
    rows = []
    for (ax, ay), (bx_, by_) in zip(route_wp, route_wp[1:] + route_wp[:1]):
        d = np.array([bx_ - ax, by_ - ay])
        length = np.linalg.norm(d)
        u = d / length
        n = np.array([-u[1], u[0]])
        heading = math.atan2(u[1], u[0])
        for side in (-1.0, 1.0):
            rows.append((np.array([ax, ay]), u, n * side, heading, length))
    order = rng.permutation(len(rows))
    per_row = np.full(len(rows), n_slots // len(rows))
    per_row[: n_slots % len(rows)] += 1
    for r, count in zip(order, per_row):
        start, u, n, heading, length = rows[r]
        # split the row into two groups of consecutive slots
        first = int(count) // 2
        groups = [first, int(count) - first]
        cursor = 14.0 + rng.uniform(0.0, 6.0)
        for gi, g in enumerate(groups):
            if gi:
                cursor += rng.uniform(8.0, 16.0)
            for _ in range(g):
                p = start + u * (cursor + 3.0) + n * 4.75
                slots.append(ParkingSlot(float(p[0]), float(p[1]), heading, 0.7))
                cursor += 6.0
        if cursor > length - 10.0:
            raise SimulationError("parking row does not fit on its street")

    # moving agents: cars in lanes either side of the centre line, pedestrians on sidewalks
    agents = []
    kinds = ["car", "car", "car", "car", "person", "person"]
    for k in range(n_agents):
        kind = kinds[k % len(kinds)]
        if kind == "car":
            lateral = 2.0 if k % 2 == 0 else -2.0
            speed = float(rng.uniform(4.0, 8.0))
        else:
            lateral = 6.4 if k % 2 == 0 else -6.4
            speed = float(rng.uniform(1.2, 1.6))
        wp = offset_loop(route_wp, lateral)
        if k % 2 == 1:
            wp = wp[::-1]
        agents.append(AgentSpec(tuple(map(tuple, wp.tolist())), speed, kind, 6.0 - lateral if kind == "car" else 2.0))

    world = WorldSpec((size, size), tuple(shapes), tuple(slots), tuple(agents), route)
    world.validate()
    return world


# ----------------------------------------------------------------------------
# sessions


@dataclass(frozen=True)
class OdometryNoise:
    """Per-step std devs: translation per metre, heading per metre and per radian."""

    trans_per_m: float = 0.02
    rot_per_m: float = 0.002
    rot_per_rad: float = 0.02


@dataclass(frozen=True)
class SessionSpec:
    world: WorldSpec
    seed: int = 0
    reference_seed: int | None = None
    persistence: float = 0.3
    spawn_rate: float = 0.3
    park_jitter: float = 1.0
    label_flip_prob: float = 0.1
    range_noise_sigma: float = 0.2
    odom_noise: OdometryNoise = field(default_factory=OdometryNoise)
    frame_rate: float = 10.0
    duration: float = 60.0
    beam_count: int = 720
    max_range: float = 40.0
    ground_return_fraction: float = 0.05
    ground_range: float = 6.0
    agent_label_policy: str = "moving"  # "moving" -> 252/254, "movable" -> 10/30
    label_registry: tuple[int, ...] = tuple(sorted(SEMANTIC_KITTI_LABELS))

    def __post_init__(self):
        for name in ("persistence", "spawn_rate", "label_flip_prob", "ground_return_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SimulationError(f"{name} must be a probability, got {v}")
        if self.frame_rate <= 0 or self.duration <= 0:
            raise SimulationError("frame_rate and duration must be positive")
        if self.beam_count < 1 or self.max_range <= 0:
            raise SimulationError("beam_count and max_range must be positive")
        if self.agent_label_policy not in ("moving", "movable"):
            raise SimulationError(f"unknown agent label policy {self.agent_label_policy!r}")

    @property
    def is_mapping(self) -> bool:
        return self.reference_seed is None

    @property
    def frame_count(self) -> int:
        return int(round(self.duration * self.frame_rate))

    def echo(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "world"}
        d["world_fingerprint"] = self.world.fingerprint()
        d["label_registry"] = list(self.label_registry)
        return d


@dataclass(frozen=True)
class ParkedCar:
    slot: int
    pose: Pose2


@dataclass(frozen=True)
class WorldSnapshot:
    """Everything that is fixed for one session: parked cars and agent phases."""

    parked: tuple[ParkedCar, ...]
    agent_phase: tuple[float, ...]


def _stream(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]))


# stream tags, so every random quantity has its own independent stream
_PARK, _RELOCATE, _AGENTS, _RANGE, _FLIP, _ODOM, _GROUND = range(11, 18)


def _jittered(world: WorldSpec, slot_index: int, rng, jitter: float) -> ParkedCar:
    slot = world.parking_slots[slot_index]
    along = rng.uniform(-jitter, jitter)
    c, s = math.cos(slot.heading), math.sin(slot.heading)
    return ParkedCar(slot_index, Pose2(slot.x + c * along, slot.y + s * along, slot.heading))


def reference_parking(world: WorldSpec, seed: int, jitter: float = 1.0) -> tuple[ParkedCar, ...]:
    """Parked cars of the mapping session with the given seed."""
    rng = _stream(seed, _PARK)
    cars = []
    for k, slot in enumerate(world.parking_slots):
        occupied = rng.uniform() < slot.occupancy_prob
        car = _jittered(world, k, rng, jitter)
        if occupied:
            cars.append(car)
    return tuple(cars)


def instantiate_session(spec: SessionSpec) -> WorldSnapshot:
    """Parked cars and agent phases for one session.

    A localization session starts from its mapping session's parked cars:
    each stays with probability ``persistence``, then every empty slot gains
    a car with probability ``spawn_rate``.
    """
    world = spec.world
    if spec.is_mapping:
        parked = reference_parking(world, spec.seed, spec.park_jitter)
        phase_rng = _stream(spec.seed, _AGENTS)
    else:
        base = reference_parking(world, spec.reference_seed, spec.park_jitter)
        rng = _stream(spec.reference_seed, spec.seed, _RELOCATE)
        kept = [car for car in base if rng.uniform() < spec.persistence]
        taken = {car.slot for car in kept}
        new = []
        for k in range(len(world.parking_slots)):
            fill = rng.uniform() < spec.spawn_rate
            car = _jittered(world, k, rng, spec.park_jitter)
            if k not in taken and fill:
                new.append(car)
        parked = tuple(sorted(kept + new, key=lambda c: c.slot))
        phase_rng = _stream(spec.reference_seed, spec.seed, _AGENTS)
    phases = tuple(float(phase_rng.uniform(0.0, 1.0)) for _ in world.dynamic_agents)
    return WorldSnapshot(parked, phases)


class Scene:
    """Static and per-session geometry, ready for ray casting."""

    def __init__(self, spec: SessionSpec, snapshot: WorldSnapshot):
        world = spec.world
        self.spec = spec
        self.snapshot = snapshot
        ps, qs, labels, ids = [], [], [], []
        for k, shape in enumerate(world.static_shapes):
            p, q = shape.segments()
            ps.append(p), qs.append(q)
            labels += [shape.label] * len(p)
            ids += [k] * len(p)
        length, width = world.car_size
        for car in snapshot.parked:
            p, q = polygon_segments(rect_corners(car.pose.x, car.pose.y, length, width, car.pose.psi))
            ps.append(p), qs.append(q)
            labels += [CAR_LABEL] * 4
            ids += [PARKED_ID_BASE + car.slot] * 4
        self.fixed_p = np.vstack(ps) if ps else np.empty((0, 2))
        self.fixed_q = np.vstack(qs) if qs else np.empty((0, 2))
        self.fixed_labels = np.array(labels, np.int32)
        self.fixed_ids = np.array(ids, np.int64)
        self.agent_paths = [Path(a.waypoints, a.corner_radius) for a in world.dynamic_agents]

    def agent_pose(self, k: int, t: float) -> Pose2:
        agent = self.spec.world.dynamic_agents[k]
        path = self.agent_paths[k]
        return path.pose_at(self.snapshot.agent_phase[k] * path.length + agent.speed * t)

    def agent_label(self, k: int) -> int:
        base = self.spec.world.dynamic_agents[k].base_label
        return MOVING_LABELS[base] if self.spec.agent_label_policy == "moving" else base

    def segments_at(self, t: float):
        ps, qs = [self.fixed_p], [self.fixed_q]
        labels, ids = [self.fixed_labels], [self.fixed_ids]
        for k, agent in enumerate(self.spec.world.dynamic_agents):
            pose = self.agent_pose(k, t)
            p, q = polygon_segments(rect_corners(pose.x, pose.y, *agent.size, pose.psi))
            ps.append(p), qs.append(q)
            labels.append(np.full(4, self.agent_label(k), np.int32))
            ids.append(np.full(4, AGENT_ID_BASE + k, np.int64))
        return np.vstack(ps), np.vstack(qs), np.concatenate(labels), np.concatenate(ids)


@njit(cache=True)
def _cast_rays(ox, oy, dirs, p, q, max_range, out_range, out_seg):
    for b in range(dirs.shape[0]):
        dx = dirs[b, 0]
        dy = dirs[b, 1]
        best = max_range
        kbest = -1
        for k in range(p.shape[0]):
            ex = q[k, 0] - p[k, 0]
            ey = q[k, 1] - p[k, 1]
            denom = dx * ey - dy * ex
            if abs(denom) < 1e-12:
                continue
            wx = p[k, 0] - ox
            wy = p[k, 1] - oy
            t = (wx * ey - wy * ex) / denom
            if t <= 1e-9 or t >= best:
                continue
            u = (wx * dy - wy * dx) / denom
            if u < 0.0 or u > 1.0:
                continue
            best = t
            kbest = k
        out_range[b] = best
        out_seg[b] = kbest


def cast(sensor: Pose2, bearings: np.ndarray, p: np.ndarray, q: np.ndarray, max_range: float):
    """Nearest hit per beam: (range, segment index or -1)."""
    # drop segments that cannot be reached
    d = q - p
    w = np.array([sensor.x, sensor.y]) - p
    t = np.clip(np.sum(w * d, 1) / np.maximum(np.sum(d * d, 1), 1e-12), 0.0, 1.0)
    near = np.flatnonzero(np.linalg.norm(p + t[:, None] * d - (sensor.x, sensor.y), axis=1) < max_range)
    angles = bearings + sensor.psi
    dirs = np.ascontiguousarray(np.stack([np.cos(angles), np.sin(angles)], 1))
    rng_out = np.empty(len(bearings))
    seg_out = np.empty(len(bearings), np.int64)
    _cast_rays(sensor.x, sensor.y, dirs, np.ascontiguousarray(p[near]), np.ascontiguousarray(q[near]),
               float(max_range), rng_out, seg_out)
    hit = seg_out >= 0
    seg_out[hit] = near[seg_out[hit]]
    return rng_out, seg_out


def beam_bearings(beam_count: int) -> np.ndarray:
    return -math.pi + 2.0 * math.pi * np.arange(beam_count) / beam_count


def render_scan(scene: Scene, t: float, sensor_pose: Pose2, spec: SessionSpec | None = None,
                rngs: dict | None = None) -> tuple[LabeledScan, np.ndarray]:
    """Ray-cast one scan; returns the scan and the true object id of every point."""
    spec = spec or scene.spec
    rngs = rngs or {k: _stream(spec.seed, k) for k in (_RANGE, _FLIP, _GROUND)}
    bearings = beam_bearings(spec.beam_count)
    p, q, seg_labels, seg_ids = scene.segments_at(t)
    ranges, segs = cast(sensor_pose, bearings, p, q, spec.max_range)
    hit = segs >= 0
    # index -1 (no hit) picks the appended ground entry
    labels = np.append(seg_labels, GROUND_LABEL).astype(np.int32)[segs]
    ids = np.append(seg_ids, GROUND_ID)[segs]

    ground = ~hit & (rngs[_GROUND].uniform(size=len(bearings)) < spec.ground_return_fraction)
    ranges = np.where(ground, spec.ground_range, ranges)
    keep = hit | ground
    noise = rngs[_RANGE].standard_normal(len(bearings)) * spec.range_noise_sigma
    ranges = ranges + noise

    flip = rngs[_FLIP].uniform(size=len(bearings)) < spec.label_flip_prob
    registry = np.asarray(spec.label_registry, np.int32)
    # draw among the other registry labels, so a flip always changes the label
    draw = rngs[_FLIP].integers(0, len(registry) - 1, size=len(bearings))
    pos = np.searchsorted(registry, labels)
    replacement = registry[draw + (draw >= pos)]
    labels = np.where(flip, replacement, labels)

    keep &= ranges > 0
    b, r = bearings[keep], ranges[keep]
    xy = np.stack([r * np.cos(b), r * np.sin(b)], 1)
    return LabeledScan(t, xy, labels[keep]), ids[keep]


@dataclass
class SimulationResult:
    log: SessionLog
    snapshot: WorldSnapshot
    object_ids: list[np.ndarray]
    # object id -> speed in m/s (0 for parked cars and static shapes)
    object_speed: dict[int, float]


def simulate(spec: SessionSpec) -> SimulationResult:
    world = spec.world
    path = world.route_path()
    snapshot = instantiate_session(spec)
    scene = Scene(spec, snapshot)
    stream_seed = (spec.seed,) if spec.is_mapping else (spec.reference_seed, spec.seed)
    rngs = {k: _stream(*stream_seed, k) for k in (_RANGE, _FLIP, _GROUND)}
    odo_rng = _stream(*stream_seed, _ODOM)

    n = spec.frame_count
    frames = []
    object_ids = []
    odom = None
    prev_gt = None
    on = spec.odom_noise
    for i in range(n):
        t = i / spec.frame_rate
        gt = path.pose_at(world.route.start_offset + world.route.speed * t)
        if odom is None:
            odom = gt
        else:
            inc = compose(inverse(prev_gt), gt)
            dist = math.hypot(inc.x, inc.y)
            sig_xy = on.trans_per_m * dist
            sig_psi = on.rot_per_m * dist + on.rot_per_rad * abs(inc.psi)
            e = odo_rng.standard_normal(3) * (sig_xy, sig_xy, sig_psi)
            odom = compose(odom, Pose2(inc.x + e[0], inc.y + e[1], inc.psi + e[2]))
        scan, ids = render_scan(scene, t, gt, spec, rngs)
        frames.append(Frame(t, gt, odom, scan))
        object_ids.append(ids)
        prev_gt = gt
    header = json.loads(json.dumps({"session": spec.echo()}))  # plain JSON types, as stored on disk
    speeds = {AGENT_ID_BASE + k: a.speed for k, a in enumerate(world.dynamic_agents)}
    return SimulationResult(SessionLog(frames, spec.frame_rate, header), snapshot, object_ids, speeds)


def generate(spec: SessionSpec) -> SessionLog:
    return simulate(spec).log


def mapping_spec(world: WorldSpec, seed: int, **kwargs) -> SessionSpec:
    return SessionSpec(world, seed=seed, reference_seed=None, **kwargs)


def localization_spec(world: WorldSpec, mapping_seed: int, seed: int, **kwargs) -> SessionSpec:
    return SessionSpec(world, seed=seed, reference_seed=mapping_seed, **kwargs)


def with_overrides(spec: SessionSpec, **kwargs) -> SessionSpec:
    return replace(spec, **kwargs)
