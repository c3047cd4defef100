"""Geometry, scan and dynamic-class vocabulary shared by the whole package."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(angle: float) -> float:
    """Map an angle to (-pi, pi]."""
    a = math.remainder(angle, TWO_PI)
    if a <= -math.pi:
        a += TWO_PI
    return a


def wrap_angles(angles: np.ndarray) -> np.ndarray:
    """Vectorised :func:`wrap_angle`."""
    a = np.asarray(angles, dtype=float)
    # same rounding as math.remainder, so in-range values pass through unchanged
    a = a - TWO_PI * np.round(a / TWO_PI)
    return np.where(a <= -math.pi, a + TWO_PI, a)


@dataclass(frozen=True)
class Pose2:
    """SE(2) pose. ``psi`` is kept in (-pi, pi]."""

    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "psi", wrap_angle(float(self.psi)))

    def __matmul__(self, other: Pose2) -> Pose2:
        return compose(self, other)

    def __iter__(self):
        return iter((self.x, self.y, self.psi))

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi])

    @classmethod
    def from_array(cls, a: Sequence[float]) -> Pose2:
        return cls(a[0], a[1], a[2])

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.psi), math.sin(self.psi)
        return np.array([[c, -s], [s, c]])

    def matrix(self) -> np.ndarray:
        m = np.eye(3)
        m[:2, :2] = self.rotation()
        m[:2, 2] = (self.x, self.y)
        return m

    def transform_points(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 2) points from this pose's frame into the parent frame."""
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        return points @ self.rotation().T + (self.x, self.y)


IDENTITY = Pose2()


def compose(a: Pose2, b: Pose2) -> Pose2:
    c, s = math.cos(a.psi), math.sin(a.psi)
    return Pose2(a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, a.psi + b.psi)


def inverse(a: Pose2) -> Pose2:
    c, s = math.cos(a.psi), math.sin(a.psi)
    return Pose2(-c * a.x - s * a.y, s * a.x - c * a.y, -a.psi)


def relative(a: Pose2, b: Pose2) -> Pose2:
    """Pose of ``b`` expressed in the frame of ``a``."""
    return compose(inverse(a), b)


def compose_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Compose (N, 3) pose arrays row-wise (broadcasting allowed)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    out = np.empty(np.broadcast(a, b).shape)
    out[..., 0] = a[..., 0] + c * b[..., 0] - s * b[..., 1]
    out[..., 1] = a[..., 1] + s * b[..., 0] + c * b[..., 1]
    out[..., 2] = wrap_angles(a[..., 2] + b[..., 2])
    return out


# Semantic KITTI label ids, so "labels 40-99 are static" is expressible directly.
SEMANTIC_KITTI_LABELS: dict[int, str] = {
    0: "unlabeled",
    1: "outlier",
    10: "car",
    11: "bicycle",
    13: "bus",
    15: "motorcycle",
    16: "on-rails",
    18: "truck",
    20: "other-vehicle",
    30: "person",
    31: "bicyclist",
    32: "motorcyclist",
    40: "road",
    44: "parking",
    48: "sidewalk",
    49: "other-ground",
    50: "building",
    51: "fence",
    52: "other-structure",
    60: "lane-marking",
    70: "vegetation",
    71: "trunk",
    72: "terrain",
    80: "pole",
    81: "traffic-sign",
    99: "other-object",
    252: "moving-car",
    253: "moving-bicyclist",
    254: "moving-person",
    255: "moving-motorcyclist",
    256: "moving-on-rails",
    257: "moving-bus",
    258: "moving-truck",
    259: "moving-other-vehicle",
}


class DynamicClass(enum.Enum):
    STATIC = "S"
    SEMI_STATIC = "E"
    DYNAMIC = "D"

    @classmethod
    def parse(cls, token: str | DynamicClass) -> DynamicClass:
        if isinstance(token, DynamicClass):
            return token
        t = str(token).strip().upper().replace("-", "_")
        for member in cls:
            if t in (member.value, member.name, member.name.replace("_", "")):
                return member
        raise ValueError(f"unknown dynamic class {token!r}")


S, E, D = DynamicClass.STATIC, DynamicClass.SEMI_STATIC, DynamicClass.DYNAMIC
ALL_CLASSES = frozenset(DynamicClass)

# integer codes used in vectorised lookups
CLASS_CODE = {S: 0, E: 1, D: 2}


def parse_classes(tokens: Iterable[str | DynamicClass]) -> frozenset[DynamicClass]:
    return frozenset(DynamicClass.parse(t) for t in tokens)


class LabelPartitionError(ValueError):
    pass


@dataclass(frozen=True)
class LabelPartition:
    """Split of the label registry into static / semi-static / dynamic sets.

    ``ground_labels`` is the subset treated as ground by the dynamic filter's
    ground removal stage.
    """

    static_labels: frozenset[int]
    semi_static_labels: frozenset[int]
    dynamic_labels: frozenset[int]
    ground_labels: frozenset[int] = frozenset({40, 44, 48, 49})
    registry: tuple[int, ...] = field(default=tuple(sorted(SEMANTIC_KITTI_LABELS)))

    def __post_init__(self):
        for name in ("static_labels", "semi_static_labels", "dynamic_labels", "ground_labels"):
            object.__setattr__(self, name, frozenset(int(v) for v in getattr(self, name)))
        object.__setattr__(self, "registry", tuple(sorted(int(v) for v in self.registry)))
        s, e, d = self.static_labels, self.semi_static_labels, self.dynamic_labels
        if s & e or s & d or e & d:
            raise LabelPartitionError("label sets overlap")
        missing = set(self.registry) - (s | e | d)
        if missing:
            raise LabelPartitionError(f"registry labels without a class: {sorted(missing)}")
        if any(v < 0 for v in self.registry):
            raise LabelPartitionError("labels must be non-negative")
        # dense lookup: label id -> class code, -1 for ids outside the partition
        table = np.full(max(s | e | d | set(self.registry)) + 1, -1, dtype=np.int8)
        for labels, code in ((s, 0), (e, 1), (d, 2)):
            table[sorted(labels)] = code
        table.flags.writeable = False
        object.__setattr__(self, "_table", table)

    @classmethod
    def semantic_kitti(cls) -> LabelPartition:
        """Default partition: 40-99 static, movable objects semi-static, moving-* dynamic.

        ``unlabeled`` and ``outlier`` are treated as semi-static, i.e. neither
        trusted as permanent structure nor assumed to be moving.
        """
        registry = sorted(SEMANTIC_KITTI_LABELS)
        static = {v for v in registry if 40 <= v <= 99}
        dynamic = {v for v in registry if v >= 250}
        semi = set(registry) - static - dynamic
        return cls(frozenset(static), frozenset(semi), frozenset(dynamic), registry=tuple(registry))

    def class_of(self, label: int) -> DynamicClass:
        code = self.codes(np.array([label]))[0]
        if code < 0:
            raise KeyError(f"label {label} is not in the partition")
        return (S, E, D)[code]

    def codes(self, labels: np.ndarray) -> np.ndarray:
        """Class codes (0=S, 1=E, 2=D, -1=unknown) for an array of labels."""
        labels = np.asarray(labels, dtype=np.int64)
        out = np.full(labels.shape, -1, dtype=np.int8)
        ok = (labels >= 0) & (labels < len(self._table))
        out[ok] = self._table[labels[ok]]
        return out

    def mask(self, labels: np.ndarray, keep: Iterable[DynamicClass]) -> np.ndarray:
        wanted = [CLASS_CODE[c] for c in keep]
        return np.isin(self.codes(labels), wanted)

    def is_movable(self, label: int) -> bool:
        return label in self.semi_static_labels or label in self.dynamic_labels


class LabeledPoint(NamedTuple):
    x: float
    y: float
    label: int


class LabeledScan:
    """Timestamped 2D point set with one semantic label per point.

    Points are held as an (N, 2) float array and an (N,) int array; both are
    read-only so scans can be shared freely.
    """

    __slots__ = ("timestamp", "xy", "labels")

    def __init__(self, timestamp: float, xy, labels):
        xy = np.array(xy, dtype=np.float64).reshape(-1, 2)
        labels = np.array(labels, dtype=np.int32).reshape(-1)
        if len(xy) != len(labels):
            raise ValueError("xy and labels differ in length")
        xy.flags.writeable = False
        labels.flags.writeable = False
        self.timestamp = float(timestamp)
        self.xy = xy
        self.labels = labels

    @classmethod
    def from_points(cls, timestamp: float, points: Iterable[LabeledPoint | tuple]) -> LabeledScan:
        pts = list(points)
        xy = [(p[0], p[1]) for p in pts]
        return cls(timestamp, xy, [int(p[2]) for p in pts])

    def __len__(self):
        return len(self.labels)

    def __iter__(self) -> Iterator[LabeledPoint]:
        for (x, y), label in zip(self.xy.tolist(), self.labels.tolist()):
            yield LabeledPoint(x, y, label)

    def __eq__(self, other):
        if not isinstance(other, LabeledScan):
            return NotImplemented
        return (
            self.timestamp == other.timestamp
            and np.array_equal(self.xy, other.xy)
            and np.array_equal(self.labels, other.labels)
        )

    def __repr__(self):
        return f"LabeledScan(t={self.timestamp:.3f}, n={len(self)})"

    def subset(self, mask_or_index) -> LabeledScan:
        return LabeledScan(self.timestamp, self.xy[mask_or_index], self.labels[mask_or_index])


class Trajectory:
    """Timestamped sequence of poses, stored as arrays."""

    def __init__(self, timestamps, poses):
        t = np.array(timestamps, dtype=np.float64).reshape(-1)
        p = np.array([tuple(q) for q in poses] if not isinstance(poses, np.ndarray) else poses,
                     dtype=np.float64).reshape(-1, 3)
        if len(t) != len(p):
            raise ValueError("timestamps and poses differ in length")
        if len(t) > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        p[:, 2] = wrap_angles(p[:, 2])
        self.timestamps = t
        self.poses = p

    def __len__(self):
        return len(self.timestamps)

    def __getitem__(self, i) -> tuple[float, Pose2]:
        return float(self.timestamps[i]), Pose2.from_array(self.poses[i])

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return np.array_equal(self.timestamps, other.timestamps) and np.array_equal(self.poses, other.poses)

    @property
    def xy(self) -> np.ndarray:
        return self.poses[:, :2]

    def pose_list(self) -> list[Pose2]:
        return [Pose2.from_array(p) for p in self.poses]


@dataclass(frozen=True)
class Frame:
    timestamp: float
    ground_truth: Pose2
    odometry: Pose2
    scan: LabeledScan


class EmptySessionError(ValueError):
    """Raised when a session log has no frames and cannot be used."""


@dataclass
class SessionLog:
    """Aligned (timestamp, ground truth, odometry, scan) records of one traversal."""

    frames: list[Frame]
    frame_rate: float = 10.0
    header: dict = field(default_factory=dict)

    def __post_init__(self):
        ts = [f.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("session timestamps must be strictly increasing")

    def __len__(self):
        return len(self.frames)

    def __iter__(self) -> Iterator[Frame]:
        return iter(self.frames)

    def __getitem__(self, i) -> Frame:
        return self.frames[i]

    def __eq__(self, other):
        if not isinstance(other, SessionLog):
            return NotImplemented
        return (
            self.frame_rate == other.frame_rate
            and self.header == other.header
            and self.frames == other.frames
        )

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames])

    def ground_truth_trajectory(self) -> Trajectory:
        return Trajectory(self.timestamps, [tuple(f.ground_truth) for f in self.frames])

    def odometry_trajectory(self) -> Trajectory:
        return Trajectory(self.timestamps, [tuple(f.odometry) for f in self.frames])


def normalize_session(log: SessionLog) -> SessionLog:
    """Re-express odometry so that the first odometry pose is the identity."""
    if len(log) == 0:
        raise EmptySessionError("session log is empty")
    t0_inv = inverse(log.frames[0].odometry)
    frames = [
        Frame(f.timestamp, f.ground_truth, compose(t0_inv, f.odometry), f.scan) for f in log.frames
    ]
    return SessionLog(frames, log.frame_rate, dict(log.header))
