"""Monte Carlo localization against an NDT map with the L2 measurement model."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .core import (
    EmptySessionError,
    LabeledScan,
    LabelPartition,
    Pose2,
    SessionLog,
    Trajectory,
    compose,
    compose_arrays,
    inverse,
    normalize_session,
    wrap_angles,
)
from .filters import FilterConfig, MethodSpec, TrackState, get_method, select
from .ndt import NdtGrid, ScoringIndex, scan_components, score_poses

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MotionNoise:
    """Per-axis (variance per metre travelled, variance per radian turned)."""

    x: tuple[float, float] = (0.1, 0.05)
    y: tuple[float, float] = (0.05, 0.05)
    psi: tuple[float, float] = (0.001, 0.05)

    def __post_init__(self):
        for axis in (self.x, self.y, self.psi):
            if min(axis) < 0:
                raise ValueError("motion noise variances must be non-negative")

    def variances(self, increment: Pose2) -> np.ndarray:
        dt = math.hypot(increment.x, increment.y)
        dpsi = abs(increment.psi)
        return np.array([a[0] * dt + a[1] * dpsi for a in (self.x, self.y, self.psi)])


@dataclass(frozen=True)
class LocalizationConfig:
    particle_count: int = 500
    init_half_width: float = 20.0
    resample_threshold: float = 0.5
    scan_ndt_resolution: float = 0.6
    min_points: int = 3
    eigen_floor: float = 1e-3
    d1: float = 1.0
    d2: float = 0.05
    weight_floor: float = 1e-6
    reset_on_exhaustion: bool = True
    motion_noise: MotionNoise = field(default_factory=MotionNoise)

    def __post_init__(self):
        if self.particle_count < 1:
            raise ValueError("particle_count must be at least 1")
        if not 0.0 <= self.resample_threshold <= 1.0:
            raise ValueError("resample_threshold must be in [0, 1]")


@dataclass
class ParticleSet:
    poses: np.ndarray  # (N, 3)
    weights: np.ndarray  # (N,)

    def __len__(self):
        return len(self.weights)

    def copy(self) -> ParticleSet:
        return ParticleSet(self.poses.copy(), self.weights.copy())

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def initialize(x0: Pose2, config: LocalizationConfig, rng_seed) -> ParticleSet:
    """Uniform particles in x0 +- half-width (x, y) with heading over the full circle.

    Draws come from a scrambled Sobol sequence: each particle is still
    uniform on the box, but the set covers it without large gaps.
    """
    rng = _rng(rng_seed)
    n = config.particle_count
    h = config.init_half_width
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # balance warning for n not a power of two
        u = qmc.Sobol(3, scramble=True, seed=rng).random(n)
    poses = np.empty((n, 3))
    poses[:, 0] = x0.x + h * (2.0 * u[:, 0] - 1.0)
    poses[:, 1] = x0.y + h * (2.0 * u[:, 1] - 1.0)
    poses[:, 2] = wrap_angles(2.0 * math.pi * u[:, 2])
    return ParticleSet(poses, np.full(n, 1.0 / n))


def predict(particles: ParticleSet, odom_increment: Pose2, noise: MotionNoise, rng) -> ParticleSet:
    """Compose every particle with an independently perturbed odometry increment."""
    rng = _rng(rng)
    n = len(particles)
    std = np.sqrt(noise.variances(odom_increment))
    inc = np.tile(odom_increment.as_array(), (n, 1))
    if np.any(std > 0):
        inc += rng.standard_normal((n, 3)) * std
    return ParticleSet(compose_arrays(particles.poses, inc), particles.weights.copy())


def measurement_components(scan: LabeledScan, config: LocalizationConfig):
    return scan_components(scan.xy, config.scan_ndt_resolution, config.min_points, config.eigen_floor)


def weigh(particles: ParticleSet, index: ScoringIndex | NdtGrid, means: np.ndarray, covs: np.ndarray,
          config: LocalizationConfig) -> tuple[ParticleSet, bool]:
    """Multiply weights by the floored L2 scores and renormalize.

    Returns the new set and whether every score sat at the floor; in that
    case (when enabled) the weights are reset to uniform.
    """
    scores = score_poses(index, means, covs, particles.poses, config.d1, config.d2)
    floored = np.maximum(scores, config.weight_floor)
    exhausted = bool(np.all(scores <= config.weight_floor))
    if exhausted and config.reset_on_exhaustion:
        n = len(particles)
        return ParticleSet(particles.poses.copy(), np.full(n, 1.0 / n)), True
    w = particles.weights * floored
    total = w.sum()
    if not total > 0:
        w = np.full(len(w), 1.0 / len(w))
    else:
        w = w / total
    return ParticleSet(particles.poses.copy(), w), exhausted


def update_weights(particles: ParticleSet, grid: NdtGrid, scan: LabeledScan, method: MethodSpec | str,
                   track_state: TrackState, partition: LabelPartition, config: LocalizationConfig,
                   sensor_pose: Pose2 | None = None, filter_config: FilterConfig | None = None):
    """Filter the scan per ``method``, rasterize it once and reweight all particles.

    ``sensor_pose`` positions cluster centroids for the dynamic filter's
    tracking; it defaults to the current estimate. Returns
    ``(particles, track_state, exhausted)``.
    """
    method = get_method(method) if isinstance(method, str) else method
    if sensor_pose is None:
        sensor_pose = estimate(particles)
    filtered, track_state = select(scan, sensor_pose, track_state, partition, method, filter_config)
    means, covs, _ = measurement_components(filtered, config)
    new, exhausted = weigh(particles, grid, means, covs, config)
    if exhausted:
        log.debug("particle weights exhausted at t=%.3f", scan.timestamp)
    return new, track_state, exhausted


def systematic_resample(particles: ParticleSet, rng, offset: float | None = None) -> ParticleSet:
    """Low-variance resampling with one uniform ``offset`` in [0, 1) (drawn from ``rng`` if omitted)."""
    n = len(particles)
    if offset is None:
        offset = _rng(rng).uniform(0.0, 1.0)
    cumulative = np.cumsum(particles.weights)
    cumulative[-1] = 1.0
    positions = (offset + np.arange(n)) / n
    idx = np.searchsorted(cumulative, positions, side="right")
    idx = np.minimum(idx, n - 1)
    return ParticleSet(particles.poses[idx].copy(), np.full(n, 1.0 / n))


def resample_if_needed(particles: ParticleSet, config: LocalizationConfig, rng) -> ParticleSet:
    """Systematic resampling once the effective sample size drops below threshold * N.

    The offset is drawn on every call so the stream stays aligned between
    runs that resample at different frames (common random numbers).
    """
    offset = _rng(rng).uniform(0.0, 1.0)
    if particles.ess < config.resample_threshold * len(particles):
        return systematic_resample(particles, None, offset)
    return particles


def estimate(particles: ParticleSet) -> Pose2:
    w = particles.weights
    p = particles.poses
    x = float(np.dot(w, p[:, 0]))
    y = float(np.dot(w, p[:, 1]))
    psi = math.atan2(float(np.dot(w, np.sin(p[:, 2]))), float(np.dot(w, np.cos(p[:, 2]))))
    return Pose2(x, y, psi)


def odometry_increments(log: SessionLog) -> list[Pose2]:
    """inverse(T_{i-1}) * T_i over a normalized session; the first entry is the identity."""
    odo = [f.odometry for f in log]
    return [Pose2()] + [compose(inverse(a), b) for a, b in zip(odo, odo[1:])]


def prepare_measurements(log: SessionLog, method: MethodSpec | str, partition: LabelPartition,
                         config: LocalizationConfig, filter_config: FilterConfig | None = None):
    """Filter and rasterize every scan of a normalized session once.

    The dynamic filter tracks centroids in the odometry frame, so the result
    does not depend on the map or on the particle filter and can be shared
    between runs.
    """
    method = get_method(method) if isinstance(method, str) else method
    state = TrackState()
    out = []
    for frame in log:
        scan, state = select(frame.scan, frame.odometry, state, partition, method, filter_config)
        means, covs, _ = measurement_components(scan, config)
        out.append((means, covs))
    return out


@dataclass
class LocalizationRun:
    trajectory: Trajectory
    exhaustion_events: int
    resample_count: int


def run_localization(log: SessionLog, grid: NdtGrid, method: MethodSpec | str, config: LocalizationConfig,
                     seed, partition: LabelPartition | None = None, filter_config: FilterConfig | None = None,
                     measurements=None) -> LocalizationRun:
    """predict -> update -> resample -> estimate over every frame of a session."""
    if len(log) == 0:
        raise EmptySessionError("cannot localize an empty session")
    log = normalize_session(log)
    method = get_method(method) if isinstance(method, str) else method
    partition = partition or LabelPartition.semantic_kitti()
    if measurements is None:
        measurements = prepare_measurements(log, method, partition, config, filter_config)
    if len(measurements) != len(log):
        raise ValueError("measurement list does not match the session length")

    init_seq, predict_seq, resample_seq = np.random.SeedSequence(seed).spawn(3)
    predict_rng = np.random.default_rng(predict_seq)
    resample_rng = np.random.default_rng(resample_seq)
    index = grid.scoring_index()

    particles = initialize(log[0].ground_truth, config, np.random.default_rng(init_seq))
    increments = odometry_increments(log)
    poses = np.empty((len(log), 3))
    exhausted_total = 0
    resamples = 0
    for k, (frame, inc, (means, covs)) in enumerate(zip(log, increments, measurements)):
        if k > 0:
            particles = predict(particles, inc, config.motion_noise, predict_rng)
        particles, exhausted = weigh(particles, index, means, covs, config)
        exhausted_total += exhausted
        resampled = resample_if_needed(particles, config, resample_rng)
        resamples += resampled is not particles
        particles = resampled
        poses[k] = estimate(particles).as_array()
    return LocalizationRun(Trajectory(log.timestamps, poses), exhausted_total, resamples)


def localize_session(log: SessionLog, grid: NdtGrid, method: MethodSpec | str, config: LocalizationConfig,
                     seed, **kwargs) -> Trajectory:
    return run_localization(log, grid, method, config, seed, **kwargs).trajectory
