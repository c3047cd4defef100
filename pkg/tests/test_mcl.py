import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynloc.core import LabeledScan, Pose2, S, normalize_session
from dynloc.filters import METHODS, TrackState
from dynloc.mcl import (
    LocalizationConfig,
    MotionNoise,
    ParticleSet,
    estimate,
    initialize,
    localize_session,
    odometry_increments,
    predict,
    resample_if_needed,
    run_localization,
    systematic_resample,
    update_weights,
    weigh,
)
from dynloc.ndt import NdtGrid, build_map, scan_components


def particles(poses, weights=None):
    poses = np.asarray(poses, float).reshape(-1, 3)
    n = len(poses)
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, float)
    return ParticleSet(poses, w)


def test_initialize_single_particle():
    ps = initialize(Pose2(3.0, 4.0, 0.0), LocalizationConfig(particle_count=1), 0)
    assert len(ps) == 1
    assert ps.weights[0] == 1.0
    assert abs(ps.poses[0, 0] - 3.0) <= 20 and abs(ps.poses[0, 1] - 4.0) <= 20


def test_initialize_moments():
    ps = initialize(Pose2(10.0, -5.0, 1.0), LocalizationConfig(particle_count=10000), 7)
    bound = 20 / math.sqrt(3 * 10000 / 4) * 3
    assert abs(ps.poses[:, 0].mean() - 10.0) < bound
    assert abs(ps.poses[:, 1].mean() + 5.0) < bound
    assert ps.poses[:, 0].min() >= -10.0 and ps.poses[:, 0].max() <= 30.0
    assert np.all(np.abs(ps.poses[:, 2]) <= math.pi)
    # heading covers the full circle
    hist, _ = np.histogram(ps.poses[:, 2], bins=8, range=(-math.pi, math.pi))
    assert hist.min() > 1000
    np.testing.assert_allclose(ps.weights, 1e-4)


def test_initialize_deterministic():
    cfg = LocalizationConfig()
    a, b = initialize(Pose2(), cfg, 42), initialize(Pose2(), cfg, 42)
    np.testing.assert_array_equal(a.poses, b.poses)
    assert not np.array_equal(a.poses, initialize(Pose2(), cfg, 43).poses)


def test_predict_zero_increment():
    ps = particles(np.random.default_rng(0).normal(size=(50, 3)))
    ps.poses[:, 2] = np.clip(ps.poses[:, 2], -3, 3)
    out = predict(ps, Pose2(), MotionNoise(), np.random.default_rng(1))
    np.testing.assert_allclose(out.poses, ps.poses, atol=1e-15)


def test_motion_noise_variances():
    v = MotionNoise().variances(Pose2(1.0, 0.0, 0.0))
    np.testing.assert_allclose(v, [0.1, 0.05, 0.001])
    v = MotionNoise().variances(Pose2(0.0, 0.0, 0.5))
    np.testing.assert_allclose(v, [0.025, 0.025, 0.025])
    with pytest.raises(ValueError):
        MotionNoise(x=(-0.1, 0.0))


def test_predict_empirical_variance():
    ps = particles(np.zeros((100_000, 3)))
    out = predict(ps, Pose2(1.0, 0.0, 0.0), MotionNoise(), np.random.default_rng(3))
    assert out.poses[:, 0].mean() == pytest.approx(1.0, abs=0.01)
    assert out.poses[:, 0].var() == pytest.approx(0.1, rel=0.05)
    assert out.poses[:, 2].var() == pytest.approx(0.001, rel=0.05)
    np.testing.assert_array_equal(out.weights, ps.weights)


def _wall_map():
    # an L-shaped wall pair rendered densely, so both axes are constrained
    t = np.linspace(0, 30, 3000)
    pts = np.vstack([np.column_stack([t, np.full_like(t, 20.0)]), np.column_stack([np.full_like(t, 25.0), t])])
    pts = np.vstack([pts, np.column_stack([t, np.full_like(t, 5.0)])])
    grid = NdtGrid(extent=(40.0, 40.0)).insert_points(pts)
    return grid, pts


def test_update_weights_prefers_true_pose(partition):
    grid, pts = _wall_map()
    true = Pose2(12.0, 12.0, 0.3)
    sensor_xy = (pts - true.translation) @ true.rotation()
    sensor_xy = sensor_xy[np.linalg.norm(sensor_xy, axis=1) < 20]
    scan = LabeledScan(0.0, sensor_xy, np.full(len(sensor_xy), 50))
    ps = particles([true.as_array(), [17.0, 12.0, 0.3]])
    out, _, exhausted = update_weights(ps, grid, scan, "baseline", TrackState(), partition, LocalizationConfig())
    assert not exhausted
    assert out.weights[0] > out.weights[1]
    assert out.weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_update_weights_empty_scan_exhausts(partition):
    grid, _ = _wall_map()
    ps = particles([[1, 1, 0], [2, 2, 0], [3, 3, 0]], [0.7, 0.2, 0.1])
    empty = LabeledScan(0.0, np.empty((0, 2)), np.empty(0, np.int32))
    out, _, exhausted = update_weights(ps, grid, empty, "static", TrackState(), partition, LocalizationConfig())
    assert exhausted
    np.testing.assert_allclose(out.weights, 1 / 3)


def test_baseline_scores_untouched_scan(partition):
    grid, pts = _wall_map()
    xy = pts[::7] - (12.0, 12.0)
    labels = np.where(np.arange(len(xy)) % 3 == 0, 10, 50)
    scan = LabeledScan(0.0, xy, labels)
    ps = particles([[12.0, 12.0, 0.0], [12.5, 11.0, 0.1]])
    cfg = LocalizationConfig()
    out, _, _ = update_weights(ps, grid, scan, METHODS["baseline"], TrackState(), partition, cfg)
    means, covs, _ = scan_components(xy)
    direct, _ = weigh(ps, grid, means, covs, cfg)
    np.testing.assert_array_equal(out.weights, direct.weights)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_weighting_normalized_and_order_invariant(seed):
    rng = np.random.default_rng(seed)
    grid, pts = _wall_map()
    means, covs, _ = scan_components(pts[::5] - (12.0, 12.0))
    poses = np.column_stack([rng.uniform(8, 16, 60), rng.uniform(8, 16, 60), rng.uniform(-0.5, 0.5, 60)])
    w = rng.dirichlet(np.ones(60))
    cfg = LocalizationConfig(reset_on_exhaustion=False)
    out, _ = weigh(particles(poses, w), grid, means, covs, cfg)
    assert out.weights.sum() == pytest.approx(1.0, abs=1e-9)
    assert out.ess > 0
    perm = rng.permutation(60)
    shuffled, _ = weigh(particles(poses[perm], w[perm]), grid, means, covs, cfg)
    np.testing.assert_allclose(shuffled.weights, out.weights[perm], rtol=1e-12)


def test_resample_uniform_is_noop():
    ps = particles(np.arange(30).reshape(10, 3))
    assert resample_if_needed(ps, LocalizationConfig(), np.random.default_rng(0)) is ps


def test_resample_degenerate():
    w = np.zeros(10)
    w[4] = 1.0
    ps = particles(np.arange(30).reshape(10, 3), w)
    out = resample_if_needed(ps, LocalizationConfig(), np.random.default_rng(0))
    assert np.all(out.poses == ps.poses[4])
    np.testing.assert_allclose(out.weights, 0.1)


@pytest.mark.parametrize("offset", [0.0, 0.3, 0.5, 0.999])
def test_systematic_resample_hand_trace(offset):
    ps = particles([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], [0.5, 0.5, 0.0, 0.0])
    out = systematic_resample(ps, None, offset)
    # positions (offset + k) / 4 land twice in each half of the cumulative sum
    assert out.poses[:, 0].tolist() == [0, 0, 1, 1]


def test_resampling_is_unbiased():
    rng = np.random.default_rng(5)
    poses = np.column_stack([rng.normal(0, 3, 200), np.zeros(200), np.zeros(200)])
    w = rng.dirichlet(np.full(200, 0.5))
    target = float(w @ poses[:, 0])
    means = [systematic_resample(particles(poses, w), np.random.default_rng(s)).poses[:, 0].mean()
             for s in range(100)]
    se = np.std(means, ddof=1) / math.sqrt(len(means))
    assert abs(np.mean(means) - target) < 3 * se + 1e-12


def test_estimate_examples():
    same = particles([[1.0, 2.0, 0.5]] * 4)
    assert estimate(same) == Pose2(1.0, 2.0, 0.5)
    wrap = particles([[0, 0, 3.0], [0, 0, -3.0]])
    assert abs(estimate(wrap).psi) == pytest.approx(math.pi)
    first = particles([[1.0, 1.0, 0.2], [5.0, 5.0, -1.0]], [1.0, 0.0])
    assert estimate(first) == Pose2(1.0, 1.0, 0.2)


def test_odometry_increments_recompose(short_localization):
    log = normalize_session(short_localization.log)
    inc = odometry_increments(log)
    pose = Pose2()
    for frame, d in zip(log, inc):
        pose = pose @ d
        assert pose.x == pytest.approx(frame.odometry.x, abs=1e-9)
        assert pose.y == pytest.approx(frame.odometry.y, abs=1e-9)


def test_localize_deterministic(short_mapping, short_localization, partition):
    grid = build_map(normalize_session(short_mapping.log), partition, {S})
    log = normalize_session(short_localization.log)
    cfg = LocalizationConfig(particle_count=100)
    a = localize_session(log, grid, "combined", cfg, 9, partition=partition)
    b = localize_session(log, grid, "combined", cfg, 9, partition=partition)
    assert a == b
    np.testing.assert_array_equal(a.timestamps, log.timestamps)


def test_localize_empty_log_rejected(partition):
    from dynloc.core import EmptySessionError, SessionLog

    with pytest.raises(EmptySessionError):
        run_localization(SessionLog([], 10.0, {}), NdtGrid(), "baseline", LocalizationConfig(), 0)


def test_config_validation():
    with pytest.raises(ValueError):
        LocalizationConfig(particle_count=0)
    with pytest.raises(ValueError):
        LocalizationConfig(resample_threshold=1.5)


def test_perfect_odometry_static_world_converges(partition):
    # acquisition from the wide initial box is stochastic, so the example is
    # checked on the median end-of-run position error over several filter seeds
    from dynloc.core import ALL_CLASSES
    from dynloc.sim import OdometryNoise, default_world, localization_spec, mapping_spec, simulate

    world = default_world(0, n_slots=0, n_agents=0)
    quiet = dict(range_noise_sigma=0.0, label_flip_prob=0.0, odom_noise=OdometryNoise(0.0, 0.0, 0.0))
    grid = build_map(simulate(mapping_spec(world, 1, **quiet)).log, partition, ALL_CLASSES)
    log = normalize_session(simulate(localization_spec(world, 1, 2, **quiet)).log)
    gt = log.ground_truth_trajectory()
    cfg = LocalizationConfig(particle_count=2000)
    final = []
    for seed in range(9):
        run = run_localization(log, grid, "baseline", cfg, seed, partition=partition)
        final.append(float(np.hypot(*(run.trajectory.xy[-1] - gt.xy[-1]))))
    assert np.median(final) <= grid.resolution
