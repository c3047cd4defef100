import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynloc.core import ALL_CLASSES, Frame, LabeledScan, Pose2, S, SessionLog, EmptySessionError
from dynloc.ndt import (
    GaussianComponent,
    MapConfig,
    NdtGrid,
    build_map,
    l2_score,
    logit,
    rasterize_scan,
    regularize,
    scan_components,
    score_poses,
)


def test_single_point_cell_has_no_covariance():
    grid = NdtGrid(extent=(10.0, 10.0)).insert_points([(0.1, 0.1)])
    cell = grid.cells[(0, 0)]
    assert cell.count == 1
    np.testing.assert_allclose(cell.mean, [0.1, 0.1])
    assert cell.covariance() is None
    assert not cell.is_valid()


def test_three_point_cell_statistics():
    grid = NdtGrid(resolution=2.0, origin=(-0.5, -0.5), extent=(10.0, 10.0))
    grid.insert_points([(0, 0), (1, 0), (0, 1)])
    cell = grid.cells[(0, 0)]
    np.testing.assert_allclose(cell.mean, [1 / 3, 1 / 3], atol=1e-12)
    np.testing.assert_allclose(cell.covariance(), [[1 / 3, -1 / 6], [-1 / 6, 1 / 3]], atol=1e-12)


def test_two_batches_equal_one(rng):
    pts = rng.uniform(0, 3, size=(100, 2))
    a = NdtGrid(extent=(10.0, 10.0)).insert_points(pts[:50]).insert_points(pts[50:])
    b = NdtGrid(extent=(10.0, 10.0)).insert_points(pts)
    assert a.cells.keys() == b.cells.keys()
    for key, cell in a.cells.items():
        other = b.cells[key]
        assert cell.count == other.count
        np.testing.assert_allclose(cell.sum, other.sum, atol=1e-9)
        np.testing.assert_allclose(cell.outer_sum, other.outer_sum, atol=1e-9)


def test_out_of_extent_points_dropped():
    grid = NdtGrid(extent=(6.0, 6.0)).insert_points([(1.0, 1.0), (-1.0, 1.0), (7.0, 1.0)])
    assert grid.dropped_points == 2
    assert all(grid.in_extent(np.array(k)) for k in grid.cells)


@settings(max_examples=50, deadline=None)
@given(arrays(float, st.tuples(st.integers(3, 40), st.just(2)), elements=st.floats(0.01, 0.59)),
       st.randoms(use_true_random=False))
def test_incremental_equals_batch_any_order(points, rnd):
    order = list(range(len(points)))
    rnd.shuffle(order)
    grid = NdtGrid(extent=(6.0, 6.0))
    for k in order:
        grid.insert_points(points[k:k + 1])
    cell = grid.cells[(0, 0)]
    np.testing.assert_allclose(cell.mean, points.mean(0), atol=1e-9)
    np.testing.assert_allclose(cell.covariance(), np.cov(points.T, ddof=1), atol=1e-9)


def test_ray_traversal_hand_example():
    grid = NdtGrid(resolution=1.0, extent=(10.0, 10.0))
    grid.update_occupancy((0.5, 0.5), [(3.5, 0.5)])
    cfg = grid.config
    for i in range(3):
        assert grid.log_odds[i, 0] == pytest.approx(cfg.l_miss)
    assert grid.log_odds[3, 0] == pytest.approx(cfg.l_hit)
    assert np.count_nonzero(grid.log_odds) == 4


def test_diagonal_ray_touches_each_crossed_cell():
    grid = NdtGrid(resolution=1.0, extent=(10.0, 10.0))
    grid.update_occupancy((0.5, 0.2), [(3.5, 2.9)])
    touched = {tuple(k) for k in np.argwhere(grid.log_odds != 0)}
    # brute force: sample the open segment densely
    s = np.linspace(0, 1, 100001)[:-1]
    pts = np.array([0.5, 0.2]) + s[:, None] * np.array([3.0, 2.7])
    cells = {tuple(c) for c in np.floor(pts).astype(int)} - {(3, 2)}
    assert touched == cells | {(3, 2)}
    assert grid.log_odds[3, 2] > 0
    assert all(grid.log_odds[c] < 0 for c in cells)


def test_empty_endpoints_no_change():
    grid = NdtGrid(extent=(10.0, 10.0))
    grid.update_occupancy((1.0, 1.0), np.empty((0, 2)))
    assert len(grid) == 0


def test_single_hit_log_odds():
    grid = NdtGrid(resolution=1.0, extent=(10.0, 10.0))
    grid.update_occupancy((0.5, 0.5), [(0.6, 0.6)])
    assert grid.log_odds[0, 0] == pytest.approx(math.log(0.7 / 0.3))
    assert grid.log_odds[0, 0] == pytest.approx(0.847, abs=1e-3)


def test_sensor_outside_extent_rejected():
    with pytest.raises(ValueError):
        NdtGrid(extent=(10.0, 10.0)).update_occupancy((-1.0, 0.0), [(1.0, 1.0)])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0.1, 9.9), st.floats(0.1, 9.9)), min_size=1, max_size=30))
def test_log_odds_stays_clamped(ends):
    grid = NdtGrid(resolution=0.5, extent=(10.0, 10.0))
    for _ in range(10):
        grid.update_occupancy((5.0, 5.0), ends)
    cfg = grid.config
    assert grid.log_odds.min() >= cfg.l_min
    assert grid.log_odds.max() <= cfg.l_max


def test_observed_free_cell_drops_out():
    grid = NdtGrid(resolution=1.0, extent=(20.0, 20.0))
    grid.insert_points([(5.2, 5.5), (5.5, 5.3), (5.8, 5.6)])
    grid.update_occupancy((0.5, 5.5), [(5.5, 5.5)])
    assert grid.queryable_mask()[5, 5]
    for _ in range(50):
        grid.update_occupancy((0.5, 5.5), [(10.5, 5.5)])
    # the Gaussian statistics stay, the occupancy gate removes it
    assert grid.count[5, 5] == 3
    assert grid.log_odds[5, 5] == pytest.approx(grid.config.l_min)
    assert not grid.queryable_mask()[5, 5]


def test_regularize_floor():
    cov = np.array([[[4.0, 0.0], [0.0, 0.0]]])
    vals = np.linalg.eigvalsh(regularize(cov, 1e-3)[0])
    assert vals[0] == pytest.approx(4e-3)
    assert vals[1] == pytest.approx(4.0)


def test_rasterize_empty():
    assert rasterize_scan(np.empty((0, 2))) == []


def test_rasterize_collinear_points():
    pts = np.stack([np.linspace(0.05, 0.5, 10), np.full(10, 0.3)], 1)
    (comp,) = rasterize_scan(pts, 0.6)
    vals = np.linalg.eigvalsh(comp.cov)
    assert vals[0] == pytest.approx(1e-3 * vals[1], rel=1e-9)
    assert comp.weight == 10


def test_rasterize_two_blobs(rng):
    a = rng.uniform(0.05, 0.55, size=(20, 2))
    b = rng.uniform(0.05, 0.55, size=(20, 2)) + (6.0, -3.0)
    comps = rasterize_scan(np.vstack([a, b]), 0.6)
    assert len(comps) == 2
    means = sorted((tuple(c.mean) for c in comps))
    np.testing.assert_allclose(means[0], a.mean(0), atol=1e-6)
    np.testing.assert_allclose(means[1], b.mean(0), atol=1e-6)


def _isotropic_cell(grid, centre, var):
    # four points on the axes give an unbiased covariance of 2a^2/3 on each axis
    a = math.sqrt(1.5 * var)
    cx, cy = centre
    grid.insert_points([(cx - a, cy), (cx + a, cy), (cx, cy - a), (cx, cy + a)])
    return grid


def test_score_zero_offset_is_d1():
    grid = _isotropic_cell(NdtGrid(extent=(12.0, 12.0)), (3.3, 3.3), 0.02)
    comp = GaussianComponent(np.array([3.3, 3.3]), 0.18 * np.eye(2), 4)
    assert l2_score(grid, [comp], Pose2()) == pytest.approx(1.0)


def test_score_formula_example():
    grid = _isotropic_cell(NdtGrid(extent=(12.0, 12.0)), (3.3, 3.3), 0.02)
    comp = GaussianComponent(np.array([3.9, 3.3]), 0.18 * np.eye(2), 4)
    expected = 1.0 * math.exp(-0.05 / 2 * (0.6**2 / 0.2))
    assert l2_score(grid, [comp], Pose2(), d1=1.0, d2=0.05) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.9560, abs=1e-4)


def test_score_far_component_is_zero():
    grid = _isotropic_cell(NdtGrid(extent=(30.0, 30.0)), (3.3, 3.3), 0.02)
    comp = GaussianComponent(np.array([3.3 + 6.0, 3.3]), 0.18 * np.eye(2), 4)
    assert l2_score(grid, [comp], Pose2()) == 0.0
    assert l2_score(grid, [], Pose2()) == 0.0


def test_best_pair_per_component():
    grid = NdtGrid(extent=(12.0, 12.0))
    _isotropic_cell(grid, (3.3, 3.3), 0.02)
    _isotropic_cell(grid, (3.9, 3.3), 0.02)
    comp = GaussianComponent(np.array([3.3, 3.3]), 0.18 * np.eye(2), 4)
    assert l2_score(grid, [comp], Pose2()) == pytest.approx(1.0)


def _random_map(rng, origin=(-30.0, -30.0), extent=(60.0, 60.0)):
    grid = NdtGrid(origin=origin, extent=extent)
    pts = np.vstack([
        rng.normal(c, (1.5, 0.2), size=(150, 2)) for c in rng.uniform(-15, 15, size=(6, 2))
    ])
    grid.insert_points(pts)
    return grid, pts


def test_fast_score_matches_reference(rng):
    grid, pts = _random_map(rng)
    local = pts[rng.choice(len(pts), 300, replace=False)] - (1.0, 2.0)
    means, covs, _ = scan_components(local)
    poses = np.column_stack([rng.normal(1.0, 0.8, 40), rng.normal(2.0, 0.8, 40), rng.normal(0, 0.2, 40)])
    fast = score_poses(grid, means, covs, poses)
    ref = [l2_score(grid, (means, covs), Pose2.from_array(p)) for p in poses]
    np.testing.assert_allclose(fast, ref, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(-5, 5), st.integers(-5, 5), st.integers(0, 3))
def test_score_invariant_under_grid_aligned_rigid_motion(seed, kx, ky, quarter):
    # moves that map the cell lattice onto itself keep the neighbourhoods identical
    rng = np.random.default_rng(seed)
    grid, pts = _random_map(rng)
    res = grid.resolution
    motion = Pose2(kx * res, ky * res, quarter * math.pi / 2)
    moved = NdtGrid(grid.config).insert_points(motion.transform_points(pts))
    local = rng.normal(0, 8, size=(200, 2))
    comps = rasterize_scan(local)
    pose = Pose2(*rng.uniform(-10, 10, 2), rng.uniform(-3, 3))
    a = l2_score(grid, comps, pose)
    b = l2_score(moved, comps, motion @ pose)
    assert a == pytest.approx(b, abs=1e-6)
    assert 0.0 <= a <= grid.config.d1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_score_bounded(seed):
    rng = np.random.default_rng(seed)
    grid, pts = _random_map(rng)
    means, covs, _ = scan_components(pts[::3])
    poses = rng.uniform(-3, 3, size=(50, 3))
    s = score_poses(grid, means, covs, poses)
    assert np.all(s >= 0.0) and np.all(s <= 1.0 + 1e-12)


def _frame(t, labels, xy, pose=Pose2(50.0, 50.0, 0.0)):
    return Frame(t, pose, pose, LabeledScan(t, xy, labels))


def test_static_map_ignores_car_only_scans(partition, rng):
    xy = rng.uniform(1, 3, size=(200, 2))
    log = SessionLog([_frame(0.1 * i, np.full(200, 10), xy) for i in range(3)], 10.0, {})
    static = build_map(log, partition, {S})
    assert len(static.components()) == 0
    baseline = build_map(log, partition, ALL_CLASSES)
    assert len(baseline.components()) > 0


def test_build_map_empty_log(partition):
    with pytest.raises(EmptySessionError):
        build_map(SessionLog([], 10.0, {}), partition, ALL_CLASSES)


def test_build_map_on_simulated_session(short_mapping, partition):
    from dynloc.core import normalize_session

    grid = build_map(normalize_session(short_mapping.log), partition, ALL_CLASSES)
    assert grid.queryable_mask().sum() > 100
    assert grid.dropped_points == 0


def test_config_validation():
    with pytest.raises(ValueError):
        MapConfig(resolution=0.0)
    with pytest.raises(ValueError):
        MapConfig(p_hit=0.4)
    assert MapConfig().l_hit == pytest.approx(logit(0.7))
    assert MapConfig().l_miss == pytest.approx(math.log(0.4 / 0.6))
