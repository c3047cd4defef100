import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynloc.core import Pose2, Trajectory, compose_arrays
from dynloc.evaluation import (
    SUMMARY_COLUMNS,
    MetricSummary,
    aggregate,
    align,
    ate_rmse,
    evaluate,
    rpe_rmse,
    write_error_series_csv,
    write_summary_csv,
)

from oracles import brute_ate, brute_rpe


def traj(poses):
    poses = np.asarray(poses, float)
    return Trajectory(0.1 * np.arange(len(poses)), poses)


def random_traj(rng, n=50):
    steps = np.column_stack([rng.normal(0.5, 0.2, n), rng.normal(0, 0.1, n), rng.normal(0, 0.05, n)])
    poses = np.zeros((n, 3))
    for i in range(1, n):
        poses[i] = compose_arrays(poses[i - 1:i], steps[i:i + 1])[0]
    return traj(poses)


def moved(t, pose: Pose2):
    return traj(compose_arrays(np.tile(pose.as_array(), (len(t), 1)), t.poses))


def test_align_identity():
    t = random_traj(np.random.default_rng(0))
    pair = align(t, t)
    assert abs(pair.alignment.x) < 1e-12 and abs(pair.alignment.psi) < 1e-12
    assert ate_rmse(pair) < 1e-12


def test_align_shift():
    ref = random_traj(np.random.default_rng(1))
    est = traj(ref.poses + (1.0, 0.0, 0.0))
    pair = align(est, ref)
    assert pair.alignment.x == pytest.approx(-1.0, abs=1e-9)
    assert pair.alignment.y == pytest.approx(0.0, abs=1e-9)
    assert pair.alignment.psi == pytest.approx(0.0, abs=1e-9)
    assert ate_rmse(pair) < 1e-9


def test_align_rotation():
    ref = random_traj(np.random.default_rng(2))
    est = moved(ref, Pose2(0.0, 0.0, math.radians(30)))
    pair = align(est, ref)
    assert pair.alignment.psi == pytest.approx(math.radians(-30), abs=1e-9)
    assert ate_rmse(pair) < 1e-9


def test_align_length_mismatch():
    with pytest.raises(ValueError):
        align(traj(np.zeros((3, 3))), traj(np.zeros((4, 3))))


def test_ate_examples():
    ref = traj([[0, 0, 0], [1, 0, 0]])
    pair = align(ref, ref)
    assert ate_rmse(pair) == 0.0
    # a constant post-alignment residual r: compare unaligned pairs directly
    from dynloc.evaluation import AlignedPair

    est = traj([[0.3, 0.4, 0], [1.3, 0.4, 0]])
    assert ate_rmse(AlignedPair(est, ref, Pose2())) == pytest.approx(0.5)
    est = traj([[3.0, 4.0, 0], [1.0, 0.0, 0]])
    assert ate_rmse(AlignedPair(est, ref, Pose2())) == pytest.approx(math.sqrt(25 / 2))
    assert math.sqrt(25 / 2) == pytest.approx(3.536, abs=1e-3)


def test_rpe_examples():
    ref = random_traj(np.random.default_rng(3))
    assert rpe_rmse(align(ref, ref)) < 1e-12
    shifted = moved(ref, Pose2(5.0, -2.0, 1.1))
    from dynloc.evaluation import AlignedPair

    assert rpe_rmse(AlignedPair(shifted, ref, Pose2())) < 1e-9
    static = traj(np.zeros((20, 3)))
    stretched = traj(np.column_stack([0.1 * np.arange(20), np.zeros(20), np.zeros(20)]))
    assert rpe_rmse(AlignedPair(stretched, static, Pose2())) == pytest.approx(0.1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    ref = random_traj(rng, 30)
    est = traj(ref.poses + rng.normal(0, 0.3, ref.poses.shape))
    s = evaluate(est, ref)
    assert s.ate_rmse == pytest.approx(brute_ate(est.xy, ref.xy), abs=1e-9)
    pair = align(est, ref)
    assert s.rpe_rmse == pytest.approx(brute_rpe(pair.estimated.poses, ref.poses), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50), st.floats(-50, 50), st.floats(-3.1, 3.1))
def test_rigid_invariance(seed, x, y, psi):
    rng = np.random.default_rng(seed)
    ref = random_traj(rng, 30)
    est = traj(ref.poses + rng.normal(0, 0.2, ref.poses.shape))
    base = evaluate(est, ref)
    g = Pose2(x, y, psi)
    a = evaluate(moved(est, g), ref)
    b = evaluate(est, moved(ref, g))
    assert a.rpe_rmse == pytest.approx(base.rpe_rmse, abs=1e-9)
    assert b.rpe_rmse == pytest.approx(base.rpe_rmse, abs=1e-9)
    assert a.ate_rmse == pytest.approx(base.ate_rmse, abs=1e-9)
    # aligning can only reduce the error
    from dynloc.evaluation import AlignedPair

    assert base.ate_rmse <= ate_rmse(AlignedPair(est, ref, Pose2())) + 1e-12


def test_translation_only_flag():
    ref = random_traj(np.random.default_rng(4))
    est = moved(ref, Pose2(0.0, 0.0, 0.2))
    assert evaluate(est, ref, rotation=False).ate_rmse > evaluate(est, ref).ate_rmse
    assert align(est, ref, rotation=False).alignment.psi == 0.0


def _runs(values, map_type="baseline", method="baseline"):
    return [MetricSummary(v, v / 10, map_type=map_type, method=method) for v in values]


def test_aggregate_single_and_three():
    (row,) = aggregate(_runs([1.5]))
    assert row["ate_mean"] == 1.5 and row["ate_var"] == 0.0 and row["n_runs"] == 1
    (row,) = aggregate(_runs([1.0, 2.0, 3.0]))
    assert row["ate_mean"] == pytest.approx(2.0)
    assert row["ate_var"] == pytest.approx(1.0)
    assert (row["q25"], row["q50"], row["q75"]) == (1.5, 2.0, 2.5)
    assert (row["min"], row["max"]) == (1.0, 3.0)


def test_aggregate_full_matrix(tmp_path):
    maps, methods = ("baseline", "static"), ("baseline", "filtered", "static", "combined")
    runs = [r for mt in maps for m in methods for r in _runs([1.0, 2.0], mt, m)]
    rows = aggregate(runs, maps, methods)
    assert len(rows) == 8
    assert [(r["map_type"], r["method"]) for r in rows] == [(a, b) for a in maps for b in methods]
    path = tmp_path / "summary.csv"
    write_summary_csv(path, rows)
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        body = list(reader)
    assert tuple(header) == SUMMARY_COLUMNS
    assert len(body) == 8


def test_error_series_csv(tmp_path):
    ref = random_traj(np.random.default_rng(6), 10)
    s = evaluate(traj(ref.poses + 0.1), ref)
    path = tmp_path / "err.csv"
    write_error_series_csv(path, s)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["timestamp", "err_m"]
    assert len(rows) == 11
    assert float(rows[3][1]) == s.errors[2]
