import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dtsdf.evaluation import (
    InsufficientOverlap,
    StageTimer,
    Trajectory,
    associate,
    depth_mae,
    mean_ci,
    memory_ratio,
    report_json,
    report_text,
    rpe,
    run_stats,
)
from dtsdf.geometry import Se3, se3_exp


def _traj(n, seed=0, dt=0.1):
    rng = np.random.default_rng(seed)
    return Trajectory(np.arange(n) * dt, [se3_exp(rng.normal(0, 0.5, 6)) for _ in range(n)])


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory([0.0, 0.0], [Se3.identity(), Se3.identity()])
    with pytest.raises(ValueError):
        Trajectory([0.0], [])


def test_associate_closest_first():
    pairs = associate([0.0, 0.1, 0.2], [0.005, 0.09, 0.5], max_dt=0.02)
    assert pairs == [(0, 0), (1, 1)]
    assert associate([], [1.0]) == []


@settings(max_examples=30)
@given(st.integers(5, 40))
def test_rpe_of_identical_trajectories_is_zero(n):
    t = _traj(n, n)
    assert rpe(t, t, window=min(3, n - 2)).rmse_mm == pytest.approx(0.0, abs=1e-9)


def test_rpe_constant_offset_cancels():
    gt = _traj(30)
    T = se3_exp([0.3, -0.2, 0.5, 0.1, 0.2, -0.3])
    est = Trajectory(gt.timestamps, [p @ T @ T.inverse() for p in gt.poses]).transformed(T)
    assert rpe(est, gt, window=5).rmse_mm < 1e-9


def test_rpe_known_value():
    ts = np.arange(5.0)
    gt = Trajectory(ts, [Se3(np.eye(3), [i, 0, 0]) for i in range(5)])
    est = Trajectory(ts, [Se3(np.eye(3), [1.01 * i, 0, 0]) for i in range(5)])
    assert rpe(est, gt, window=1).rmse_mm == pytest.approx(10.0)


def test_rpe_insufficient_overlap():
    t = _traj(5)
    with pytest.raises(InsufficientOverlap):
        rpe(t, t, window=10)
    with pytest.raises(ValueError):
        rpe(t, t, window=0)


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=50))
def test_mean_ci_matches_scipy(values):
    m, lo, hi = mean_ci(values)
    v = np.array(values)
    assert m == pytest.approx(v.mean())
    if np.std(v) > 1e-9:
        rlo, rhi = stats.t.interval(0.95, v.size - 1, loc=v.mean(), scale=stats.sem(v))
        assert lo == pytest.approx(rlo, abs=1e-9) and hi == pytest.approx(rhi, abs=1e-9)


def test_mean_ci_degenerate():
    assert np.isnan(mean_ci([])[0])
    assert mean_ci([np.nan, 2.0]) == (2.0, 2.0, 2.0)


def test_depth_mae_ignores_holes():
    a = np.array([[1.0, 0.0], [2.0, 3.0]])
    b = np.array([[1.5, 1.0], [0.0, 2.0]])
    assert depth_mae(a, b) == (0.75, 2)
    assert np.isnan(depth_mae(a, np.zeros((2, 2)))[0])


def test_stage_timer_and_reports():
    timer = StageTimer()
    for _ in range(2):
        timer.new_frame()
        with timer.stage("fuse"):
            pass
    report = run_stats(timer)
    assert report["frames"] == 2 and set(report["stage_mean_ms"]) >= {"fuse", "track"}
    assert "stage_mean_ms.fuse" in report_text(report)
    assert '"frames": 2' in report_json(report)


def test_memory_ratio():
    class V:
        def __init__(self, n):
            self.n_blocks = n

    assert memory_ratio(V(30), V(20)) == 1.5
    assert np.isnan(memory_ratio(V(3), V(0)))
