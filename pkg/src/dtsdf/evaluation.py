"""Trajectory and map-quality metrics."""

from __future__ import annotations

import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .geometry import Se3

ASSOCIATION_TOLERANCE = 0.02


class InsufficientOverlap(ValueError):
    pass


@dataclass(frozen=True)
class Trajectory:
    timestamps: np.ndarray
    poses: tuple

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", tuple(self.poses))
        if ts.ndim != 1 or ts.size != len(self.poses):
            raise ValueError("need one timestamp per pose")
        if ts.size > 1 and np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def matrices(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 4, 4))
        return np.stack([p.matrix for p in self.poses])

    def transformed(self, T: Se3) -> "Trajectory":
        """Apply a rigid transform to every pose (left multiplication)."""
        return Trajectory(self.timestamps, [T @ p for p in self.poses])


def associate(ts_a, ts_b, max_dt: float = ASSOCIATION_TOLERANCE) -> list[tuple[int, int]]:
    """Match timestamps one-to-one, closest pairs first, within ``max_dt``.

    Returned pairs are ordered by the index into ``ts_a``.
    """
    a = np.asarray(ts_a, dtype=np.float64)
    b = np.asarray(ts_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        return []
    pos = np.searchsorted(b, a)
    cand = []
    for i, p in enumerate(pos):
        for j in (p - 1, p, p + 1):
            if 0 <= j < b.size:
                dt = abs(a[i] - b[j])
                if dt <= max_dt:
                    cand.append((dt, i, int(j)))
    cand.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, i, j in cand:
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            pairs.append((i, j))
    pairs.sort()
    return pairs


@dataclass
class RpeResult:
    rmse_mm: float
    translation_errors: np.ndarray  # meters, one per pair
    rotation_errors: np.ndarray  # radians
    window: int

    @property
    def rotation_rmse_deg(self) -> float:
        return float(np.degrees(np.sqrt(np.mean(self.rotation_errors**2))))

    def to_dict(self) -> dict:
        return {
            "rpe_rmse_mm": self.rmse_mm,
            "rpe_rotation_rmse_deg": self.rotation_rmse_deg,
            "pairs": int(self.translation_errors.size),
            "window": self.window,
        }


def _rel(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``inv(A) @ B`` for rigid 4x4 matrices."""
    R = A[..., :3, :3].swapaxes(-1, -2)
    out = np.zeros_like(B)
    out[..., :3, :3] = R @ B[..., :3, :3]
    out[..., :3, 3] = np.einsum("...ij,...j->...i", R, B[..., :3, 3] - A[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out


def rpe(estimated: Trajectory, ground_truth: Trajectory, window: int = 30, max_dt: float = ASSOCIATION_TOLERANCE) -> RpeResult:
    """Relative pose error over a fixed frame window; RMSE of translation norms in mm."""
    if window < 1:
        raise ValueError("window must be >= 1")
    pairs = associate(estimated.timestamps, ground_truth.timestamps, max_dt)
    if len(pairs) <= window:
        raise InsufficientOverlap(f"{len(pairs)} associated poses do not cover a window of {window}")
    P = estimated.matrices()[[i for i, _ in pairs]]
    Q = ground_truth.matrices()[[j for _, j in pairs]]
    dP = _rel(P[:-window], P[window:])
    dQ = _rel(Q[:-window], Q[window:])
    E = _rel(dQ, dP)
    if E.shape[0] < 2:
        raise InsufficientOverlap("fewer than two relative pose pairs")
    terr = np.linalg.norm(E[:, :3, 3], axis=-1)
    cos = np.clip((np.trace(E[:, :3, :3], axis1=1, axis2=2) - 1.0) / 2.0, -1.0, 1.0)
    rerr = np.arccos(cos)
    return RpeResult(float(np.sqrt(np.mean(terr**2)) * 1000.0), terr, rerr, window)


def mean_ci(values, confidence: float = 0.95) -> tuple[float, float, float]:
    """Mean and two-sided Student-t confidence interval, ignoring NaN."""
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return float("nan"), float("nan"), float("nan")
    m = float(v.mean())
    if v.size < 2:
        return m, m, m
    half = float(stats.t.ppf(0.5 + confidence / 2.0, v.size - 1) * stats.sem(v))
    return m, m - half, m + half


def depth_mae(a: np.ndarray, b: np.ndarray) -> tuple[float, int]:
    """Mean absolute difference over pixels valid (> 0) in both maps."""
    both = (a > 0) & (b > 0)
    n = int(both.sum())
    if n == 0:
        return float("nan"), 0
    return float(np.mean(np.abs(a[both] - b[both]))), n


@dataclass
class MaeReport:
    geometric_mm: np.ndarray
    photometric: np.ndarray
    valid_pixels: np.ndarray

    def summary(self) -> dict:
        g = mean_ci(self.geometric_mm)
        p = mean_ci(self.photometric)
        return {
            "geometric_mae_mm": g[0],
            "geometric_ci95_mm": [g[1], g[2]],
            "photometric_mae": p[0],
            "photometric_ci95": [p[1], p[2]],
            "frames": int(self.geometric_mm.size),
            "frames_with_overlap": int(np.count_nonzero(self.valid_pixels)),
        }

    def series_text(self) -> str:
        """Two-column text (frame index, geometric MAE in mm)."""
        return "".join(f"{i} {v:.6f}\n" for i, v in enumerate(self.geometric_mm))


def post_fusion_mae(volume, poses, frames, workers: int = 1) -> MaeReport:
    """Re-render the finished map at every pose and compare with the input frame."""
    from .render import render_view

    g, p, n = [], [], []
    for pose, frame in zip(poses, frames):
        view = render_view(volume, pose, frame.intrinsics, workers=workers)
        mae, count = depth_mae(view.depth, frame.depth)
        g.append(mae * 1000.0)
        n.append(count)
        both = view.valid & (frame.depth > 0)
        p.append(float(np.mean(np.abs(view.intensity[both] - frame.intensity[both]))) if count else float("nan"))
    return MaeReport(np.array(g), np.array(p), np.array(n))


STAGES = ("preprocess", "track", "allocate", "fuse", "combine", "raycast")


@dataclass
class StageTimer:
    """Wall-clock time per pipeline stage, one record per frame."""

    frames: list = field(default_factory=list)

    def new_frame(self) -> None:
        self.frames.append({})

    @contextmanager
    def stage(self, name: str):
        if not self.frames:
            self.new_frame()
        t0 = time.perf_counter()
        try:
            yield
        finally:
            rec = self.frames[-1]
            rec[name] = rec.get(name, 0.0) + time.perf_counter() - t0


def run_stats(timer: StageTimer | None, volumes: dict | None = None) -> dict:
    """Per-stage mean timings (ms) plus block counts and memory per representation."""
    report: dict = {}
    frames = timer.frames if timer else []
    if frames:
        report["frames"] = len(frames)
        report["stage_mean_ms"] = {s: 1000.0 * float(np.mean([f.get(s, 0.0) for f in frames])) for s in STAGES}
        report["frame_mean_ms"] = 1000.0 * float(np.mean([sum(f.values()) for f in frames]))
    if volumes:
        report["memory"] = {
            name: {"blocks": int(v.n_blocks), "bytes": v.memory_bytes(), "per_direction": v.block_counts()} for name, v in volumes.items()
        }
        if "dtsdf" in volumes and "regular" in volumes:
            report["memory_ratio"] = memory_ratio(volumes["dtsdf"], volumes["regular"])
    return report


def memory_ratio(dtsdf_volume, regular_volume) -> float:
    if regular_volume.n_blocks == 0:
        return float("nan")
    return dtsdf_volume.n_blocks / regular_volume.n_blocks


def report_text(report: dict) -> str:
    """Flatten a report into ``key value`` lines."""
    lines = []

    def walk(prefix, obj):
        if isinstance(obj, dict):
            for k, v in obj.items():
                walk(f"{prefix}.{k}" if prefix else str(k), v)
        else:
            lines.append(f"{prefix} {obj}")

    walk("", report)
    return "\n".join(lines) + "\n"


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, default=float)
