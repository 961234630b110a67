"""Frame-by-frame orchestration: preprocess, track, allocate, fuse, render."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .directions import DEFAULT_THETA
from .evaluation import StageTimer, Trajectory
from .frame import Frame, Keyframe, PreprocessConfig, preprocess_frame
from .fusion import FusionParams, fuse_frame
from .geometry import Se3, Sim3
from .io import SequenceSource, format_trajectory_line, write_rendered_view
from .render import CombinePolicy, build_combined, raycast, should_recombine
from .tracking import IcpConfig, ScaleDiverged, TrackingLost, select_keyframe, track_frame, track_frame_sim3
from .volume import DirectionalVolume

log = logging.getLogger(__name__)

REPRESENTATIONS = ("dtsdf", "regular")


@dataclass
class PipelineConfig:
    voxel_size: float = 0.01
    truncation: float | None = None  # default 4 voxels
    theta_deg: float = float(np.degrees(DEFAULT_THETA))
    max_weight: float = 128.0
    representation: str = "dtsdf"
    dataset: str = "synthetic:room"
    out: str = "out"
    seed: int = 0
    workers: int = 1
    render_every: int = 0  # write rendered images every N frames (0: never)
    save_volume: bool = False
    max_frames: int | None = None
    fusion: FusionParams = field(default_factory=FusionParams)
    icp: IcpConfig = field(default_factory=IcpConfig)
    combine: CombinePolicy = field(default_factory=CombinePolicy)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    synthetic: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"representation must be one of {REPRESENTATIONS}")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def tau(self) -> float:
        return self.truncation if self.truncation is not None else 4.0 * self.voxel_size

    @property
    def theta(self) -> float:
        return float(np.radians(self.theta_deg))

    def make_volume(self) -> DirectionalVolume:
        return DirectionalVolume(
            voxel_size=self.voxel_size,
            truncation=self.tau,
            directional=self.representation == "dtsdf",
            theta=self.theta,
            max_weight=self.max_weight,
        )

    def fusion_params(self) -> FusionParams:
        return dataclasses.replace(self.fusion, theta=self.theta, workers=self.workers)

    def icp_config(self) -> IcpConfig:
        return dataclasses.replace(self.icp, workers=self.workers)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        nested = {"fusion": FusionParams, "icp": IcpConfig, "combine": CombinePolicy, "preprocess": PreprocessConfig}
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key, typ in nested.items():
            if key in data and isinstance(data[key], dict):
                bad = set(data[key]) - {f.name for f in dataclasses.fields(typ)}
                if bad:
                    raise ValueError(f"unknown {key} keys: {sorted(bad)}")
                data[key] = typ(**data[key])
        return cls(**data)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _jsonable(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def write_config(config: PipelineConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


@dataclass
class RunResult:
    trajectory: Trajectory
    reports: list
    frames_lost: int
    volume: DirectionalVolume
    timer: StageTimer
    scale_series: list = field(default_factory=list)  # (frame, sensor, log scale, compensated)

    @property
    def failure_rate(self) -> float:
        n = len(self.reports)
        return self.frames_lost / n if n else 0.0


class Pipeline:
    """Tracks each frame against the last rendered view, then fuses it.

    With ``sim3`` set the tracker also estimates a per-frame depth scale; the
    anchor sensor (if any) keeps its scale fixed so the map cannot drift in
    scale with the others.
    """

    def __init__(self, config: PipelineConfig, intrinsics, initial_pose: Se3 | None = None, sim3: bool = False, anchor: int | None = None):
        self.config = config
        self.K = intrinsics
        self.volume = config.make_volume()
        self.fparams = config.fusion_params()
        self.icp = config.icp_config()
        self.initial_pose = initial_pose or Se3.identity()
        self.sim3 = sim3
        self.anchor = anchor
        self.timer = StageTimer()
        self.poses: list[Se3] = []
        self.reports: list = []
        self.lost = 0
        self.view = None
        self.combined = None
        self.last_combine = (None, None)
        self.keyframe: Keyframe | None = None
        self.prev_frame: Frame | None = None
        self.sensor_log_scale: dict[int, float] = {}
        self.scale_series: list = []

    # one frame ---------------------------------------------------------------

    def _motion_guess(self) -> Se3:
        if not self.poses:
            return self.initial_pose
        if len(self.poses) == 1:
            return self.poses[-1]
        a, b = self.poses[-2], self.poses[-1]
        return b @ (a.inverse() @ b)

    def _track(self, index: int, frame: Frame, sensor_id: int):
        guess = self._motion_guess()
        if self.view is None:
            return guess, None, 0.0
        try:
            if not self.sim3:
                pose, report = track_frame(frame, self.view, self.icp, self.keyframe, self.prev_frame, initial=guess)
                return pose, report, 0.0
            frozen = self.anchor is not None and sensor_id == self.anchor
            log_s = 0.0 if frozen else self.sensor_log_scale.get(sensor_id, 0.0)
            init = Sim3(guess.rotation, guess.translation, float(np.exp(-log_s)))
            anchor_log = 0.0 if self.anchor is not None else None
            S, report = track_frame_sim3(frame, self.view, self.icp, anchor_log, init, frozen, self.keyframe, self.prev_frame)
            self.sensor_log_scale[sensor_id] = report.log_scale
            return S.se3(), report, report.log_scale
        except (TrackingLost, ScaleDiverged) as exc:
            log.warning("frame %d: %s; reusing the previous motion", index, exc)
            self.lost += 1
            report = getattr(exc, "report", None)
            if report is not None:
                report.set_pose(guess)
            return guess, report, self.sensor_log_scale.get(sensor_id, 0.0)

    def process(self, index: int, depth: np.ndarray, color: np.ndarray, timestamp: float, sensor_id: int = 0) -> Se3:
        from .tracking import TrackingReport

        cfg = self.config
        self.timer.new_frame()
        with self.timer.stage("preprocess"):
            frame = preprocess_frame(depth, color, self.K, timestamp, cfg.preprocess)
        with self.timer.stage("track"):
            pose, report, log_s = self._track(index, frame, sensor_id)
        if report is None:
            report = TrackingReport(status="initial" if index == 0 else "lost")
            report.set_pose(pose)
        report.frame_index = index
        fuse_input = frame
        if self.sim3:
            report.sensor_id = sensor_id
            scaled = depth * np.exp(-log_s)
            fuse_input = preprocess_frame(scaled, color, self.K, timestamp, cfg.preprocess) if log_s != 0.0 else frame
            self.scale_series.append((index, sensor_id, report.log_scale, report.compensated_log_scale))
        with self.timer.stage("allocate"):
            self.volume.allocate_for_frame(fuse_input, pose)
        with self.timer.stage("fuse"):
            fuse_frame(self.volume, fuse_input, pose, self.fparams)
        li, lp = self.last_combine
        recombine = self.combined is None or should_recombine(cfg.combine, index, li, pose, lp)
        with self.timer.stage("combine"):
            if recombine:
                self.combined = build_combined(self.volume, pose, self.K, index, workers=cfg.workers)
                self.last_combine = (index, pose)
        report.recombined = bool(recombine)
        with self.timer.stage("raycast"):
            self.view = raycast(self.combined, pose, self.K)
        if select_keyframe(index, self.keyframe, self.icp.keyframe_interval):
            self.keyframe = Keyframe(fuse_input, pose, index)
        self.prev_frame = fuse_input
        self.poses.append(pose)
        self.reports.append(report)
        return pose


def source_initial_pose(source: SequenceSource) -> Se3:
    if source.ground_truth:
        return source.ground_truth[0]
    return Se3.identity()


def run_sequence(config: PipelineConfig, source: SequenceSource, sim3: bool = False, anchor: int | None = None, out_dir: str | None = None) -> RunResult:
    """Run the pipeline over a source; optionally stream outputs into ``out_dir``."""
    pipe = Pipeline(config, source.intrinsics, source_initial_pose(source), sim3, anchor)
    n = len(source) if config.max_frames is None else min(len(source), config.max_frames)
    traj_fh = rep_fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        traj_fh = open(os.path.join(out_dir, "trajectory.txt"), "w")
        rep_fh = open(os.path.join(out_dir, "reports.jsonl"), "w")
    try:
        for i in range(n):
            raw = source[i]
            pose = pipe.process(i, raw.depth, raw.color, raw.timestamp, raw.sensor_id)
            if traj_fh:
                traj_fh.write(format_trajectory_line(raw.timestamp, pose) + "\n")
                rep_fh.write(pipe.reports[-1].to_json_line() + "\n")
                if config.render_every and i % config.render_every == 0:
                    write_rendered_view(pipe.view, os.path.join(out_dir, "renders"), f"frame{i:05d}")
    finally:
        if traj_fh:
            traj_fh.close()
            rep_fh.close()
    traj = Trajectory(source.timestamps[:n], pipe.poses)
    return RunResult(traj, pipe.reports, pipe.lost, pipe.volume, pipe.timer, pipe.scale_series)
