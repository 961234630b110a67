"""Directional TSDF: dense RGB-D fusion, view-dependent rendering and ICP tracking."""

__version__ = "0.1.0"

from .directions import DEFAULT_THETA, Direction, direction_weight, direction_weights
from .evaluation import Trajectory, post_fusion_mae, rpe
from .frame import Frame, Keyframe, PreprocessConfig, preprocess_frame
from .fusion import FusionParams, fuse_frame
from .geometry import CameraIntrinsics, Se3, Sim3, se3_exp, sim3_exp
from .io import load_tum_sequence, read_trajectory, render_synthetic_frame, write_trajectory
from .pipeline import Pipeline, PipelineConfig, run_sequence
from .render import CombinePolicy, RenderedView, build_combined, raycast, render_view
from .tracking import IcpConfig, TrackingLost, track_frame, track_frame_sim3
from .volume import DirectionalVolume

__all__ = [
    "DEFAULT_THETA",
    "CameraIntrinsics",
    "CombinePolicy",
    "Direction",
    "DirectionalVolume",
    "Frame",
    "FusionParams",
    "IcpConfig",
    "Keyframe",
    "Pipeline",
    "PipelineConfig",
    "PreprocessConfig",
    "RenderedView",
    "Se3",
    "Sim3",
    "TrackingLost",
    "Trajectory",
    "build_combined",
    "direction_weight",
    "direction_weights",
    "fuse_frame",
    "load_tum_sequence",
    "post_fusion_mae",
    "preprocess_frame",
    "raycast",
    "read_trajectory",
    "render_synthetic_frame",
    "render_view",
    "rpe",
    "run_sequence",
    "se3_exp",
    "sim3_exp",
    "track_frame",
    "track_frame_sim3",
    "write_trajectory",
]
