"""Command line entry point: ``dtsdf track|eval|sim3|render|info``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .evaluation import InsufficientOverlap, post_fusion_mae, report_json, report_text, rpe, run_stats
from .geometry import CameraIntrinsics
from .io import (
    CorruptImage,
    MissingIndexFile,
    ParseError,
    builtin_scene,
    default_synthetic_path,
    load_scene_description,
    load_tum_sequence,
    multi_sensor_scaled_source,
    path_from_description,
    read_trajectory,
    synthetic_source,
    write_rendered_view,
    write_trajectory,
)
from .pipeline import PipelineConfig, run_sequence, write_config
from .render import render_view
from .tracking import PHOTO_MODES
from .volume import load_volume, save_volume
from .weights import WEIGHT_MODES

log = logging.getLogger("dtsdf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRACKING = 0, 1, 2, 3
DATA_ERRORS = (MissingIndexFile, CorruptImage, ParseError, FileNotFoundError, InsufficientOverlap)
DEFAULT_FACTORS = (1.0, 1.05, 0.975, 1.025, 0.95)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# datasets --------------------------------------------------------------------


def open_dataset(spec: str, synthetic: dict | None = None, seed: int = 0):
    """``synthetic:<scene or scene.json>`` or a TUM directory."""
    opts = dict(synthetic or {})
    if spec.startswith("synthetic:"):
        name = spec.split(":", 1)[1]
        n = int(opts.get("frames", 60))
        K = CameraIntrinsics(**opts.get("intrinsics", {"fx": 150.0, "fy": 150.0, "cx": 79.5, "cy": 59.5, "width": 160, "height": 120}))
        if name.endswith(".json"):
            scene, desc = load_scene_description(name)
            if "intrinsics" in desc:
                K = CameraIntrinsics(**desc["intrinsics"])
            poses = path_from_description(desc.get("path", {}), n)
        else:
            scene = builtin_scene(name)
            poses = default_synthetic_path(name, n)
        return synthetic_source(scene, poses, K, noise=opts.get("noise"), seed=seed)
    if not os.path.isdir(spec):
        raise FileNotFoundError(f"dataset directory {spec} does not exist")
    return load_tum_sequence(spec)


# config ----------------------------------------------------------------------


def _common_pipeline_args(p):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--dataset", help="TUM directory or synthetic:<scene>")
    p.add_argument("--voxel-size", type=float)
    p.add_argument("--representation", choices=("dtsdf", "regular"))
    p.add_argument("--photo-mode", choices=PHOTO_MODES)
    p.add_argument("--weight-mode", choices=WEIGHT_MODES)
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-frames", type=int)
    p.add_argument("--frames", type=int, help="length of a synthetic sequence")
    p.add_argument("--render-every", type=int)
    p.add_argument("--save-volume", action="store_true", default=None)


def resolve_config(args) -> PipelineConfig:
    try:
        cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
        d = cfg.to_dict()
        for flag, key in (
            ("dataset", "dataset"),
            ("voxel_size", "voxel_size"),
            ("representation", "representation"),
            ("out", "out"),
            ("workers", "workers"),
            ("seed", "seed"),
            ("max_frames", "max_frames"),
            ("render_every", "render_every"),
            ("save_volume", "save_volume"),
        ):
            v = getattr(args, flag, None)
            if v is not None:
                d[key] = v
        if getattr(args, "photo_mode", None):
            d["icp"]["photo_mode"] = args.photo_mode
        if getattr(args, "weight_mode", None):
            d["icp"]["weight_mode"] = args.weight_mode
            d["fusion"]["weight_mode"] = args.weight_mode
        if getattr(args, "frames", None):
            d["synthetic"] = dict(d["synthetic"], frames=args.frames)
        return PipelineConfig.from_dict(d)
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _write_run_outputs(cfg: PipelineConfig, result, out: str) -> dict:
    stats = run_stats(result.timer, {cfg.representation: result.volume})
    stats["frames_lost"] = result.frames_lost
    stats["failure_rate"] = result.failure_rate
    with open(os.path.join(out, "stats.json"), "w") as fh:
        fh.write(report_json(stats) + "\n")
    with open(os.path.join(out, "stats.txt"), "w") as fh:
        fh.write(report_text(stats))
    if cfg.save_volume:
        save_volume(result.volume, os.path.join(out, "volume.dtsdf"))
    return stats


# commands --------------------------------------------------------------------


def cmd_track(args) -> int:
    cfg = resolve_config(args)
    source = open_dataset(cfg.dataset, cfg.synthetic, cfg.seed)
    os.makedirs(cfg.out, exist_ok=True)
    write_config(cfg, os.path.join(cfg.out, "config.json"))
    result = run_sequence(cfg, source, out_dir=cfg.out)
    gt = source.ground_truth_trajectory()
    if gt is not None:
        n = len(result.trajectory)
        from .evaluation import Trajectory

        write_trajectory(Trajectory(gt.timestamps[:n], gt.poses[:n]), os.path.join(cfg.out, "groundtruth.txt"))
    stats = _write_run_outputs(cfg, result, cfg.out)
    print(f"tracked {len(result.trajectory)} frames, lost {result.frames_lost}, mean {stats.get('frame_mean_ms', 0.0):.1f} ms/frame")
    if result.failure_rate > 0.5:
        log.error("tracking failed on %.0f%% of frames", 100 * result.failure_rate)
        return EXIT_TRACKING
    return EXIT_OK


def cmd_eval(args) -> int:
    est = read_trajectory(args.est)
    gt = read_trajectory(args.gt)
    res = rpe(est, gt, window=args.window)
    report = {"rpe": res.to_dict()}
    if args.volume:
        if not args.dataset:
            raise UsageError("--volume needs --dataset to compare against")
        volume = load_volume(args.volume)
        source = open_dataset(args.dataset, {"frames": len(est)} if args.dataset.startswith("synthetic:") else None)
        from .evaluation import associate
        from .frame import PreprocessConfig, preprocess_frame

        pairs = associate(est.timestamps, source.timestamps)
        frames = []
        for _, j in pairs:
            raw = source[j]
            frames.append(preprocess_frame(raw.depth, raw.color, source.intrinsics, raw.timestamp, PreprocessConfig(pyramid_levels=1)))
        mae = post_fusion_mae(volume, [est.poses[i] for i, _ in pairs], frames)
        report["post_fusion"] = mae.summary()
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            with open(os.path.join(args.out, "mae_series.txt"), "w") as fh:
                fh.write(mae.series_text())
    print(report_text(report), end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval.json"), "w") as fh:
            fh.write(report_json(report) + "\n")
    return EXIT_OK


def _parse_factors(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad --factors {text!r}") from None
    if not vals or min(vals) <= 0:
        raise UsageError("--factors must be positive numbers")
    return vals


def sim3_summary(result, factors, anchor) -> dict:
    """Final per-sensor factor estimates and their worst deviation over the run."""
    series = [r for r in result.scale_series if r[2] is not None]
    out = {"anchor": anchor, "factors": list(factors), "sensors": {}}
    for sid, truth in enumerate(factors):
        rows = [r for r in series if r[1] == sid and r[0] > 0]
        if not rows:
            continue
        key = 3 if anchor is not None else 2
        est = np.exp([r[key] if r[key] is not None else r[2] for r in rows])
        out["sensors"][str(sid)] = {
            "true_factor": truth,
            "final_estimate": float(est[-1]),
            "max_abs_error": float(np.max(np.abs(est - truth))),
        }
    return out


def cmd_sim3(args) -> int:
    cfg = resolve_config(args)
    factors = _parse_factors(args.factors)
    anchor = None if str(args.anchor).lower() == "none" else int(args.anchor)
    if anchor is not None and not 0 <= anchor < len(factors):
        raise UsageError("--anchor must index a sensor in --factors")
    base = open_dataset(cfg.dataset, cfg.synthetic, cfg.seed)
    source = multi_sensor_scaled_source(base, factors)
    os.makedirs(cfg.out, exist_ok=True)
    write_config(cfg, os.path.join(cfg.out, "config.json"))
    result = run_sequence(cfg, source, sim3=True, anchor=anchor, out_dir=cfg.out)
    with open(os.path.join(cfg.out, "scale_series.txt"), "w") as fh:
        fh.write("# frame sensor log_scale compensated_log_scale\n")
        for i, sid, ls, cs in result.scale_series:
            fh.write(f"{i} {sid} {ls if ls is not None else 'nan'} {cs if cs is not None else 'nan'}\n")
    summary = sim3_summary(result, factors, anchor)
    with open(os.path.join(cfg.out, "scales.json"), "w") as fh:
        fh.write(report_json(summary) + "\n")
    _write_run_outputs(cfg, result, cfg.out)
    print(report_text(summary), end="")
    if result.failure_rate > 0.5:
        return EXIT_TRACKING
    return EXIT_OK


def cmd_render(args) -> int:
    volume = load_volume(args.volume)
    traj = read_trajectory(args.trajectory)
    if not 0 <= args.index < len(traj):
        raise UsageError(f"--index out of range (trajectory has {len(traj)} poses)")
    if args.intrinsics:
        with open(args.intrinsics) as fh:
            K = CameraIntrinsics(**json.load(fh))
    else:
        K = CameraIntrinsics(150.0, 150.0, 79.5, 59.5, 160, 120)
    view = render_view(volume, traj.poses[args.index], K, args.index)
    paths = write_rendered_view(view, args.out, f"view{args.index:05d}")
    for k, v in paths.items():
        print(f"{k} {v}")
    return EXIT_OK


def cmd_info(args) -> int:
    print(f"dtsdf {__version__}")
    if args.volume:
        volume = load_volume(args.volume)
        info = {
            "representation": "dtsdf" if volume.directional else "regular",
            "voxel_size": volume.voxel_size,
            "truncation": volume.truncation,
            "theta_deg": float(np.degrees(volume.theta)),
            "blocks": volume.n_blocks,
            "memory_bytes": volume.memory_bytes(),
            "blocks_per_direction": volume.block_counts(),
        }
    else:
        info = {"default_config": PipelineConfig().to_dict()}
    print(report_text(info), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dtsdf", description="Directional TSDF mapping and tracking")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("track", help="track and fuse a sequence")
    _common_pipeline_args(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="relative pose error and post-fusion error")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--window", type=int, default=30)
    p.add_argument("--volume", help="fused volume snapshot for post-fusion error")
    p.add_argument("--dataset", help="sequence the volume was fused from")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sim3", help="multi-sensor scale estimation")
    _common_pipeline_args(p)
    p.add_argument("--factors", default=",".join(str(f) for f in DEFAULT_FACTORS))
    p.add_argument("--anchor", default="0", help="sensor index to anchor, or 'none'")
    p.set_defaults(func=cmd_sim3)

    p = sub.add_parser("render", help="render a stored volume from a trajectory pose")
    p.add_argument("--volume", required=True)
    p.add_argument("--trajectory", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--intrinsics", help="JSON file with fx, fy, cx, cy, width, height")
    p.add_argument("--out", default="render")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("info", help="version, defaults or volume summary")
    p.add_argument("--volume")
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        if not getattr(args, "func", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except UsageError as exc:
        print(f"dtsdf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"dtsdf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"dtsdf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
