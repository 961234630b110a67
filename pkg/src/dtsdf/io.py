"""Datasets, trajectory files, image codecs and synthetic scenes.

Depth PNGs follow the TUM RGB-D convention: 16-bit values, meters times 5000,
zero for missing data.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.spatial.transform import Rotation

from .evaluation import ASSOCIATION_TOLERANCE, Trajectory, associate
from .frame import Frame, PreprocessConfig, build_pyramid, preprocess_frame, rgb_to_intensity
from .geometry import CameraIntrinsics, Se3, look_at

log = logging.getLogger(__name__)

DEPTH_SCALE = 5000.0


class MissingIndexFile(FileNotFoundError):
    pass


class CorruptImage(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


# images ----------------------------------------------------------------------


def read_depth_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            raw = np.asarray(im)
    except (OSError, UnidentifiedImageError) as exc:
        raise CorruptImage(f"cannot decode depth image {path}: {exc}") from exc
    if raw.ndim != 2:
        raise CorruptImage(f"depth image {path} is not single-channel")
    return raw.astype(np.float64) / DEPTH_SCALE


def write_depth_png(path, depth: np.ndarray) -> None:
    raw = np.clip(np.rint(np.asarray(depth) * DEPTH_SCALE), 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path)


def read_color_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            raw = np.asarray(im.convert("RGB"))
    except (OSError, UnidentifiedImageError) as exc:
        raise CorruptImage(f"cannot decode color image {path}: {exc}") from exc
    return raw.astype(np.float64) / 255.0


def write_color_png(path, color: np.ndarray) -> None:
    Image.fromarray(np.clip(np.rint(np.asarray(color) * 255.0), 0, 255).astype(np.uint8)).save(path)


def write_rendered_view(view, out_dir, prefix: str = "view") -> dict:
    """Depth (16-bit), normals, colors and direction bits as PNG files."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {k: os.path.join(out_dir, f"{prefix}_{k}.png") for k in ("depth", "normals", "colors", "directions")}
    write_depth_png(paths["depth"], view.depth)
    nrm = np.where(view.valid[..., None], 0.5 * (view.camera_normals() + 1.0), 0.0)
    write_color_png(paths["normals"], nrm)
    write_color_png(paths["colors"], view.colors)
    Image.fromarray(view.direction_mask.astype(np.uint8)).save(paths["directions"])
    return paths


# trajectories ----------------------------------------------------------------


def pose_to_tum(pose: Se3) -> list[float]:
    q = Rotation.from_matrix(pose.rotation).as_quat()  # x, y, z, w
    if q[3] < 0 or (q[3] == 0 and next(c for c in q if c != 0) < 0):
        q = -q
    return list(pose.translation) + list(q)


def tum_to_pose(values) -> Se3:
    t = np.asarray(values[:3], dtype=np.float64)
    q = np.asarray(values[3:7], dtype=np.float64)
    if not np.isfinite(q).all() or np.linalg.norm(q) == 0:
        raise ValueError("invalid quaternion")
    R = Rotation.from_quat(q / np.linalg.norm(q)).as_matrix()
    return Se3(R, t)


def _fmt(v: float) -> str:
    s = f"{v:.9g}"
    return "0" if s in ("-0", "0") else s


def format_trajectory_line(timestamp: float, pose: Se3) -> str:
    vals = pose_to_tum(pose)
    return f"{timestamp:.6f} " + " ".join(_fmt(v) for v in vals)


def write_trajectory(traj: Trajectory, path) -> None:
    with open(path, "w") as fh:
        for t, pose in zip(traj.timestamps, traj.poses):
            fh.write(format_trajectory_line(float(t), pose) + "\n")


def read_trajectory(path) -> Trajectory:
    ts, poses = [], []
    with open(path) as fh:
        for no, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 8:
                raise ParseError(path, no, f"expected 8 fields, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
                pose = tum_to_pose(vals[1:])
            except ValueError as exc:
                raise ParseError(path, no, str(exc)) from None
            ts.append(vals[0])
            poses.append(pose)
    try:
        return Trajectory(np.array(ts), poses)
    except ValueError as exc:
        raise ParseError(path, 0, str(exc)) from None


# sequences -------------------------------------------------------------------


@dataclass
class RawFrame:
    timestamp: float
    depth: np.ndarray
    color: np.ndarray
    sensor_id: int = 0
    scale: float = 1.0


@dataclass
class SequenceSource:
    """Random-access list of RGB-D frames with optional ground truth."""

    timestamps: np.ndarray
    loader: Callable[[int], tuple[np.ndarray, np.ndarray]]
    intrinsics: CameraIntrinsics
    ground_truth: list | None = None  # Se3 per frame, or None
    sensor_ids: np.ndarray | None = None
    scales: np.ndarray | None = None
    name: str = "sequence"
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.timestamps)

    def __getitem__(self, i: int) -> RawFrame:
        depth, color = self.loader(i)
        sid = int(self.sensor_ids[i]) if self.sensor_ids is not None else 0
        sc = float(self.scales[i]) if self.scales is not None else 1.0
        return RawFrame(float(self.timestamps[i]), depth, color, sid, sc)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def ground_truth_trajectory(self) -> Trajectory | None:
        if self.ground_truth is None:
            return None
        return Trajectory(self.timestamps, self.ground_truth)


def _read_index(path) -> list[tuple[float, str]]:
    if not os.path.isfile(path):
        raise MissingIndexFile(f"missing index file {path}")
    out = []
    with open(path) as fh:
        for no, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            try:
                out.append((float(parts[0]), parts[1]))
            except (ValueError, IndexError):
                raise ParseError(path, no, "expected '<timestamp> <file>'") from None
    return out


TUM_DEFAULT_INTRINSICS = {"fx": 525.0, "fy": 525.0, "cx": 319.5, "cy": 239.5, "width": 640, "height": 480}
TUM_FR1_INTRINSICS = {"fx": 517.3, "fy": 516.5, "cx": 318.6, "cy": 255.3, "width": 640, "height": 480}


def _tum_intrinsics(root: str) -> CameraIntrinsics:
    cfg = os.path.join(root, "intrinsics.json")
    if os.path.isfile(cfg):
        with open(cfg) as fh:
            return CameraIntrinsics(**json.load(fh))
    base = os.path.basename(os.path.normpath(root))
    return CameraIntrinsics(**(TUM_FR1_INTRINSICS if "freiburg1" in base else TUM_DEFAULT_INTRINSICS))


def load_tum_sequence(root, max_dt: float = ASSOCIATION_TOLERANCE) -> SequenceSource:
    """Index a TUM RGB-D directory; images are decoded lazily."""
    root = str(root)
    depth_idx = _read_index(os.path.join(root, "depth.txt"))
    rgb_idx = _read_index(os.path.join(root, "rgb.txt"))
    pairs = associate([t for t, _ in depth_idx], [t for t, _ in rgb_idx], max_dt)
    skipped = len(depth_idx) - len(pairs)
    if skipped:
        log.warning("%s: %d depth frames without a color match were skipped", root, skipped)
    ts = np.array([depth_idx[i][0] for i, _ in pairs])
    files = [(os.path.join(root, depth_idx[i][1]), os.path.join(root, rgb_idx[j][1])) for i, j in pairs]
    gt = None
    gt_path = os.path.join(root, "groundtruth.txt")
    if os.path.isfile(gt_path):
        traj = read_trajectory(gt_path)
        gpairs = associate(ts, traj.timestamps, max_dt)
        if len(gpairs) == len(ts):
            gt = [traj.poses[j] for _, j in gpairs]
        else:
            log.warning("%s: ground truth covers %d of %d frames; ignored", root, len(gpairs), len(ts))

    def loader(i):
        d, c = files[i]
        return read_depth_png(d), read_color_png(c)

    return SequenceSource(ts, loader, _tum_intrinsics(root), gt, name=os.path.basename(os.path.normpath(root)), skipped=skipped)


def write_tum_sequence(root, source: SequenceSource, with_ground_truth: bool = True) -> None:
    """Write a source in the TUM layout (used to create test fixtures)."""
    os.makedirs(os.path.join(root, "depth"), exist_ok=True)
    os.makedirs(os.path.join(root, "rgb"), exist_ok=True)
    with open(os.path.join(root, "depth.txt"), "w") as fd, open(os.path.join(root, "rgb.txt"), "w") as fr:
        fd.write("# depth maps\n")
        fr.write("# color images\n")
        for i, raw in enumerate(source):
            name = f"{raw.timestamp:.6f}.png"
            write_depth_png(os.path.join(root, "depth", name), raw.depth)
            write_color_png(os.path.join(root, "rgb", name), raw.color)
            fd.write(f"{raw.timestamp:.6f} depth/{name}\n")
            fr.write(f"{raw.timestamp:.6f} rgb/{name}\n")
    K = source.intrinsics
    with open(os.path.join(root, "intrinsics.json"), "w") as fh:
        json.dump({k: getattr(K, k) for k in ("fx", "fy", "cx", "cy", "width", "height", "z_min", "z_max")}, fh)
    if with_ground_truth and source.ground_truth is not None:
        write_trajectory(Trajectory(source.timestamps, source.ground_truth), os.path.join(root, "groundtruth.txt"))


def multi_sensor_scaled_source(base: SequenceSource, factors: Sequence[float]) -> SequenceSource:
    """Cycle frames through sensors whose depth is off by a constant factor."""
    factors = np.asarray(list(factors), dtype=np.float64)
    if factors.size == 0 or np.any(factors <= 0):
        raise ValueError("factors must be a nonempty list of positive numbers")
    n = len(base)
    ids = np.arange(n) % factors.size
    scales = factors[ids]

    def loader(i):
        depth, color = base.loader(i)
        return depth * scales[i], color

    return SequenceSource(base.timestamps, loader, base.intrinsics, base.ground_truth, ids, scales, base.name + "-scaled")


# synthetic scenes ------------------------------------------------------------


@dataclass
class Texture:
    """Smooth procedural color: per-channel sinusoids of the world position."""

    frequency: float = 8.0
    phase: tuple = (0.0, 1.3, 2.6)
    amplitude: float = 0.35
    base: tuple = (0.5, 0.5, 0.5)

    def __call__(self, p: np.ndarray) -> np.ndarray:
        f = self.frequency
        x, y, z = p[..., 0], p[..., 1], p[..., 2]
        out = np.empty(p.shape)
        for c in range(3):
            ph = self.phase[c]
            out[..., c] = self.base[c] + self.amplitude * np.sin(f * (x + 0.7 * y + 0.4 * z) + ph) * np.cos(f * (0.6 * x - y + 0.3 * z) - ph)
        return np.clip(out, 0.0, 1.0)


@dataclass
class Plane:
    point: tuple
    normal: tuple
    texture: Texture = field(default_factory=Texture)

    def intersect(self, o, d):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((np.asarray(self.point) - o) @ n) / denom
        t = np.where(np.isfinite(t) & (t > 0), t, np.inf)
        return t, np.broadcast_to(n, d.shape).copy()


@dataclass
class Box:
    """Axis-aligned box; ``inside`` renders it as a room seen from within."""

    center: tuple
    half_size: tuple
    inside: bool = False
    texture: Texture = field(default_factory=Texture)

    def intersect(self, o, d):
        c = np.asarray(self.center, dtype=np.float64)
        hs = np.asarray(self.half_size, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (c - hs - o) * inv
            t2 = (c + hs - o) * inv
        t1 = np.where(np.isnan(t1), -np.inf, t1)
        t2 = np.where(np.isnan(t2), np.inf, t2)
        tn = np.minimum(t1, t2)
        tf = np.maximum(t1, t2)
        tnear = tn.max(axis=-1)
        tfar = tf.min(axis=-1)
        hit = tnear <= tfar
        if self.inside:
            t = np.where(hit & (tfar > 0), tfar, np.inf)
            axis = np.argmin(tf, axis=-1)
        else:
            t = np.where(hit & (tnear > 0), tnear, np.inf)
            axis = np.argmax(tn, axis=-1)
        sign = np.sign(np.take_along_axis(d, axis[:, None], axis=-1)[:, 0])
        n = np.zeros(d.shape)
        # outward normal opposes the ray on entry; inward-facing walls oppose it on exit too
        n[np.arange(d.shape[0]), axis] = -sign
        return t, n


@dataclass
class Sphere:
    center: tuple
    radius: float
    texture: Texture = field(default_factory=Texture)

    def intersect(self, o, d):
        c = np.asarray(self.center, dtype=np.float64)
        oc = o - c
        b = d @ oc
        disc = b * b - (oc @ oc - self.radius**2)
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > 0, t0, np.where(t1 > 0, t1, np.inf))
        t = np.where(disc >= 0, t, np.inf)
        p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        n = (p - c) / self.radius
        return t, n


PRIMITIVES = {"plane": Plane, "box": Box, "sphere": Sphere}


@dataclass
class SyntheticScene:
    primitives: list

    def cast(self, origin, dirs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """First hit distance, world normal and color along unit rays ``dirs``."""
        origin = np.asarray(origin, dtype=np.float64)
        dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        best = np.full(dirs.shape[0], np.inf)
        normal = np.zeros(dirs.shape)
        color = np.zeros(dirs.shape)
        for prim in self.primitives:
            t, n = prim.intersect(origin, dirs)
            closer = t < best
            best = np.where(closer, t, best)
            normal[closer] = n[closer]
            if closer.any():
                p = origin + t[closer, None] * dirs[closer]
                color[closer] = prim.texture(p)
        return best, normal, color

    def to_dict(self) -> dict:
        out = []
        for prim in self.primitives:
            d = {"type": next(k for k, v in PRIMITIVES.items() if isinstance(prim, v))}
            for k, v in prim.__dict__.items():
                d[k] = v.__dict__ if isinstance(v, Texture) else (list(v) if isinstance(v, tuple) else v)
            out.append(d)
        return {"primitives": out}

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticScene":
        prims = []
        for item in data["primitives"]:
            item = dict(item)
            kind = PRIMITIVES[item.pop("type")]
            tex = item.pop("texture", None)
            kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in item.items()}
            if tex is not None:
                kwargs["texture"] = Texture(**{k: tuple(v) if isinstance(v, list) else v for k, v in tex.items()})
            prims.append(kind(**kwargs))
        return cls(prims)


def thin_plate(center=(0.0, 0.0, 0.0), size=(0.6, 0.6), thickness=0.015, normal_axis: int = 0) -> Box:
    hs = [size[0] / 2, size[1] / 2]
    hs.insert(normal_axis, thickness / 2)
    return Box(tuple(center), tuple(hs))


def l_extrusion(corner=(0.0, 0.0, 0.0), length=0.5, height=0.5, thickness=0.015) -> list:
    """Two thin walls meeting at a right angle, extruded along z."""
    cx, cy, cz = corner
    t = thickness
    wall_x = Box((cx + length / 2, cy + t / 2, cz), (length / 2, t / 2, height / 2))
    wall_y = Box((cx + t / 2, cy + length / 2, cz), (t / 2, length / 2, height / 2))
    return [wall_x, wall_y]


def builtin_scene(name: str) -> SyntheticScene:
    if name == "plane":
        return SyntheticScene([Plane((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), Texture(frequency=10.0))])
    if name in ("box", "box_room", "room"):
        room = Box((0.0, 0.0, 1.0), (1.6, 1.3, 1.0), inside=True, texture=Texture(frequency=6.0))
        cube = Box((0.35, 0.25, 0.25), (0.2, 0.25, 0.25), texture=Texture(frequency=9.0, phase=(0.5, 2.0, 1.0)))
        ball = Sphere((-0.4, -0.3, 0.35), 0.3, Texture(frequency=12.0))
        return SyntheticScene([room, cube, ball])
    if name == "thin_plate":
        floor = Box((0.0, 0.0, -0.52), (0.8, 0.8, 0.02))
        return SyntheticScene([thin_plate(thickness=0.015), floor])
    if name in ("l_shape", "thin_l"):
        return SyntheticScene(l_extrusion(thickness=0.015))
    if name == "sphere":
        return SyntheticScene([Sphere((0.0, 0.0, 0.0), 0.4)])
    raise ValueError(f"unknown synthetic scene {name!r}")


def orbit_path(center, radius: float, height: float, n: int, start: float = 0.0, arc: float = 2 * np.pi, target=None) -> list[Se3]:
    """Poses on a horizontal circle around ``center`` looking at ``target`` (default center)."""
    c = np.asarray(center, dtype=np.float64)
    tgt = c if target is None else np.asarray(target, dtype=np.float64)
    angles = start + arc * np.arange(n) / max(n, 1)
    return [look_at(c + np.array([radius * np.cos(a), radius * np.sin(a), height]), tgt) for a in angles]


def linear_path(start, end, target, n: int) -> list[Se3]:
    s, e = np.asarray(start, dtype=np.float64), np.asarray(end, dtype=np.float64)
    return [look_at(s + (e - s) * k / max(n - 1, 1), target) for k in range(n)]


def walk_around_path(center, radius: float, height: float, n: int) -> list[Se3]:
    """Full circle around an object, so both sides are observed."""
    return orbit_path(center, radius, height, n, 0.0, 2 * np.pi)


def render_synthetic_depth(scene: SyntheticScene, pose: Se3, K: CameraIntrinsics):
    """Exact depth, camera-frame normals (camera facing) and color of a view."""
    xs, ys = K.pixel_grid()
    rays_c = K.unproject_points(xs, ys, np.ones_like(xs)).reshape(-1, 3)
    norm = np.linalg.norm(rays_c, axis=-1)
    dirs_c = rays_c / norm[:, None]
    dirs = dirs_c @ pose.rotation.T
    t, n_world, color = scene.cast(pose.translation, dirs)
    hit = np.isfinite(t)
    depth = np.where(hit, t / norm, 0.0)
    n_cam = n_world @ pose.rotation
    flip = np.sum(n_cam * dirs_c, axis=-1) > 0
    n_cam[flip] *= -1.0
    h, w = K.height, K.width
    return depth.reshape(h, w), n_cam.reshape(h, w, 3), color.reshape(h, w, 3)


def render_synthetic_frame(
    scene: SyntheticScene,
    pose: Se3,
    K: CameraIntrinsics,
    noise: float | None = None,
    rng: np.random.Generator | None = None,
    timestamp: float = 0.0,
    preprocess: PreprocessConfig | None = None,
    pyramid_levels: int = 3,
) -> Frame:
    """Frame of a synthetic scene with exact geometry.

    Without noise or an explicit preprocessing config the analytic normals are
    used directly. ``noise`` scales the quadratic depth noise ``noise * z^2``.
    """
    depth, normals, color = render_synthetic_depth(scene, pose, K)
    depth = np.where((depth >= K.z_min) & (depth <= K.z_max), depth, 0.0)
    if noise:
        rng = rng if rng is not None else np.random.default_rng(0)
        depth = np.where(depth > 0, depth + rng.normal(0.0, 1.0, depth.shape) * noise * depth**2, 0.0)
    if noise or preprocess is not None:
        cfg = preprocess or PreprocessConfig(pyramid_levels=pyramid_levels)
        return preprocess_frame(depth, color, K, timestamp, cfg)
    normals = np.where((depth > 0)[..., None], normals, np.nan)
    intensity = rgb_to_intensity(color)
    pyramid = build_pyramid(depth, intensity, K, pyramid_levels, normals=normals)
    return Frame(depth, color, intensity, normals, K, float(timestamp), pyramid)


def synthetic_source(scene: SyntheticScene, poses: list, K: CameraIntrinsics, fps: float = 30.0, noise: float | None = None, seed: int = 0) -> SequenceSource:
    """Sequence source rendering frames on demand (noise seeded per frame)."""

    def loader(i):
        depth, _, color = render_synthetic_depth(scene, poses[i], K)
        depth = np.where((depth >= K.z_min) & (depth <= K.z_max), depth, 0.0)
        if noise:
            rng = np.random.default_rng([seed, i])
            depth = np.where(depth > 0, depth + rng.normal(0.0, 1.0, depth.shape) * noise * depth**2, 0.0)
        return depth, color

    ts = np.arange(len(poses)) / fps
    return SequenceSource(ts, loader, K, list(poses), name="synthetic")


def load_scene_description(path) -> tuple[SyntheticScene, dict]:
    """JSON scene file: ``{"primitives": [...], "path": {...}, "intrinsics": {...}}``."""
    with open(path) as fh:
        data = json.load(fh)
    return SyntheticScene.from_dict(data), data


def default_synthetic_path(name: str, n: int) -> list[Se3]:
    """A camera path that suits each built-in scene."""
    if name == "plane":
        return linear_path((-0.2, -0.7, 0.9), (0.2, -0.7, 0.9), (0.0, 0.0, 0.0), n)
    if name in ("box", "box_room", "room"):
        return orbit_path((0.0, 0.0, 0.6), 0.6, 0.6, n, arc=0.015 * n)
    if name == "thin_plate":
        return walk_around_path((0.0, 0.0, 0.0), 1.0, 0.3, n)
    if name in ("l_shape", "thin_l"):
        return walk_around_path((0.1, 0.1, 0.0), 1.0, 0.3, n)
    if name == "sphere":
        return orbit_path((0.0, 0.0, 0.0), 1.2, 0.3, n, arc=0.02 * n)
    raise ValueError(f"unknown synthetic scene {name!r}")


def path_from_description(desc: dict, n: int) -> list[Se3]:
    """Camera path from a scene file's ``path`` entry."""
    kind = desc.get("kind", "orbit")
    n = int(desc.get("frames", n))
    if kind == "orbit":
        return orbit_path(desc["center"], desc["radius"], desc.get("height", 0.0), n, desc.get("start", 0.0), desc.get("arc", 2 * np.pi), desc.get("target"))
    if kind == "walk_around":
        return walk_around_path(desc["center"], desc["radius"], desc.get("height", 0.0), n)
    if kind == "linear":
        return linear_path(desc["start"], desc["end"], desc["target"], n)
    raise ValueError(f"unknown path kind {kind!r}")
