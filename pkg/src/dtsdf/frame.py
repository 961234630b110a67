"""RGB-D frame container and image preprocessing.

Depth maps are float arrays in meters where ``0`` marks a missing measurement.
Normal maps use NaN for invalid pixels and are expressed in the camera frame,
oriented towards the camera.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, Se3

PYRAMID_DEPTH_SPREAD = 0.05


@dataclass(frozen=True)
class PyramidLevel:
    depth: np.ndarray
    intensity: np.ndarray
    normals: np.ndarray
    intrinsics: CameraIntrinsics

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0

    @property
    def points(self) -> np.ndarray:
        return self.intrinsics.backproject_depth(self.depth)


@dataclass(frozen=True)
class Frame:
    depth: np.ndarray
    color: np.ndarray
    intensity: np.ndarray
    normals: np.ndarray
    intrinsics: CameraIntrinsics
    timestamp: float = 0.0
    pyramid: list[PyramidLevel] = field(default_factory=list)

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0

    @property
    def points(self) -> np.ndarray:
        """Camera-frame points, zero where depth is invalid."""
        return self.intrinsics.backproject_depth(self.depth)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass(frozen=True)
class Keyframe:
    frame: Frame
    pose: Se3
    frame_index: int


@dataclass
class PreprocessConfig:
    outlier_threshold: float = 0.05
    depth_filter: bool = True
    depth_sigma_d: float = 5.0
    depth_sigma_r: float = 0.025
    depth_radius: int = 5
    normal_filter: bool = True
    normal_sigma_d: float = 2.5
    normal_sigma_r: float = 5.0  # degrees
    normal_radius: int = 5
    pyramid_levels: int = 3


def rgb_to_intensity(color: np.ndarray) -> np.ndarray:
    return color[..., 0] * 0.299 + color[..., 1] * 0.587 + color[..., 2] * 0.114


def pad_image(a: np.ndarray, pad: int, fill) -> np.ndarray:
    widths = [(pad, pad), (pad, pad)] + [(0, 0)] * (a.ndim - 2)
    return np.pad(a, widths, mode="constant", constant_values=fill)


def depth_outlier_filter(depth: np.ndarray, support_threshold: float = 0.05) -> np.ndarray:
    """Drop pixels with fewer than two 8-neighbours within ``support_threshold``."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = depth > 0
    padded = pad_image(depth, 1, 0.0)
    h, w = depth.shape
    support = np.zeros(depth.shape, dtype=np.int32)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            nb = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
            support += (nb > 0) & (np.abs(nb - depth) <= support_threshold)
    return np.where(valid & (support >= 2), depth, 0.0)


def bilateral_filter(image: np.ndarray, sigma_d: float, sigma_r: float, radius: int, valid=None) -> np.ndarray:
    """Edge-preserving smoothing of a scalar ``(H, W)`` or vector ``(H, W, C)`` map.

    Invalid pixels (``valid`` false; by default zeros for scalar maps and NaN
    for vector maps) neither contribute nor receive values.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    image = np.asarray(image, dtype=np.float64)
    vector = image.ndim == 3
    if valid is None:
        valid = np.all(np.isfinite(image), axis=-1) if vector else image > 0
    src = np.where(valid[..., None] if vector else valid, image, 0.0)
    h, w = valid.shape
    p_img = pad_image(src, radius, 0.0)
    p_val = pad_image(valid, radius, False)
    acc = np.zeros_like(src)
    wsum = np.zeros((h, w))
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            nb = p_img[radius + dy : radius + dy + h, radius + dx : radius + dx + w]
            nb_valid = p_val[radius + dy : radius + dy + h, radius + dx : radius + dx + w]
            diff = nb - src
            d2 = np.sum(diff * diff, axis=-1) if vector else diff * diff
            wgt = np.exp(-(dx * dx + dy * dy) / (2.0 * sigma_d**2) - d2 / (2.0 * sigma_r**2)) * nb_valid
            acc += (wgt[..., None] * nb) if vector else wgt * nb
            wsum += wgt
    with np.errstate(invalid="ignore", divide="ignore"):
        out = acc / (wsum[..., None] if vector else wsum)
    if vector:
        return np.where(valid[..., None], out, np.nan)
    return np.where(valid, out, 0.0)


def filter_normals(normals: np.ndarray, sigma_d: float = 2.5, sigma_r_deg: float = 5.0, radius: int = 5) -> np.ndarray:
    """Bilateral filter on a normal map, range kernel on the angle in degrees."""
    valid = np.all(np.isfinite(normals), axis=-1)
    n = np.where(valid[..., None], normals, 0.0)
    h, w = valid.shape
    p_n = pad_image(n, radius, 0.0)
    p_val = pad_image(valid, radius, False)
    acc = np.zeros_like(n)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            nb = p_n[radius + dy : radius + dy + h, radius + dx : radius + dx + w]
            nb_valid = p_val[radius + dy : radius + dy + h, radius + dx : radius + dx + w]
            ang = np.degrees(np.arccos(np.clip(np.sum(nb * n, axis=-1), -1.0, 1.0)))
            wgt = np.exp(-(dx * dx + dy * dy) / (2.0 * sigma_d**2) - ang * ang / (2.0 * sigma_r_deg**2)) * nb_valid
            acc += wgt[..., None] * nb
    norm = np.linalg.norm(acc, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = acc / norm
    return np.where(valid[..., None], out, np.nan)


def compute_normals(depth: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Normals from the cross product of horizontal and vertical point differences."""
    depth = np.asarray(depth, dtype=np.float64)
    P = K.backproject_depth(depth)
    valid = depth > 0
    Pp = pad_image(P, 1, 0.0)
    Vp = pad_image(valid, 1, False)
    h, w = depth.shape
    right, left = Pp[1 : h + 1, 2 : w + 2], Pp[1 : h + 1, 0:w]
    down, up = Pp[2 : h + 2, 1 : w + 1], Pp[0:h, 1 : w + 1]
    ok = valid & Vp[1 : h + 1, 2 : w + 2] & Vp[1 : h + 1, 0:w] & Vp[2 : h + 2, 1 : w + 1] & Vp[0:h, 1 : w + 1]
    n = np.cross(right - left, down - up)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    ok &= norm[..., 0] > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        n = n / norm
    flip = np.sum(n * P, axis=-1) > 0
    n[flip] *= -1.0
    return np.where(ok[..., None], n, np.nan)


def _pad_even(a: np.ndarray, fill, edge: bool = False) -> np.ndarray:
    h, w = a.shape[:2]
    widths = [(0, h % 2), (0, w % 2)] + [(0, 0)] * (a.ndim - 2)
    if edge:
        return np.pad(a, widths, mode="edge")
    return np.pad(a, widths, mode="constant", constant_values=fill)


def downsample_depth(depth: np.ndarray, spread: float = PYRAMID_DEPTH_SPREAD) -> np.ndarray:
    """2x2 reduction: mean of valid depths, or the nearest one across discontinuities."""
    d = _pad_even(depth, 0.0)
    h, w = d.shape
    blocks = d.reshape(h // 2, 2, w // 2, 2).transpose(0, 2, 1, 3).reshape(h // 2, w // 2, 4)
    valid = blocks > 0
    count = valid.sum(axis=-1)
    hi = np.where(valid, blocks, -np.inf).max(axis=-1)
    lo = np.where(valid, blocks, np.inf).min(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = blocks.sum(axis=-1) / count
    out = np.where(hi - lo < spread, mean, lo)
    return np.where(count > 0, out, 0.0)


def downsample_intensity(intensity: np.ndarray) -> np.ndarray:
    a = _pad_even(intensity, 0.0, edge=True)
    h, w = a.shape
    return a.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def build_pyramid(depth: np.ndarray, intensity: np.ndarray, K: CameraIntrinsics, levels: int, normals=None) -> list[PyramidLevel]:
    """Coarse-to-fine image pyramid; level 0 is the input."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if normals is None:
        normals = compute_normals(depth, K)
    pyramid = [PyramidLevel(depth, intensity, normals, K)]
    for _ in range(1, levels):
        prev = pyramid[-1]
        d = downsample_depth(prev.depth)
        k = prev.intrinsics.downsampled()
        pyramid.append(PyramidLevel(d, downsample_intensity(prev.intensity), compute_normals(d, k), k))
    return pyramid


def preprocess_frame(
    depth: np.ndarray,
    color: np.ndarray,
    K: CameraIntrinsics,
    timestamp: float = 0.0,
    config: PreprocessConfig | None = None,
) -> Frame:
    """Outlier rejection, bilateral filtering, normal estimation and pyramid."""
    cfg = config or PreprocessConfig()
    depth = np.asarray(depth, dtype=np.float64)
    depth = np.where((depth >= K.z_min) & (depth <= K.z_max), depth, 0.0)
    depth = depth_outlier_filter(depth, cfg.outlier_threshold)
    if cfg.depth_filter:
        depth = bilateral_filter(depth, cfg.depth_sigma_d, cfg.depth_sigma_r, cfg.depth_radius)
    normals = compute_normals(depth, K)
    if cfg.normal_filter:
        normals = filter_normals(normals, cfg.normal_sigma_d, cfg.normal_sigma_r, cfg.normal_radius)
    # the filtered field must stay camera-facing
    normals = np.where(np.isfinite(normals) & (np.sum(normals * K.backproject_depth(depth), axis=-1, keepdims=True) < 0), normals, np.nan)
    depth = np.where(np.all(np.isfinite(normals), axis=-1), depth, 0.0)
    color = np.asarray(color, dtype=np.float64)
    intensity = rgb_to_intensity(color)
    pyramid = build_pyramid(depth, intensity, K, cfg.pyramid_levels, normals=normals)
    return Frame(depth, color, intensity, normals, K, float(timestamp), pyramid)
