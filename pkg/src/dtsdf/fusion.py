"""Voxel-projection integration of RGB-D frames into a directional volume."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._parallel import chunk_ranges, parallel_map
from .directions import DEFAULT_THETA, direction_weight, direction_weights  # noqa: F401  (re-exported)
from .frame import Frame
from .geometry import Se3
from .volume import BLOCK_SIZE, DirectionalVolume
from .weights import icp_weight


@dataclass
class FusionParams:
    theta: float = DEFAULT_THETA
    carve: bool = True
    carve_weight: float = 1.0
    carve_guard_radius: int = 2
    weight_mode: str = "proposed"
    use_depth_weight: bool = True
    use_angle_weight: bool = True
    chunk_blocks: int = 128
    workers: int = 1

    def __post_init__(self):
        if not (np.pi / 4 < self.theta <= np.pi / 2):
            raise ValueError("theta must lie in (pi/4, pi/2]")
        if self.carve_weight <= 0:
            raise ValueError("carve_weight must be positive")


@dataclass
class FusionStats:
    blocks_in_view: int = 0
    voxels_updated: int = 0
    voxels_carved: int = 0


def point_to_plane_sdf(p, n, x, tau: float) -> np.ndarray:
    """``<p - x, n> / tau`` clamped to [-1, 1]."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    p, n, x = (np.asarray(a, dtype=np.float64) for a in (p, n, x))
    return np.clip(np.sum((p - x) * n, axis=-1) / tau, -1.0, 1.0)


def carve_guard(depth: np.ndarray, tau: float, radius: int = 2) -> np.ndarray:
    """True where no valid depth within ``radius`` pixels differs by more than ``tau``."""
    h, w = depth.shape
    valid = depth > 0
    pd = np.pad(depth, radius, mode="constant")
    ok = valid.copy()
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            nb = pd[radius + dy : radius + dy + h, radius + dx : radius + dx + w]
            ok &= ~((nb > 0) & (np.abs(nb - depth) > tau))
    return ok


def blocks_in_frustum(volume, pose: Se3, K, margin_px: float = 0.0, slots=None) -> np.ndarray:
    """Slots of blocks whose bounding sphere overlaps the (widened) view frustum."""
    if slots is None:
        slots = np.arange(volume.n_blocks)
    if slots.size == 0:
        return slots
    ext = volume.block_extent
    centers = (volume.coords[slots] + (BLOCK_SIZE - 1) / (2.0 * BLOCK_SIZE)) * ext
    radius = 0.5 * np.sqrt(3.0) * ext
    c = pose.inverse().apply(centers)
    z = c[:, 2]
    keep = (z > -radius) & (z < K.z_max + radius)
    zs = np.maximum(z, 1e-6)
    u = K.fx * c[:, 0] / zs + K.cx
    v = K.fy * c[:, 1] / zs + K.cy
    r_px = np.where(z > radius, max(K.fx, K.fy) * radius / np.maximum(z - radius, 1e-6), np.inf)
    keep &= (u > -margin_px - r_px) & (u < K.width - 1 + margin_px + r_px)
    keep &= (v > -margin_px - r_px) & (v < K.height - 1 + margin_px + r_px)
    return slots[keep]


def _sample_color(color: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear color lookup (clamped at the border).

    Depth is associated with the nearest pixel, but colors are interpolated so
    that the rounding of voxel projections does not shift the texture.
    """
    h, w = color.shape[:2]
    uu = np.clip(np.nan_to_num(u), 0.0, w - 1.0)
    vv = np.clip(np.nan_to_num(v), 0.0, h - 1.0)
    x0 = np.minimum(np.floor(uu).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(vv).astype(np.int64), max(h - 2, 0))
    a = (uu - x0)[..., None]
    b = (vv - y0)[..., None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return (1 - a) * (1 - b) * color[y0, x0] + a * (1 - b) * color[y0, x1] + (1 - a) * b * color[y1, x0] + a * b * color[y1, x1]


class _FrameContext:
    """Per-pixel quantities needed when updating voxels."""

    def __init__(self, volume: DirectionalVolume, frame: Frame, pose: Se3, params: FusionParams):
        K = frame.intrinsics
        self.K = K
        self.depth = frame.depth
        self.points = frame.points
        normals = np.where(np.isfinite(frame.normals), frame.normals, 0.0)
        self.normals = normals
        self.valid = frame.valid & np.all(np.isfinite(frame.normals), axis=-1)
        z = np.where(self.valid, frame.depth, K.z_min)
        w = np.ones(frame.depth.shape)
        if params.use_depth_weight:
            w = w * icp_weight(np.clip(z, K.z_min, K.z_max), K.z_min, K.z_max, params.weight_mode)
        if params.use_angle_weight:
            with np.errstate(invalid="ignore", divide="ignore"):
                ray = self.points / np.linalg.norm(self.points, axis=-1, keepdims=True)
            w = w * np.maximum(np.sum(normals * -np.nan_to_num(ray), axis=-1), 0.0)
        self.pixel_weight = np.where(self.valid, w, 0.0)
        if volume.directional:
            self.membership = direction_weights(pose.rotate(normals), volume.theta)
        else:
            self.membership = np.ones(frame.depth.shape + (1,))
        self.membership[~self.valid] = 0.0
        self.guard = carve_guard(frame.depth, volume.truncation, params.carve_guard_radius) if params.carve else None
        self.color = frame.color
        self.R_inv = pose.rotation.T
        self.t = pose.translation


def _fuse_chunk(volume: DirectionalVolume, ctx: _FrameContext, params: FusionParams, slots: np.ndarray):
    K = ctx.K
    tau = volume.truncation
    x = volume.voxel_centers(slots).reshape(-1, 3)
    xc = (x - ctx.t) @ ctx.R_inv.T
    z = xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uf = K.fx * xc[:, 0] / z + K.cx
        vf = K.fy * xc[:, 1] / z + K.cy
    u = np.floor(uf + 0.5)
    v = np.floor(vf + 0.5)
    inside = (z > 0) & (u >= 0) & (u <= K.width - 1) & (v >= 0) & (v <= K.height - 1)
    idx = np.flatnonzero(inside)
    ui = u[idx].astype(np.int64)
    vi = v[idx].astype(np.int64)
    keep = ctx.valid[vi, ui]
    idx, ui, vi = idx[keep], ui[keep], vi[keep]
    xc, z, uf, vf = xc[idx], z[idx], uf[idx], vf[idx]
    p = ctx.points[vi, ui]
    n = ctx.normals[vi, ui]
    # the stored normal faces the camera, so the signed distance is measured against -n
    d_raw = np.sum((xc - p) * n, axis=-1) / tau
    dirs = np.repeat(volume.dirs[slots], 512)[idx]
    w = ctx.pixel_weight[vi, ui] * ctx.membership[vi, ui, dirs]

    upd = (np.abs(d_raw) <= 1.0) & (w > 0)
    carve = np.zeros_like(upd)
    if params.carve:
        carve = (d_raw > 1.0) & (z < ctx.depth[vi, ui]) & ctx.guard[vi, ui]
    touched = upd | carve
    t = np.flatnonzero(touched)
    if t.size == 0:
        return 0, 0
    upd, carve, d_raw, w = upd[t], carve[t], d_raw[t], w[t]
    flat = idx[t]
    bi = slots[flat // 512]
    li = flat % 512

    sdf = volume.data["sdf"][bi, li].astype(np.float64)
    wd = volume.data["weight"][bi, li].astype(np.float64)
    wmax = volume.max_weight
    obs = np.where(upd, d_raw, 1.0)
    wobs = np.where(upd, w, params.carve_weight)
    wsum = wd + wobs
    volume.data["sdf"][bi, li] = (wd * sdf + wobs * obs) / wsum
    volume.data["weight"][bi, li] = np.minimum(wsum, wmax)

    dist = np.linalg.norm(xc[t] - p[t], axis=-1)
    wcobs = np.where(upd, w * (1.0 - np.minimum(1.0, dist / tau)), 0.0)
    c = np.flatnonzero(wcobs > 0)
    if c.size:
        bc, lc, wcobs = bi[c], li[c], wcobs[c]
        col = volume.data["color"][bc, lc].astype(np.float64)
        wc = volume.data["cweight"][bc, lc].astype(np.float64)
        cobs = _sample_color(ctx.color, uf[t][c], vf[t][c])
        csum = wc + wcobs
        volume.data["color"][bc, lc] = (wc[:, None] * col + wcobs[:, None] * cobs) / csum[:, None]
        volume.data["cweight"][bc, lc] = np.minimum(csum, wmax)
    return int(upd.sum()), int(carve.sum())


def fuse_frame(volume: DirectionalVolume, frame: Frame, pose: Se3, params: FusionParams | None = None) -> FusionStats:
    """Project every allocated voxel in view into the frame and update it.

    In-band voxels take a weighted running average of the point-to-plane
    distance. Voxels observed in front of the band are carved toward +1 with a
    constant weight unless a depth edge lies nearby.
    """
    params = params or FusionParams(theta=volume.theta)
    ctx = _FrameContext(volume, frame, pose, params)
    slots = blocks_in_frustum(volume, pose, frame.intrinsics)
    stats = FusionStats(blocks_in_view=int(slots.size))
    if slots.size == 0:
        return stats
    chunks = [slots[a:b] for a, b in chunk_ranges(slots.size, params.chunk_blocks)]
    results = parallel_map(lambda s: _fuse_chunk(volume, ctx, params, s), chunks, params.workers)
    stats.voxels_updated = sum(r[0] for r in results)
    stats.voxels_carved = sum(r[1] for r in results)
    return stats
