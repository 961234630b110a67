"""View-dependent combination of the directional fields and raycasting.

The six directional fields are merged into one regular TSDF that is only
valid for views close to the pose it was built for. Surfaces seen from their
back side, or stored in a direction their gradient does not agree with, get no
weight in the merge.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .directions import DIRECTION_VECTORS, direction_weights
from .frame import rgb_to_intensity
from .fusion import blocks_in_frustum
from .geometry import CameraIntrinsics, Se3
from .volume import BLOCK_SIZE, LOCAL_OFFSETS, BlockGrid, DirectionalVolume, local_index, pack_keys


@dataclass
class CombinePolicy:
    boot_frames: int = 5
    stale_frames: int = 50
    translation_threshold: float = 0.05
    rotation_threshold: float = 0.05 * np.pi / 2

    def __post_init__(self):
        if min(self.boot_frames, self.stale_frames, self.translation_threshold, self.rotation_threshold) <= 0:
            raise ValueError("combination thresholds must be positive")


def should_recombine(policy: CombinePolicy, frame_index: int, last_combine_index, pose: Se3, last_pose) -> bool:
    if last_combine_index is None or last_pose is None:
        return True
    if frame_index < policy.boot_frames:
        return True
    if frame_index - last_combine_index > policy.stale_frames:
        return True
    rel = last_pose.inverse() @ pose
    if np.linalg.norm(pose.translation - last_pose.translation) > policy.translation_threshold:
        return True
    return rel.angle > policy.rotation_threshold


_CORNERS = LOCAL_OFFSETS[[0, 1, 8, 9, 64, 65, 72, 73]]
_APRON_STEPS = _CORNERS[:, 2] * 81 + _CORNERS[:, 1] * 9 + _CORNERS[:, 0]

COMBINED_FIELDS = {
    "sdf": ((), np.float32),
    "weight": ((), np.float32),
    "color": ((3,), np.float32),
    "cweight": ((), np.float32),
    "mask": ((), np.uint8),
}


class CombinedTsdf(BlockGrid):
    """Regular TSDF merged for one viewpoint, with a dense block index for fast lookup."""

    def __init__(self, voxel_size: float, truncation: float, source_pose: Se3, source_frame_index: int = 0, frustum_margin: float = 0.125):
        super().__init__(voxel_size, COMBINED_FIELDS)
        self.truncation = float(truncation)
        self.source_pose = source_pose
        self.source_frame_index = source_frame_index
        self.frustum_margin = frustum_margin
        self._lo = np.zeros(3, dtype=np.int64)
        self._dense = np.full((0, 0, 0), -1, dtype=np.int64)
        self._apron: dict = {}
        self._apron_dense = self._dense

    def finalize(self) -> None:
        n = self.n_blocks
        if n == 0:
            self._dense = np.full((0, 0, 0), -1, dtype=np.int64)
            self._apron_dense = self._dense
            self._apron = {}
            return
        c = self.coords[:n]
        # blocks one step below each block in x/y/z: their corners can reach allocated data
        ghosts = np.unique(np.concatenate([c - o for o in _CORNERS[1:]]), axis=0)
        self._lo = np.minimum(c.min(axis=0), ghosts.min(axis=0))
        shape = np.maximum(c.max(axis=0), ghosts.max(axis=0)) - self._lo + 1
        self._dense = np.full(tuple(shape), -1, dtype=np.int64)
        rel = c - self._lo
        self._dense[rel[:, 0], rel[:, 1], rel[:, 2]] = np.arange(n)
        grel = ghosts - self._lo
        ghosts = ghosts[self._dense[grel[:, 0], grel[:, 1], grel[:, 2]] < 0]
        rows = np.concatenate([c, ghosts])
        self._apron_dense = np.full(tuple(shape), -1, dtype=np.int64)
        rrel = rows - self._lo
        self._apron_dense[rrel[:, 0], rrel[:, 1], rrel[:, 2]] = np.arange(rows.shape[0])
        self._build_aprons(rows, ("sdf", "weight", "color", "cweight"))

    def _build_aprons(self, rows: np.ndarray, names) -> None:
        """Copies of each block widened by one voxel from its +x/+y/+z neighbours.

        With the apron all eight trilinear corners of a point live in one
        array row, so a lookup needs a single block search. Layout is
        ``[row, z, y, x]``; rows cover allocated blocks plus empty blocks
        adjacent to them, and missing neighbours leave zero weight.
        """
        m = rows.shape[0]
        self._apron = {}
        own = self.find(rows)
        nb = {tuple(o): self.find(rows + o) for o in _CORNERS[1:]}
        for name in names:
            src = self.data[name][: self.n_blocks]
            tail = src.shape[2:]
            blocks = src.reshape((-1, 8, 8, 8) + tail)
            out = np.zeros((m, 9, 9, 9) + tail, dtype=src.dtype)
            have = np.flatnonzero(own >= 0)
            out[have, :8, :8, :8] = blocks[own[have]]
            for (dx, dy, dz), slots in nb.items():
                have = np.flatnonzero(slots >= 0)
                if have.size == 0:
                    continue
                zs, ys, xs = (slice(8, 9) if d else slice(0, 8) for d in (dz, dy, dx))
                zt, yt, xt = (slice(0, 1) if d else slice(0, 8) for d in (dz, dy, dx))
                out[have, zs, ys, xs] = blocks[slots[have]][:, zt, yt, xt]
            self._apron[name] = out.reshape((m * 729,) + tail)

    def _apron_rows(self, blocks: np.ndarray) -> np.ndarray:
        out = np.full(blocks.shape[0], -1, dtype=np.int64)
        if self._apron_dense.size == 0:
            return out
        rel = blocks - self._lo
        ok = np.all((rel >= 0) & (rel < np.array(self._apron_dense.shape)), axis=-1)
        out[ok] = self._apron_dense[rel[ok, 0], rel[ok, 1], rel[ok, 2]]
        return out

    def find(self, coords, dirs=0) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        out = np.full(coords.shape[0], -1, dtype=np.int64)
        if self._dense.size == 0:
            return out
        rel = coords - self._lo
        ok = np.all((rel >= 0) & (rel < np.array(self._dense.shape)), axis=-1)
        out[ok] = self._dense[rel[ok, 0], rel[ok, 1], rel[ok, 2]]
        return out

    def trilinear(self, points, dirs, weight_name: str, names):
        """Same result as the generic lookup, read from the apron copies."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = points.shape[0]
        if n == 0 or self.n_blocks == 0:
            return np.zeros(n, dtype=bool), [np.zeros((n,) + self.data[nm].shape[2:]) for nm in names]
        g = points / self.voxel_size
        v0 = np.floor(g).astype(np.int64)
        f = g - v0
        slots = self._apron_rows(v0 >> 3)
        ok = slots >= 0
        lv = v0 & 7
        base = np.where(ok, slots, 0) * 729 + lv[:, 2] * 81 + lv[:, 1] * 9 + lv[:, 0]
        flat = base[:, None] + _APRON_STEPS[None]
        wx, wy, wz = (np.stack([1.0 - f[:, k], f[:, k]], axis=1) for k in range(3))
        coef = (wz[:, :, None, None] * wy[:, None, :, None] * wx[:, None, None, :]).reshape(n, 8)
        coef *= ok[:, None] & (self._apron[weight_name][flat] > 0)
        csum = coef.sum(axis=1)
        valid = csum > 0
        coef = coef / np.where(valid, csum, 1.0)[:, None]
        out = []
        for name in names:
            v = self._apron[name][flat].astype(np.float64)
            out.append(np.einsum("nk,nk...->n...", coef, v))
        return valid, out

    def empty_exit(self, origin, rays, t) -> np.ndarray:
        """Ray parameter where the sample leaves a missing block's interior, else ``t``.

        Inside ``[8k, 8k+7]`` voxels of a missing block every trilinear corner is
        missing, so a ray can jump straight past that region.
        """
        pts = origin + t[:, None] * rays
        v0 = np.floor(pts / self.voxel_size).astype(np.int64)
        blocks = v0 >> 3
        missing = self.find(blocks) < 0
        out = t.copy()
        if not missing.any():
            return out
        lo = blocks[missing] * BLOCK_SIZE * self.voxel_size
        hi = lo + (BLOCK_SIZE - 1) * self.voxel_size
        r = rays[missing]
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo - origin) / r
            tb = (hi - origin) / r
        exit_t = np.nanmin(np.maximum(ta, tb), axis=-1)
        out[missing] = np.maximum(exit_t, t[missing])
        return out

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space box enclosing every block's voxel cells."""
        n = self.n_blocks
        c = self.coords[:n]
        lo = (c.min(axis=0) * BLOCK_SIZE - 0.5) * self.voxel_size
        hi = ((c.max(axis=0) + 1) * BLOCK_SIZE - 0.5) * self.voxel_size
        return lo, hi

    def sample(self, points):
        valid, (sdf,) = self.trilinear(points, 0, "weight", ["sdf"])
        return valid, sdf

    def gradient(self, points) -> tuple[np.ndarray, np.ndarray]:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        h = self.voxel_size
        grad = np.zeros_like(points)
        ok = np.ones(points.shape[0], dtype=bool)
        for axis in range(3):
            e = np.zeros(3)
            e[axis] = h
            vp, sp = self.sample(points + e)
            vm, sm = self.sample(points - e)
            ok &= vp & vm
            grad[:, axis] = sp - sm
        norm = np.linalg.norm(grad, axis=-1)
        ok &= norm > 1e-6 * h
        return np.where(ok[:, None], grad / np.where(ok, norm, 1.0)[:, None], 0.0), ok

    def color_at(self, points):
        valid, (col,) = self.trilinear(points, 0, "cweight", ["color"])
        return valid, col

    def mask_at(self, points) -> np.ndarray:
        """OR of the direction bits of the weighted corners around each point."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        v0 = np.floor(points / self.voxel_size).astype(np.int64)
        out = np.zeros(points.shape[0], dtype=np.uint8)
        for o in LOCAL_OFFSETS[[0, 1, 8, 9, 64, 65, 72, 73]]:
            _, (w, m) = self.gather(v0 + o, 0, ["weight", "mask"])
            out |= np.where(w > 0, m, 0).astype(np.uint8)
        return out


def _integer_gradients(volume: DirectionalVolume, coords: np.ndarray, direction: int, slots: np.ndarray, sdf: np.ndarray, wd: np.ndarray):
    """Six-neighbour sdf differences at voxel centers of the given blocks.

    Central where both neighbours carry weight, one-sided where only one does.
    Returns unnormalized gradients ``(b, 512, 3)`` and a validity mask.
    """
    b = slots.size
    vox = (coords[:, None, :] * BLOCK_SIZE + LOCAL_OFFSETS[None]).reshape(-1, 3)
    base_blocks = np.repeat(coords, 512, axis=0)
    base_slots = np.repeat(slots, 512)
    s0 = sdf.reshape(-1).astype(np.float64)
    ok = wd.reshape(-1) > 0
    grad = np.zeros((vox.shape[0], 3))
    for axis in range(3):
        e = np.zeros(3, dtype=np.int64)
        e[axis] = 1
        _, (sp, wp) = volume.gather(vox + e, direction, ["sdf", "weight"], base_slots, base_blocks)
        _, (sm, wm) = volume.gather(vox - e, direction, ["sdf", "weight"], base_slots, base_blocks)
        hp, hm = wp > 0, wm > 0
        sp, sm = sp.astype(np.float64), sm.astype(np.float64)
        g = np.where(hp & hm, 0.5 * (sp - sm), np.where(hp, sp - s0, np.where(hm, s0 - sm, 0.0)))
        ok &= hp | hm
        grad[:, axis] = g
    norm = np.linalg.norm(grad, axis=-1)
    ok &= norm > 1e-6
    return grad.reshape(b, 512, 3), norm.reshape(b, 512), ok.reshape(b, 512)


def combine_weight(volume: DirectionalVolume, direction: int, p, camera_center) -> np.ndarray:
    """Merge weight of one direction at world point(s) ``p`` using the interpolated field."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    s = volume.interpolate(direction, p)
    g, ok = volume.sdf_gradient(direction, p)
    r = p - np.asarray(camera_center, dtype=np.float64)
    r /= np.linalg.norm(r, axis=-1, keepdims=True)
    if volume.directional:
        wdir = direction_weights(g, volume.theta)[:, int(direction)]
    else:
        wdir = np.ones(p.shape[0])
    cos = np.maximum(np.sum(g * -r, axis=-1), 0.0)
    w = np.where(ok & s.valid, wdir * cos * s.weight, 0.0)
    return w if w.size > 1 else float(w[0])


def combine_weight_nograd(volume: DirectionalVolume, direction: int, p, camera_center) -> np.ndarray:
    """Merge weight with the direction axis standing in for a missing gradient."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    s = volume.interpolate(direction, p)
    r = p - np.asarray(camera_center, dtype=np.float64)
    r /= np.linalg.norm(r, axis=-1, keepdims=True)
    v = volume.direction_vectors()[int(direction)]
    cos = np.maximum(-r @ v, 0.0) if volume.directional else np.ones(p.shape[0])
    w = np.where(s.valid, s.weight * cos, 0.0)
    return w if w.size > 1 else float(w[0])


def _combine_chunk(volume: DirectionalVolume, coords: np.ndarray, camera_center: np.ndarray):
    b = coords.shape[0]
    x = (coords[:, None, :] * BLOCK_SIZE + LOCAL_OFFSETS[None]) * volume.voxel_size
    r = x - camera_center
    r /= np.maximum(np.linalg.norm(r, axis=-1, keepdims=True), 1e-12)
    shape = (b, 512)
    W = np.zeros(shape)
    S = np.zeros(shape)
    CW = np.zeros(shape)
    C = np.zeros(shape + (3,))
    mask = np.zeros(shape, dtype=np.uint8)
    # fallback accumulators for voxels whose present directions lack gradients
    Wf = np.zeros(shape)
    Sf = np.zeros(shape)
    CWf = np.zeros(shape)
    Cf = np.zeros(shape + (3,))
    maskf = np.zeros(shape, dtype=np.uint8)
    missing_grad = np.zeros(shape, dtype=bool)
    for d in range(volume.n_directions):
        slots = volume.find(coords, d)
        present = slots >= 0
        if not present.any():
            continue
        c_d, s_d = coords[present], slots[present]
        sdf = volume.data["sdf"][s_d].astype(np.float64)
        wd = volume.data["weight"][s_d].astype(np.float64)
        col = volume.data["color"][s_d].astype(np.float64)
        wc = volume.data["cweight"][s_d].astype(np.float64)
        rr = r[present]
        if volume.directional:
            g, gnorm, gok = _integer_gradients(volume, c_d, d, s_d, sdf, wd)
            n = g / np.where(gok, gnorm, 1.0)[..., None]
            wdir = direction_weights(n, volume.theta)[..., d]
            cos = np.maximum(np.sum(n * -rr, axis=-1), 0.0)
            w = np.where(gok & (wd > 0), wdir * cos * wd, 0.0)
            wf = np.where(wd > 0, wd * np.maximum(-rr @ DIRECTION_VECTORS[d], 0.0), 0.0)
            missing_grad[present] |= (wd > 0) & ~gok
        else:
            w = wd
            wf = np.zeros_like(wd)
        bit = np.uint8(1 << d)
        for acc_w, acc_s, acc_cw, acc_c, acc_m, ww in ((W, S, CW, C, mask, w), (Wf, Sf, CWf, Cf, maskf, wf)):
            acc_w[present] += ww
            acc_s[present] += ww * sdf
            cwt = ww * wc
            acc_cw[present] += cwt
            acc_c[present] += cwt[..., None] * col
            acc_m[present] |= np.where(ww > 0, bit, 0).astype(np.uint8)
    use_fb = (W <= 0) & missing_grad & (Wf > 0)
    W = np.where(use_fb, Wf, W)
    S = np.where(use_fb, Sf, S)
    CW = np.where(use_fb, CWf, CW)
    C = np.where(use_fb[..., None], Cf, C)
    mask = np.where(use_fb, maskf, mask)
    has = W > 0
    sdf = np.where(has, S / np.where(has, W, 1.0), 0.0)
    hc = CW > 0
    col = np.where(hc[..., None], C / np.where(hc, CW, 1.0)[..., None], 0.0)
    return sdf, W, col, CW, mask


def build_combined(
    volume: DirectionalVolume,
    pose: Se3,
    K: CameraIntrinsics,
    frame_index: int = 0,
    margin: float = 0.125,
    chunk_blocks: int = 128,
    workers: int = 1,
) -> CombinedTsdf:
    """Merge all directions for every allocated location in the widened view frustum."""
    from ._parallel import chunk_ranges, parallel_map

    combined = CombinedTsdf(volume.voxel_size, volume.truncation, pose, frame_index, margin)
    slots = blocks_in_frustum(volume, pose, K, margin_px=margin * max(K.width, K.height))
    if slots.size == 0:
        combined.finalize()
        return combined
    locations = np.unique(pack_keys(volume.coords[slots], 0))
    coords = np.stack([(locations >> 43) & 0xFFFFF, (locations >> 23) & 0xFFFFF, (locations >> 3) & 0xFFFFF], axis=-1) - (1 << 19)
    combined.allocate(coords, 0)
    cslots = combined.table.lookup(pack_keys(coords, 0))
    center = pose.translation
    ranges = chunk_ranges(coords.shape[0], chunk_blocks)
    results = parallel_map(lambda r: _combine_chunk(volume, coords[r[0] : r[1]], center), ranges, workers)
    for (a, b), (sdf, W, col, CW, mask) in zip(ranges, results):
        s = cslots[a:b]
        combined.data["sdf"][s] = sdf
        combined.data["weight"][s] = W
        combined.data["color"][s] = col
        combined.data["cweight"][s] = CW
        combined.data["mask"][s] = mask
    combined.finalize()
    return combined


# exact free-space test -------------------------------------------------------


def _march_to_transition(volume: DirectionalVolume, d: int, p: np.ndarray, toward: np.ndarray, max_dist: float):
    """First sign change from positive to non-positive walking from ``p`` along ``toward``."""
    step = 0.5 * volume.voxel_size
    prev = None
    t = 0.0
    while t <= max_dist:
        s = volume.interpolate(d, p + t * toward)
        if not s.valid[0]:
            if prev is not None:
                return None
            t += step
            continue
        cur = float(s.sdf[0])
        if prev is not None and prev > 0 >= cur:
            t0 = t - step
            return p + (t0 + step * prev / (prev - cur)) * toward
        prev = cur
        t += step
    return None


def exact_combined_lookup(volume: DirectionalVolume, p, camera_center, weight_floor: float = 2.0, near_band: float = 0.5):
    """Free-space decision by back-marching toward the camera.

    Returns ``(freespace, sdf)``; ``sdf`` is ``None`` when nothing usable is
    stored at ``p``.
    """
    p = np.asarray(p, dtype=np.float64)
    c = np.asarray(camera_center, dtype=np.float64)
    r = (p - c) / np.linalg.norm(p - c)
    dist = float(np.linalg.norm(p - c))
    entries = []
    for d in range(volume.n_directions):
        s = volume.interpolate(d, p[None])
        if not s.valid[0] or s.weight[0] < weight_floor:
            continue
        g, ok = volume.sdf_gradient(d, p[None])
        # information a direction is not meant to hold is ignored
        if volume.directional and (not ok[0] or direction_weights(g[0], volume.theta)[d] <= 0):
            continue
        entries.append((d, float(s.sdf[0]), float(s.weight[0]), g[0]))
    if not entries:
        return False, None
    free_dirs = [e for e in entries if e[1] > 0]
    occ_dirs = [e for e in entries if e[1] <= 0]
    freespace = False
    if free_dirs:
        freespace = True
        for d, _, _, _ in free_dirs:
            q = _march_to_transition(volume, d, p, -r, dist)
            if q is None:
                continue
            for dd in range(volume.n_directions):
                if dd == d:
                    continue
                sq = volume.interpolate(dd, q[None])
                if not sq.valid[0] or sq.weight[0] < weight_floor or sq.sdf[0] >= 0:
                    continue
                gq, okq = volume.sdf_gradient(dd, q[None])
                if okq[0] and float(gq[0] @ -r) > 0:
                    freespace = False
                    break
            if not freespace:
                break
    if freespace:
        chosen = free_dirs
        near = min(abs(e[1]) for e in entries) < near_band
        if near and occ_dirs:
            # both sides map the same surface: blend the camera-facing entries
            facing = [e for e in entries if float(e[3] @ -r) > 0]
            chosen = facing or free_dirs
    else:
        chosen = occ_dirs
    if not chosen:
        return freespace, None
    w = np.array([e[2] for e in chosen])
    s = np.array([e[1] for e in chosen])
    return freespace, float(w @ s / w.sum())


# raycasting ------------------------------------------------------------------


@dataclass
class RenderedView:
    points: np.ndarray  # world frame
    normals: np.ndarray  # world frame
    colors: np.ndarray
    intensity: np.ndarray
    depth: np.ndarray  # camera z, 0 where invalid
    valid: np.ndarray
    direction_mask: np.ndarray
    pose: Se3
    intrinsics: CameraIntrinsics
    stats: dict = field(default_factory=dict)

    def camera_points(self) -> np.ndarray:
        return np.where(self.valid[..., None], self.pose.inverse().apply(self.points), 0.0)

    def camera_normals(self) -> np.ndarray:
        return np.where(self.valid[..., None], self.normals @ self.pose.rotation, 0.0)


def _ray_box(origin, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
    return tmin, tmax


def raycast(combined: CombinedTsdf, pose: Se3, K: CameraIntrinsics, coarse_step: float = 0.75, refinements: int = 3) -> RenderedView:
    """Render depth, normals, color and direction bits by marching every pixel ray."""
    h, w = K.height, K.width
    xs, ys = K.pixel_grid()
    rays_c = K.unproject_points(xs, ys, np.ones_like(xs)).reshape(-1, 3)
    dz = 1.0 / np.linalg.norm(rays_c, axis=-1)
    rays_c = rays_c * dz[:, None]
    rays = rays_c @ pose.rotation.T
    origin = pose.translation
    n = rays.shape[0]
    tau = combined.truncation
    hit_t = np.full(n, np.nan)
    steps = 0
    if combined.n_blocks:
        lo, hi = combined.bounds()
        tb0, tb1 = _ray_box(origin, rays, lo, hi)
        t0 = np.maximum(K.z_min / dz, tb0)
        t1 = np.minimum(K.z_max / dz, tb1)
        active = np.flatnonzero(t0 < t1)
        t = t0.copy()
        prev_s = np.full(n, np.nan)
        prev_t = np.full(n, np.nan)
        min_step = 0.25 * combined.voxel_size
        while active.size:
            steps += 1
            pts = origin + t[active, None] * rays[active]
            ok, s = combined.sample(pts)
            ps = prev_s[active]
            cross = ok & (ps > 0) & (s <= 0)
            ci = active[cross]
            # secant refinement between the last positive and first non-positive sample
            a_t, a_s = prev_t[ci], ps[cross]
            b_t, b_s = t[ci], s[cross]
            est = a_t + (b_t - a_t) * a_s / (a_s - b_s)
            for _ in range(refinements):
                okm, sm = combined.sample(origin + est[:, None] * rays[ci])
                pos = okm & (sm > 0)
                neg = okm & ~pos
                a_t, a_s = np.where(pos, est, a_t), np.where(pos, sm, a_s)
                b_t, b_s = np.where(neg, est, b_t), np.where(neg, sm, b_s)
                est = np.where(okm, a_t + (b_t - a_t) * a_s / np.where(a_s - b_s != 0, a_s - b_s, 1.0), est)
            hit_t[ci] = est
            step = np.where(ok & (s > 0) & (s < 1.0), np.maximum(s * tau, min_step), coarse_step * tau)
            skip = ~ok
            if skip.any():
                ai = active[skip]
                step[skip] = np.maximum(step[skip], combined.empty_exit(origin, rays[ai], t[ai]) - t[ai])
            prev_s[active] = np.where(ok, s, np.nan)
            prev_t[active] = t[active]
            t[active] += step
            keep = ~cross & (t[active] <= t1[active])
            active = active[keep]
    hit = np.isfinite(hit_t)
    idx = np.flatnonzero(hit)
    pts = origin + hit_t[idx, None] * rays[idx]
    nrm, nok = combined.gradient(pts)
    facing = np.sum(nrm * -rays[idx], axis=-1) > 0
    good = nok & facing
    idx, pts, nrm = idx[good], pts[good], nrm[good]
    cok, col = combined.color_at(pts)
    mask_bits = combined.mask_at(pts)
    valid = np.zeros(n, dtype=bool)
    valid[idx] = True
    P = np.zeros((n, 3))
    N = np.zeros((n, 3))
    C = np.zeros((n, 3))
    M = np.zeros(n, dtype=np.uint8)
    D = np.zeros(n)
    P[idx], N[idx], M[idx] = pts, nrm, mask_bits
    C[idx] = np.where(cok[:, None], col, 0.0)
    D[idx] = hit_t[idx] * dz[idx]
    colors = C.reshape(h, w, 3)
    return RenderedView(
        P.reshape(h, w, 3),
        N.reshape(h, w, 3),
        colors,
        rgb_to_intensity(colors),
        D.reshape(h, w),
        valid.reshape(h, w),
        M.reshape(h, w),
        pose,
        K,
        {"march_steps": steps},
    )


def render_view(volume: DirectionalVolume, pose: Se3, K: CameraIntrinsics, frame_index: int = 0, workers: int = 1) -> RenderedView:
    """Combine for ``pose`` and raycast from the same pose."""
    return raycast(build_combined(volume, pose, K, frame_index, workers=workers), pose, K)
