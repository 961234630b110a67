"""Directional voxel-block storage.

Voxel ``i`` (integer triple) has its center at ``i * voxel_size`` in world
coordinates. Blocks group 8x8x8 voxels: voxel ``i`` lives in block ``i >> 3``
at local offset ``i & 7``, flattened as ``x + 8 y + 64 z``. A block is keyed by
its coordinates plus a direction index, so the six directional fields share
one hash table without aliasing.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .directions import DEFAULT_THETA, DIRECTION_VECTORS, Direction, direction_weights
from .geometry import Se3

BLOCK_SIZE = 8
BLOCK_VOXELS = BLOCK_SIZE**3

_COORD_BITS = 20
_COORD_OFFSET = 1 << (_COORD_BITS - 1)
_COORD_MASK = (1 << _COORD_BITS) - 1
EMPTY_KEY = -1

# local (x, y, z) offsets of the 512 voxels in storage order
_idx = np.arange(BLOCK_VOXELS)
LOCAL_OFFSETS = np.stack([_idx % 8, (_idx // 8) % 8, _idx // 64], axis=-1)
LOCAL_OFFSETS.setflags(write=False)


class CapacityExceeded(RuntimeError):
    pass


def pack_keys(coords, dirs) -> np.ndarray:
    """Pack block coordinates ``(N, 3)`` and direction ids ``(N,)`` into int64 keys."""
    c = np.asarray(coords, dtype=np.int64) + _COORD_OFFSET
    if c.size and (c.min() < 0 or c.max() > _COORD_MASK):
        raise ValueError("block coordinate out of the addressable range")
    d = np.asarray(dirs, dtype=np.int64)
    return (c[..., 0] << 43) | (c[..., 1] << 23) | (c[..., 2] << 3) | d


def unpack_keys(keys) -> tuple[np.ndarray, np.ndarray]:
    k = np.asarray(keys, dtype=np.int64)
    coords = np.stack([(k >> 43) & _COORD_MASK, (k >> 23) & _COORD_MASK, (k >> 3) & _COORD_MASK], axis=-1)
    return coords - _COORD_OFFSET, (k & 7).astype(np.int64)


def mix64(keys) -> np.ndarray:
    """splitmix64 finalizer."""
    z = np.asarray(keys, dtype=np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        z = z + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class BlockHashTable:
    """Open-addressing hash map from packed block keys to slot indices.

    Linear probing with batched, vectorized lookup and insertion. Keys that
    hash to the same bucket within one insertion batch are placed
    deterministically: the lowest batch index wins a contested bucket and the
    rest probe on.
    """

    def __init__(self, capacity: int = 1024):
        cap = 1 << max(4, int(capacity - 1).bit_length())
        self._keys = np.full(cap, EMPTY_KEY, dtype=np.int64)
        self._vals = np.full(cap, -1, dtype=np.int64)
        self._size = 0

    def __len__(self) -> int:
        return self._size

    @property
    def capacity(self) -> int:
        return self._keys.size

    def _home(self, keys: np.ndarray) -> np.ndarray:
        return (mix64(keys) & np.uint64(self.capacity - 1)).astype(np.int64)

    def lookup(self, keys) -> np.ndarray:
        """Slot of every key, ``-1`` where absent."""
        keys = np.asarray(keys, dtype=np.int64).ravel()
        out = np.full(keys.size, -1, dtype=np.int64)
        if keys.size == 0 or self._size == 0:
            return out
        mask = self.capacity - 1
        idx = self._home(keys)
        active = np.arange(keys.size)
        while active.size:
            stored = self._keys[idx[active]]
            hit = stored == keys[active]
            out[active[hit]] = self._vals[idx[active[hit]]]
            active = active[~(hit | (stored == EMPTY_KEY))]
            idx[active] = (idx[active] + 1) & mask
        return out

    def _grow(self, needed: int) -> None:
        cap = self.capacity
        while needed * 2 > cap:
            cap *= 2
        if cap == self.capacity:
            return
        live = self._keys != EMPTY_KEY
        keys, vals = self._keys[live], self._vals[live]
        self._keys = np.full(cap, EMPTY_KEY, dtype=np.int64)
        self._vals = np.full(cap, -1, dtype=np.int64)
        self._size = 0
        order = np.argsort(vals, kind="stable")
        self._place(keys[order], vals[order])

    def _place(self, keys: np.ndarray, vals: np.ndarray) -> None:
        mask = self.capacity - 1
        idx = self._home(keys)
        pending = np.arange(keys.size)
        while pending.size:
            slots = idx[pending]
            free = self._keys[slots] == EMPTY_KEY
            cand, cslots = pending[free], slots[free]
            buckets, first = np.unique(cslots, return_index=True)
            winners = cand[first]
            self._keys[buckets] = keys[winners]
            self._vals[buckets] = vals[winners]
            placed = np.zeros(keys.size, dtype=bool)
            placed[winners] = True
            pending = pending[~placed[pending]]
            idx[pending] = (idx[pending] + 1) & mask
        self._size += keys.size

    def insert(self, keys, vals) -> None:
        """Insert new, distinct keys. Existing keys must be filtered by the caller."""
        keys = np.asarray(keys, dtype=np.int64).ravel()
        vals = np.asarray(vals, dtype=np.int64).ravel()
        if keys.size == 0:
            return
        if np.unique(keys).size != keys.size:
            raise ValueError("duplicate keys in one insertion batch")
        self._grow(self._size + keys.size)
        self._place(keys, vals)


def local_index(local: np.ndarray) -> np.ndarray:
    return local[..., 0] + 8 * local[..., 1] + 64 * local[..., 2]


class BlockGrid:
    """Pool of voxel blocks keyed by (block coordinates, direction id).

    ``fields`` maps a name to ``(per-voxel shape, dtype)``; each field is stored
    as an array of shape ``(capacity, 512, *shape)``.
    """

    def __init__(self, voxel_size: float, fields: dict, max_blocks: int | None = None, initial_capacity: int = 256):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self.max_blocks = max_blocks
        self._field_spec = dict(fields)
        self.table = BlockHashTable(2 * initial_capacity)
        self.data = {name: np.zeros((initial_capacity, BLOCK_VOXELS) + tuple(shape), dtype=dt) for name, (shape, dt) in fields.items()}
        self.coords = np.zeros((initial_capacity, 3), dtype=np.int64)
        self.dirs = np.zeros(initial_capacity, dtype=np.int64)
        self.n_blocks = 0

    @property
    def block_extent(self) -> float:
        return BLOCK_SIZE * self.voxel_size

    def _reserve(self, n: int) -> None:
        cap = self.coords.shape[0]
        if n <= cap:
            return
        while cap < n:
            cap *= 2
        for name, arr in self.data.items():
            new = np.zeros((cap,) + arr.shape[1:], dtype=arr.dtype)
            new[: self.n_blocks] = arr[: self.n_blocks]
            self.data[name] = new
        for attr in ("coords", "dirs"):
            arr = getattr(self, attr)
            new = np.zeros((cap,) + arr.shape[1:], dtype=arr.dtype)
            new[: self.n_blocks] = arr[: self.n_blocks]
            setattr(self, attr, new)

    def find(self, coords, dirs) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        dirs = np.broadcast_to(np.asarray(dirs, dtype=np.int64), coords.shape[:1])
        return self.table.lookup(pack_keys(coords, dirs))

    def allocate(self, coords, dirs) -> np.ndarray:
        """Ensure the given blocks exist; returns slots of the newly created ones."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        dirs = np.broadcast_to(np.asarray(dirs, dtype=np.int64), coords.shape[:1])
        if coords.shape[0] == 0:
            return np.zeros(0, dtype=np.int64)
        keys = np.unique(pack_keys(coords, dirs))
        keys = keys[self.table.lookup(keys) < 0]
        n_new = keys.size
        if n_new == 0:
            return np.zeros(0, dtype=np.int64)
        if self.max_blocks is not None and self.n_blocks + n_new > self.max_blocks:
            raise CapacityExceeded(f"block budget {self.max_blocks} exhausted ({self.n_blocks} + {n_new} requested)")
        self._reserve(self.n_blocks + n_new)
        slots = np.arange(self.n_blocks, self.n_blocks + n_new)
        c, d = unpack_keys(keys)
        self.coords[slots] = c
        self.dirs[slots] = d
        self.table.insert(keys, slots)
        self.n_blocks += n_new
        return slots

    def block_origins(self, slots) -> np.ndarray:
        """World position of voxel (0,0,0) of each block."""
        return self.coords[slots] * self.block_extent

    def voxel_centers(self, slots) -> np.ndarray:
        """World voxel centers ``(len(slots), 512, 3)``."""
        base = self.coords[slots][:, None, :] * BLOCK_SIZE + LOCAL_OFFSETS[None]
        return base * self.voxel_size

    def gather(self, vox, dirs, names, base_slots=None, base_blocks=None):
        """Read fields at integer voxel positions ``vox`` ``(N, 3)``.

        Returns ``(slots, values)`` with slot ``-1`` and zero values where the
        block does not exist. ``base_slots``/``base_blocks`` let callers skip
        the hash lookup for voxels known to live in an already resolved block.
        """
        vox = np.asarray(vox, dtype=np.int64)
        blocks = vox >> 3
        local = local_index(vox & 7)
        if base_slots is None:
            slots = self.find(blocks, dirs)
        else:
            slots = base_slots.copy()
            moved = np.any(blocks != base_blocks, axis=-1)
            if moved.any():
                d = np.broadcast_to(np.asarray(dirs, dtype=np.int64), moved.shape)
                slots[moved] = self.find(blocks[moved], d[moved])
        ok = slots >= 0
        s = np.where(ok, slots, 0)
        values = []
        for name in names:
            v = self.data[name][s, local]
            zero = ~ok if v.ndim == 1 else ~ok[:, None]
            values.append(np.where(zero, 0, v))
        return slots, values

    def trilinear(self, points, dirs, weight_name: str, names):
        """Trilinear interpolation excluding corners with zero ``weight_name``.

        Returns ``(valid, [interpolated field for each name])``. Corner
        coefficients are renormalized over the corners that carry weight.
        Fields listed after ``weight_name`` that are themselves weights of a
        dependent quantity are interpolated with the same corner set.
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = points.shape[0]
        g = points / self.voxel_size
        v0 = np.floor(g).astype(np.int64)
        f = g - v0
        dirs = np.broadcast_to(np.asarray(dirs, dtype=np.int64), (n,))
        base_blocks = v0 >> 3
        base_slots = self.find(base_blocks, dirs)
        acc = None
        csum = np.zeros(n)
        all_names = [weight_name] + [nm for nm in names if nm != weight_name]
        for ox in (0, 1):
            for oy in (0, 1):
                for oz in (0, 1):
                    o = np.array([ox, oy, oz])
                    c = np.prod(np.where(o == 1, f, 1.0 - f), axis=-1)
                    _, vals = self.gather(v0 + o, dirs, all_names, base_slots, base_blocks)
                    c = np.where(vals[0] > 0, c, 0.0)
                    csum += c
                    contrib = [c.reshape((-1,) + (1,) * (v.ndim - 1)) * v for v in vals]
                    acc = contrib if acc is None else [a + b for a, b in zip(acc, contrib)]
        valid = csum > 0
        safe = np.where(valid, csum, 1.0)
        out = {nm: a / safe.reshape((-1,) + (1,) * (a.ndim - 1)) for nm, a in zip(all_names, acc)}
        return valid, [out[nm] for nm in names]


@dataclass
class Sample:
    """Interpolated voxel tuple(s); entries are meaningful where ``valid``."""

    sdf: np.ndarray
    weight: np.ndarray
    color: np.ndarray
    color_weight: np.ndarray
    valid: np.ndarray


VOXEL_FIELDS = {
    "sdf": ((), np.float32),
    "weight": ((), np.float32),
    "color": ((3,), np.float32),
    "cweight": ((), np.float32),
}
VOXEL_RECORD_BYTES = 6 * 4


class DirectionalVolume(BlockGrid):
    """Six directional TSDFs in one hash, or a single regular TSDF.

    With ``directional=False`` every block uses direction id 0 and the
    membership weight is identically one.
    """

    def __init__(
        self,
        voxel_size: float = 0.01,
        truncation: float | None = None,
        directional: bool = True,
        theta: float = DEFAULT_THETA,
        max_weight: float = 128.0,
        max_blocks: int | None = None,
    ):
        super().__init__(voxel_size, VOXEL_FIELDS, max_blocks)
        self.truncation = float(4.0 * voxel_size if truncation is None else truncation)
        if self.truncation < 2.0 * voxel_size - 1e-12:
            raise ValueError("truncation must be at least twice the voxel size")
        self.directional = bool(directional)
        self.theta = float(theta)
        self.max_weight = float(max_weight)

    @property
    def n_directions(self) -> int:
        return 6 if self.directional else 1

    def membership(self, normals: np.ndarray) -> np.ndarray:
        """Direction weights ``(..., n_directions)`` for world-frame normals."""
        if self.directional:
            return direction_weights(normals, self.theta)
        return np.ones(np.shape(normals)[:-1] + (1,))

    def direction_vectors(self) -> np.ndarray:
        return DIRECTION_VECTORS if self.directional else np.zeros((1, 3))

    # allocation -------------------------------------------------------------

    def blocks_on_segments(self, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """All blocks whose voxel cells a segment ``a -> b`` passes through.

        Returns ``(segment index, block coords)`` pairs (with repeats removed
        per segment). Block ``k`` covers voxel-unit coordinates
        ``[8k - 0.5, 8k + 7.5)`` along each axis.
        """
        a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
        b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
        n = a.shape[0]
        if n == 0:
            return np.zeros(0, dtype=np.int64), np.zeros((0, 3), dtype=np.int64)
        ua = (a / self.voxel_size + 0.5) / BLOCK_SIZE
        ub = (b / self.voxel_size + 0.5) / BLOCK_SIZE
        d = ub - ua
        span = int(np.ceil(np.max(np.abs(d)))) + 1
        lo = np.floor(np.minimum(ua, ub))
        ts = [np.zeros((n, 1)), np.ones((n, 1))]
        for k in range(1, span + 1):
            plane = lo + k
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (plane - ua) / d
            t = np.where((t > 0) & (t < 1) & np.isfinite(t), t, np.nan)
            ts.append(t)
        t = np.sort(np.concatenate(ts, axis=1), axis=1)  # NaN sorts last
        mid = 0.5 * (t[:, :-1] + t[:, 1:])
        ok = np.isfinite(mid) & (t[:, 1:] > t[:, :-1])
        seg = np.broadcast_to(np.arange(n)[:, None], mid.shape)[ok]
        pts = ua[seg] + mid[ok][:, None] * d[seg]
        blocks = np.floor(pts).astype(np.int64)
        # endpoints lying exactly on a boundary still touch the block they start in
        seg = np.concatenate([seg, np.arange(n), np.arange(n)])
        blocks = np.concatenate([blocks, np.floor(ua).astype(np.int64), np.floor(ub).astype(np.int64)])
        return seg, blocks

    def frame_block_keys(self, points_world: np.ndarray, normals_world: np.ndarray) -> np.ndarray:
        """Unique packed keys required by surface samples with the given normals."""
        w = self.membership(normals_world)
        tau = self.truncation
        seg, blocks = self.blocks_on_segments(points_world - tau * normals_world, points_world + tau * normals_world)
        keys = []
        for dirn in range(self.n_directions):
            active = w[seg, dirn] > 0
            if active.any():
                keys.append(np.unique(pack_keys(blocks[active], np.full(int(active.sum()), dirn))))
        if not keys:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(keys))

    def allocate_keys(self, keys: np.ndarray) -> int:
        coords, dirs = unpack_keys(keys)
        return int(self.allocate(coords, dirs).size)

    def allocate_points(self, points_world, normals_world) -> int:
        keys = self.frame_block_keys(np.asarray(points_world).reshape(-1, 3), np.asarray(normals_world).reshape(-1, 3))
        return self.allocate_keys(keys)

    def allocate_for_frame(self, frame, pose: Se3) -> int:
        """Allocate every block touched by the truncation band of a frame's surface."""
        valid = frame.valid & np.all(np.isfinite(frame.normals), axis=-1)
        if not valid.any():
            return 0
        p = pose.apply(frame.points[valid])
        n = pose.rotate(frame.normals[valid])
        return self.allocate_points(p, n)

    # queries ----------------------------------------------------------------

    def interpolate(self, direction: int, points) -> Sample:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        valid, (sdf, w) = self.trilinear(points, int(direction), "weight", ["sdf", "weight"])
        cvalid, (col, cw) = self.trilinear(points, int(direction), "cweight", ["color", "cweight"])
        col = np.where(cvalid[:, None], col, 0.0)
        return Sample(sdf, w, col, np.where(cvalid, cw, 0.0), valid)

    def sdf_gradient(self, direction: int, points) -> tuple[np.ndarray, np.ndarray]:
        """Normalized central-difference gradient of the interpolated sdf.

        Returns ``(gradients (N, 3), valid (N,))``.
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        h = self.voxel_size
        grad = np.zeros_like(points)
        ok = np.ones(points.shape[0], dtype=bool)
        for axis in range(3):
            e = np.zeros(3)
            e[axis] = h
            vp, (sp,) = self.trilinear(points + e, int(direction), "weight", ["sdf"])
            vm, (sm,) = self.trilinear(points - e, int(direction), "weight", ["sdf"])
            ok &= vp & vm
            grad[:, axis] = (sp - sm) / (2.0 * h)
        norm = np.linalg.norm(grad, axis=-1)
        ok &= norm >= 1e-6
        safe = np.where(ok, norm, 1.0)
        return np.where(ok[:, None], grad / safe[:, None], 0.0), ok

    # statistics -------------------------------------------------------------

    def block_counts(self) -> dict[str, int]:
        d = self.dirs[: self.n_blocks]
        if not self.directional:
            return {"regular": int(self.n_blocks)}
        return {Direction(i).label: int(np.count_nonzero(d == i)) for i in range(6)}

    def memory_bytes(self) -> int:
        return int(self.n_blocks) * BLOCK_VOXELS * VOXEL_RECORD_BYTES

    def slots_for_direction(self, direction: int) -> np.ndarray:
        return np.flatnonzero(self.dirs[: self.n_blocks] == int(direction))

    # persistence ------------------------------------------------------------

    def save(self, path) -> None:
        save_volume(self, path)

    @classmethod
    def load(cls, path) -> "DirectionalVolume":
        return load_volume(path)


def interpolate(volume: DirectionalVolume, direction: int, p):
    """Single-point interpolation; ``None`` where nothing is stored."""
    s = volume.interpolate(direction, np.asarray(p, dtype=np.float64).reshape(1, 3))
    if not s.valid[0]:
        return None
    return float(s.sdf[0]), float(s.weight[0]), s.color[0].copy(), float(s.color_weight[0])


def sdf_gradient(volume: DirectionalVolume, direction: int, p):
    g, ok = volume.sdf_gradient(direction, np.asarray(p, dtype=np.float64).reshape(1, 3))
    return g[0] if ok[0] else None


def allocate_for_frame(volume: DirectionalVolume, frame, pose: Se3) -> int:
    return volume.allocate_for_frame(frame, pose)


# snapshot format -------------------------------------------------------------
#
# little endian
#   header: magic b"DTSDFVOL", u32 version, u32 flags (bit 0: directional),
#           f64 voxel_size, f64 truncation, f64 theta, f64 max_weight, u64 block_count
#   block:  i32 bx, i32 by, i32 bz, u8 direction,
#           512 x (f32 sdf, f32 weight, f32 r, f32 g, f32 b, f32 color_weight)
# voxels within a block are ordered x fastest, then y, then z.

SNAPSHOT_MAGIC = b"DTSDFVOL"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<8sIIddddQ")
_VOXEL_DTYPE = np.dtype([("sdf", "<f4"), ("weight", "<f4"), ("color", "<f4", (3,)), ("cweight", "<f4")])
_BLOCK_DTYPE = np.dtype([("coords", "<i4", (3,)), ("direction", "u1"), ("voxels", _VOXEL_DTYPE, (BLOCK_VOXELS,))])


def save_volume(volume: DirectionalVolume, path) -> None:
    n = volume.n_blocks
    rec = np.zeros(n, dtype=_BLOCK_DTYPE)
    rec["coords"] = volume.coords[:n]
    rec["direction"] = volume.dirs[:n]
    rec["voxels"]["sdf"] = volume.data["sdf"][:n]
    rec["voxels"]["weight"] = volume.data["weight"][:n]
    rec["voxels"]["color"] = volume.data["color"][:n]
    rec["voxels"]["cweight"] = volume.data["cweight"][:n]
    header = _HEADER.pack(
        SNAPSHOT_MAGIC, SNAPSHOT_VERSION, int(volume.directional), volume.voxel_size, volume.truncation, volume.theta, volume.max_weight, n
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def load_volume(path) -> DirectionalVolume:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated volume snapshot")
    magic, version, flags, vs, tau, theta, wmax, n = _HEADER.unpack_from(raw)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: not a volume snapshot")
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {version}")
    body = raw[_HEADER.size :]
    if len(body) != n * _BLOCK_DTYPE.itemsize:
        raise ValueError(f"{path}: expected {n} blocks")
    rec = np.frombuffer(body, dtype=_BLOCK_DTYPE, count=n)
    vol = DirectionalVolume(vs, tau, bool(flags & 1), theta, wmax)
    vol.allocate(rec["coords"].astype(np.int64), rec["direction"].astype(np.int64))
    # allocate() orders slots by key; map records to their slots explicitly
    found = vol.find(rec["coords"].astype(np.int64), rec["direction"].astype(np.int64))
    vol.data["sdf"][found] = rec["voxels"]["sdf"]
    vol.data["weight"][found] = rec["voxels"]["weight"]
    vol.data["color"][found] = rec["voxels"]["color"]
    vol.data["cweight"][found] = rec["voxels"]["cweight"]
    return vol
