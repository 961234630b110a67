"""Rigid and similarity transforms, pinhole camera model and their derivatives.

Tangent vectors are ordered translation first: ``xi = (nu, omega)`` for SE3 and
``xi = (nu, omega, sigma)`` for Sim3, where ``sigma`` is the log of the scale.
Increments compose on the left, ``T' = exp(xi) @ T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_SMALL_ANGLE = 1e-8
_SMALL_SCALE = 1e-8


class NonPositiveDepth(ValueError):
    """A point at or behind the camera plane cannot be projected."""


def _frozen(a, shape) -> np.ndarray:
    arr = np.array(a, dtype=np.float64).reshape(shape)
    arr.setflags(write=False)
    return arr


def orthonormalize(R) -> np.ndarray:
    """Nearest rotation matrix; stops round-off from compounding over long chains."""
    U, _, Vt = np.linalg.svd(R)
    if np.linalg.det(U @ Vt) < 0:
        U[:, -1] *= -1.0
    return U @ Vt


def wedge(v) -> np.ndarray:
    """Skew-symmetric matrix with ``wedge(v) @ u == cross(v, u)``."""
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _wedge_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    W = wedge(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * W @ W
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * W + b * W @ W


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos_t))
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-6:
        return 0.5 * vee
    if np.pi - theta < 1e-6:
        # axis from the symmetric part; sign fixed by the residual antisymmetric part
        B = 0.5 * (R + np.eye(3))
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
        if axis @ vee < 0:
            axis = -axis
        return theta * axis / np.linalg.norm(axis)
    return theta / (2.0 * np.sin(theta)) * vee


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix in radians."""
    return float(np.arccos(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)))


@dataclass(frozen=True)
class Se3:
    """Rigid body transform ``x -> R x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))

    @classmethod
    def identity(cls) -> "Se3":
        return cls()

    @classmethod
    def from_matrix(cls, M) -> "Se3":
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def exp(cls, xi) -> "Se3":
        return se3_exp(xi)

    def log(self) -> np.ndarray:
        return se3_log(self)

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self) -> "Se3":
        Rt = self.rotation.T
        return Se3(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "Se3") -> "Se3":
        if isinstance(other, Sim3):
            return Sim3(self.rotation, self.translation) @ other
        return Se3(orthonormalize(self.rotation @ other.rotation), self.rotation @ other.translation + self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform points of shape ``(..., 3)``."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def rotate(self, vectors) -> np.ndarray:
        return np.asarray(vectors) @ self.rotation.T

    @property
    def angle(self) -> float:
        return rotation_angle(self.rotation)

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(np.abs(R.T @ R - np.eye(3)).max() < tol and abs(np.linalg.det(R) - 1.0) < tol)


@dataclass(frozen=True)
class Sim3:
    """Similarity transform ``x -> s R x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))
        object.__setattr__(self, "scale", float(self.scale))
        if not self.scale > 0:
            raise ValueError(f"Sim3 scale must be positive, got {self.scale}")

    @classmethod
    def identity(cls) -> "Sim3":
        return cls()

    @classmethod
    def from_se3(cls, T: Se3, scale: float = 1.0) -> "Sim3":
        return cls(T.rotation, T.translation, scale)

    @classmethod
    def exp(cls, xi) -> "Sim3":
        return sim3_exp(xi)

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.scale * self.rotation
        M[:3, 3] = self.translation
        return M

    @property
    def log_scale(self) -> float:
        return float(np.log(self.scale))

    def se3(self) -> Se3:
        """The rigid part, dropping the scale."""
        return Se3(self.rotation, self.translation)

    def inverse(self) -> "Sim3":
        Rt = self.rotation.T
        s = 1.0 / self.scale
        return Sim3(Rt, -s * (Rt @ self.translation), s)

    def __matmul__(self, other) -> "Sim3":
        if isinstance(other, Se3):
            other = Sim3.from_se3(other)
        return Sim3(
            orthonormalize(self.rotation @ other.rotation),
            self.scale * (self.rotation @ other.translation) + self.translation,
            self.scale * other.scale,
        )

    def __rmatmul__(self, other):
        if isinstance(other, Se3):
            return Sim3.from_se3(other) @ self
        return NotImplemented

    def apply(self, points) -> np.ndarray:
        return self.scale * (np.asarray(points) @ self.rotation.T) + self.translation

    def rotate(self, vectors) -> np.ndarray:
        return np.asarray(vectors) @ self.rotation.T


def se3_exp(xi) -> Se3:
    """Exponential map ``se3 -> SE3`` for ``xi = (nu, omega)``."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    nu, omega = xi[:3], xi[3:]
    theta = float(np.linalg.norm(omega))
    W = wedge(omega)
    W2 = W @ W
    if theta < _SMALL_ANGLE:
        R = np.eye(3) + W + 0.5 * W2
        V = np.eye(3) + 0.5 * W + W2 / 6.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        R = np.eye(3) + (s / theta) * W + ((1.0 - c) / theta**2) * W2
        V = np.eye(3) + ((1.0 - c) / theta**2) * W + ((theta - s) / theta**3) * W2
    return Se3(R, V @ nu)


def se3_log(T: Se3) -> np.ndarray:
    """Inverse of :func:`se3_exp` for rotation angles below pi."""
    omega = so3_log(T.rotation)
    theta = float(np.linalg.norm(omega))
    W = wedge(omega)
    if theta < _SMALL_ANGLE:
        V_inv = np.eye(3) - 0.5 * W + (W @ W) / 12.0
    else:
        half = 0.5 * theta
        coef = (1.0 - half * np.cos(half) / np.sin(half)) / theta**2
        V_inv = np.eye(3) - 0.5 * W + coef * (W @ W)
    return np.concatenate([V_inv @ T.translation, omega])


def _sim3_v_coefficients(theta: float, sigma: float) -> tuple[float, float, float]:
    """Coefficients of ``V = a I + b W + c W^2``, with ``V = int_0^1 e^{sigma t} R(t omega) dt``."""
    if abs(sigma) < _SMALL_SCALE:
        a = 1.0 + 0.5 * sigma
    else:
        a = np.expm1(sigma) / sigma
    if theta < _SMALL_ANGLE:
        if abs(sigma) < _SMALL_SCALE:
            b = 0.5 + sigma / 3.0
            c = 1.0 / 6.0 + sigma / 8.0
        else:
            es = np.exp(sigma)
            b = ((sigma - 1.0) * es + 1.0) / sigma**2
            c = (es * (sigma**2 - 2.0 * sigma + 2.0) - 2.0) / (2.0 * sigma**3)
        return a, b, c
    es = np.exp(sigma)
    st, ct = np.sin(theta), np.cos(theta)
    denom = sigma**2 + theta**2
    int_sin = (es * (sigma * st - theta * ct) + theta) / denom
    int_cos = (es * (sigma * ct + theta * st) - sigma) / denom
    b = int_sin / theta
    c = (a - int_cos) / theta**2
    return a, b, c


def sim3_exp(xi) -> Sim3:
    """Exponential map ``sim3 -> Sim3`` for ``xi = (nu, omega, sigma)``."""
    xi = np.asarray(xi, dtype=np.float64).reshape(7)
    nu, omega, sigma = xi[:3], xi[3:6], float(xi[6])
    theta = float(np.linalg.norm(omega))
    W = wedge(omega)
    a, b, c = _sim3_v_coefficients(theta, sigma)
    V = a * np.eye(3) + b * W + c * (W @ W)
    return Sim3(so3_exp(omega), V @ nu, np.exp(sigma))


def se3_point_action_jacobian(p) -> np.ndarray:
    """Derivative of ``exp(xi) p`` at ``xi = 0``; shape ``(..., 3, 6)``."""
    p = np.asarray(p, dtype=np.float64)
    J = np.zeros(p.shape[:-1] + (3, 6))
    J[..., :, :3] = np.eye(3)
    J[..., :, 3:] = -_wedge_batch(p)
    return J


def sim3_point_action_jacobian(A, D, p) -> np.ndarray:
    """Derivative of ``A exp(xi) D p`` at ``xi = 0``; shape ``(..., 3, 7)``.

    Columns are translation, rotation, log-scale. ``A`` and ``D`` may be
    :class:`Se3` or :class:`Sim3`; the linear part of ``A`` includes its scale.
    """
    A = A if isinstance(A, Sim3) else Sim3.from_se3(A)
    y = D.apply(p)
    J = np.zeros(y.shape[:-1] + (3, 7))
    J[..., :, :3] = np.eye(3)
    J[..., :, 3:6] = -_wedge_batch(y)
    J[..., :, 6] = y
    return A.scale * np.einsum("ij,...jk->...ik", A.rotation, J)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    z_min: float = 0.1
    z_max: float = 6.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.z_min < self.z_max):
            raise ValueError("depth range must satisfy 0 < z_min < z_max")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def downsampled(self) -> "CameraIntrinsics":
        """Intrinsics of an image reduced by 2x2 averaging."""
        return CameraIntrinsics(
            self.fx / 2.0,
            self.fy / 2.0,
            (self.cx + 0.5) / 2.0 - 0.5,
            (self.cy + 0.5) / 2.0 - 0.5,
            (self.width + 1) // 2,
            (self.height + 1) // 2,
            self.z_min,
            self.z_max,
        )

    def project_points(self, p: np.ndarray) -> np.ndarray:
        """Vectorised projection; rows with ``z <= 0`` come back as NaN."""
        p = np.asarray(p, dtype=np.float64)
        z = p[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(z > 0, 1.0 / z, np.nan)
        return np.stack([self.fx * p[..., 0] * inv + self.cx, self.fy * p[..., 1] * inv + self.cy], axis=-1)

    def unproject_points(self, x, y, d) -> np.ndarray:
        x, y, d = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (x, y, d)))
        return np.stack([d * (x - self.cx) / self.fx, d * (y - self.cy) / self.fy, d], axis=-1)

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(np.arange(self.width, dtype=np.float64), np.arange(self.height, dtype=np.float64))

    def backproject_depth(self, depth: np.ndarray) -> np.ndarray:
        """Camera-frame points ``(H, W, 3)`` of a depth map; zero depth gives zero points."""
        xs, ys = self.pixel_grid()
        return self.unproject_points(xs, ys, depth)


def project(K: CameraIntrinsics, p) -> np.ndarray:
    """Pixel coordinates of a camera-frame point ``p``; raises for ``z <= 0``."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p[..., 2] <= 0):
        raise NonPositiveDepth("cannot project a point with z <= 0")
    return K.project_points(p)


def unproject(K: CameraIntrinsics, x, y, d) -> np.ndarray:
    if np.any(np.asarray(d) <= 0):
        raise NonPositiveDepth("depth must be positive")
    return K.unproject_points(x, y, d)


def projection_jacobian(p) -> np.ndarray:
    """Derivative of ``(x/z, y/z)`` with respect to ``(x, y, z)``, shape ``(..., 2, 3)``."""
    p = np.asarray(p, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    if np.any(z <= 0):
        raise NonPositiveDepth("projection derivative undefined for z <= 0")
    J = np.zeros(p.shape[:-1] + (2, 3))
    J[..., 0, 0] = 1.0 / z
    J[..., 0, 2] = -x / z**2
    J[..., 1, 1] = 1.0 / z
    J[..., 1, 2] = -y / z**2
    return J


def pixel_jacobian(K: CameraIntrinsics, p: np.ndarray) -> np.ndarray:
    """Derivative of the pixel coordinates of ``p`` (intrinsics applied)."""
    J = projection_jacobian(p)
    J[..., 0, :] *= K.fx
    J[..., 1, :] *= K.fy
    return J


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Se3:
    """World-from-camera pose of a camera at ``eye`` looking at ``target``.

    Camera axes follow the usual vision convention: x right, y down, z forward.
    """
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(-up, z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Se3(np.stack([x, y, z], axis=1), eye)
