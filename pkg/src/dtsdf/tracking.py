"""Frame-to-model tracking: weighted point-to-plane ICP with optional photometric term.

Pose convention: the tracker estimates ``dT`` mapping points from the current
camera frame into the camera frame of the rendered view, so the world pose of
the frame is ``view.pose @ dT``. Increments are applied on the left,
``dT <- exp(xi) @ dT``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from ._parallel import tree_sum
from .frame import Frame, Keyframe, downsample_intensity
from .geometry import CameraIntrinsics, Se3, Sim3, pixel_jacobian, se3_exp, sim3_exp, wedge
from .weights import WEIGHT_MODES, icp_weight
from .render import RenderedView

PHOTO_MODES = ("off", "f2f", "f2kf", "f2r")


class TrackingLost(RuntimeError):
    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class SingularSystem(RuntimeError):
    pass


class ScaleDiverged(RuntimeError):
    pass


@dataclass
class IcpConfig:
    min_step: float = 1e-6
    max_iters_coarse: int = 20
    max_iters_fine: int = 50
    depth_outlier_coarse: float = 0.05
    depth_outlier_fine: float = 0.005
    intensity_outlier_coarse: float = 0.175
    intensity_outlier_fine: float = 0.05
    lambda_photo: float = 0.1
    weight_mode: str = "proposed"
    photo_mode: str = "off"
    keyframe_interval: int = 10
    min_gradient_threshold: float = 0.01
    normal_agreement: float = 0.5
    min_inlier_fraction: float = 0.1
    levels: int = 3
    damping_init: float = 1e-4
    damping_ceiling: float = 1e7
    workers: int = 1

    def __post_init__(self):
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}")
        if self.photo_mode not in PHOTO_MODES:
            raise ValueError(f"photo_mode must be one of {PHOTO_MODES}")
        positive = (
            self.min_step,
            self.depth_outlier_coarse,
            self.depth_outlier_fine,
            self.intensity_outlier_coarse,
            self.intensity_outlier_fine,
        )
        if min(positive) <= 0 or self.max_iters_coarse < 0 or self.max_iters_fine < 1:
            raise ValueError("thresholds must be positive")
        if self.depth_outlier_fine > self.depth_outlier_coarse or self.intensity_outlier_fine > self.intensity_outlier_coarse:
            raise ValueError("fine thresholds must not exceed coarse thresholds")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")

    def limits(self, level: int) -> tuple[int, float, float]:
        """(iteration cap, depth outlier, intensity outlier) of a pyramid level."""
        if level == 0:
            return self.max_iters_fine, self.depth_outlier_fine, self.intensity_outlier_fine
        return self.max_iters_coarse, self.depth_outlier_coarse, self.intensity_outlier_coarse


# normal equations ------------------------------------------------------------


@dataclass
class NormalEquations:
    H: np.ndarray
    g: np.ndarray
    inlier_count: int = 0
    residual_sum: float = 0.0  # sum of w r^2

    @classmethod
    def zeros(cls, dim: int) -> "NormalEquations":
        return cls(np.zeros((dim, dim)), np.zeros(dim))

    def __add__(self, other: "NormalEquations") -> "NormalEquations":
        return NormalEquations(self.H + other.H, self.g + other.g, self.inlier_count + other.inlier_count, self.residual_sum + other.residual_sum)

    def scaled(self, lam: float) -> "NormalEquations":
        return NormalEquations(lam * self.H, lam * self.g, self.inlier_count, lam * self.residual_sum)


def accumulate_normal_equations(r, J, w, workers: int = 1, dim: int | None = None) -> NormalEquations:
    """``H = 2 sum w J J^T``, ``g = 2 sum w J r`` with a fixed binary-tree summation."""
    r = np.asarray(r, dtype=np.float64).ravel()
    w = np.asarray(w, dtype=np.float64).ravel()
    J = np.asarray(J, dtype=np.float64)
    if r.size == 0:
        d = dim if dim is not None else (J.shape[-1] if J.ndim == 2 else 6)
        return NormalEquations.zeros(d)
    d = J.shape[1]
    wJ = w[:, None] * J
    rows = np.concatenate([(wJ[:, :, None] * J[:, None, :]).reshape(r.size, d * d), wJ * r[:, None], (w * r * r)[:, None]], axis=1)
    total = tree_sum(rows, workers)
    H = 2.0 * total[: d * d].reshape(d, d)
    H = 0.5 * (H + H.T)
    g = 2.0 * total[d * d : d * d + d]
    return NormalEquations(H, g, int(r.size), float(total[-1]))


@dataclass
class Damping:
    mu: float | None = None
    nu: float = 2.0


def _solve(ne: NormalEquations, damping: Damping, ceiling: float) -> np.ndarray:
    dim = ne.g.size
    if not np.any(ne.H) or ne.inlier_count == 0:
        raise SingularSystem("no constraints in the normal equations")
    if damping.mu is None:
        damping.mu = 1e-4 * float(np.max(np.diag(ne.H)))
    while True:
        try:
            c = cho_factor(ne.H + damping.mu * np.eye(dim))
            return cho_solve(c, -ne.g)
        except LinAlgError:
            damping.mu = max(damping.mu * damping.nu, 1e-12)
            damping.nu *= 2.0
            if damping.mu > ceiling:
                raise SingularSystem("factorization failed at the damping ceiling") from None


def solve_and_update(ne: NormalEquations, deltaT, damping: Damping, evaluate=None, ceiling: float = 1e7):
    """One damped step. ``evaluate(candidate)`` returns the objective on the same associations.

    Returns ``(new deltaT, damping, step norm, accepted)``. Without an
    evaluator every step is accepted.
    """
    xi = _solve(ne, damping, ceiling)
    step = float(np.linalg.norm(xi))
    if step == 0.0:
        return deltaT, damping, 0.0, True
    cand = _retract(xi, deltaT)
    if evaluate is None:
        return cand, damping, step, True
    predicted = -(ne.g @ xi + 0.5 * xi @ ne.H @ xi)
    actual = ne.residual_sum - evaluate(cand)
    rho = actual / predicted if predicted > 0 else -1.0
    if rho > 0:
        damping.mu *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
        damping.nu = 2.0
        return cand, damping, step, True
    damping.mu *= damping.nu
    damping.nu *= 2.0
    return deltaT, damping, step, False


def _retract(xi: np.ndarray, T):
    if xi.size == 7:
        return sim3_exp(xi) @ (T if isinstance(T, Sim3) else Sim3.from_se3(T))
    if isinstance(T, Sim3):
        return sim3_exp(np.append(xi, 0.0)) @ T
    return se3_exp(xi) @ T


# residuals -------------------------------------------------------------------


def _nearest_pixel(K: CameraIntrinsics, y: np.ndarray):
    z = y[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.floor(K.fx * y[:, 0] / z + K.cx + 0.5)
        v = np.floor(K.fy * y[:, 1] / z + K.cy + 0.5)
    ok = (z > 0) & (u >= 0) & (u <= K.width - 1) & (v >= 0) & (v <= K.height - 1)
    return ok, np.where(ok, u, 0).astype(np.int64), np.where(ok, v, 0).astype(np.int64)


def _point_jacobian(y: np.ndarray, dim: int) -> np.ndarray:
    """d(exp(xi) y)/dxi at 0: ``[I | -y^ | y]`` truncated to ``dim`` columns."""
    J = np.zeros(y.shape[:-1] + (3, dim))
    J[..., :, :3] = np.eye(3)
    J[..., 0, 4], J[..., 0, 5] = y[..., 2], -y[..., 1]
    J[..., 1, 3], J[..., 1, 5] = -y[..., 2], y[..., 0]
    J[..., 2, 3], J[..., 2, 4] = y[..., 1], -y[..., 0]
    if dim == 7:
        J[..., :, 6] = y
    return J


@dataclass
class GeometricAssociation:
    p: np.ndarray  # frame points (camera of the frame)
    q: np.ndarray  # rendered points (camera of the view)
    n: np.ndarray  # rendered normals (camera of the view)
    w: np.ndarray

    def residuals(self, T) -> np.ndarray:
        return np.sum((self.q - T.apply(self.p)) * self.n, axis=-1)


def geometric_residual(p, n_p, w, view_q, view_n, view_valid, Kv: CameraIntrinsics, T, depth_threshold: float, normal_agreement: float = 0.5, dim: int = 6):
    """Projective association and point-to-plane residuals.

    Returns ``(r, J, association)`` for the accepted points, where
    ``r = <q - T p, n>`` and ``J = (-n, -(T p) x n)`` (plus ``-<n, T p>`` for
    the scale coordinate).
    """
    y = T.apply(p)
    ok, u, v = _nearest_pixel(Kv, y)
    ok &= view_valid[v, u]
    q = view_q[v, u]
    n = view_n[v, u]
    ok &= np.sum(T.rotate(n_p) * n, axis=-1) >= normal_agreement
    r = np.sum((q - y) * n, axis=-1)
    ok &= np.abs(r) <= depth_threshold
    idx = np.flatnonzero(ok)
    y, n = y[idx], n[idx]
    J = -np.einsum("ni,nij->nj", n, _point_jacobian(y, dim))
    assoc = GeometricAssociation(p[idx], q[idx], n, w[idx])
    return r[idx], J, assoc


def bilinear(img: np.ndarray, valid: np.ndarray | None, u: np.ndarray, v: np.ndarray):
    """Bilinear value and its exact derivative in (u, v).

    Returns ``(ok, value, du, dv)``; ``ok`` requires all four taps inside the
    image (and valid, when a mask is given).
    """
    h, w = img.shape
    ok = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (v >= 0) & (u <= w - 1) & (v <= h - 1)
    uu = np.where(ok, u, 0.0)
    vv = np.where(ok, v, 0.0)
    x0 = np.minimum(np.floor(uu).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(vv).astype(np.int64), max(h - 2, 0))
    a = uu - x0
    b = vv - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    i00, i10, i01, i11 = img[y0, x0], img[y0, x1], img[y1, x0], img[y1, x1]
    if valid is not None:
        ok &= valid[y0, x0] & valid[y0, x1] & valid[y1, x0] & valid[y1, x1]
    val = (1 - a) * (1 - b) * i00 + a * (1 - b) * i10 + (1 - a) * b * i01 + a * b * i11
    du = (1 - b) * (i10 - i00) + b * (i11 - i01)
    dv = (1 - a) * (i01 - i00) + a * (i11 - i10)
    return ok, val, du, dv


@dataclass
class PhotometricAssociation:
    p: np.ndarray
    i_now: np.ndarray
    w: np.ndarray
    I_ref: np.ndarray
    ref_valid: np.ndarray | None
    T_rs: Se3
    K: CameraIntrinsics
    threshold: float

    def residuals(self, T) -> np.ndarray:
        y = self.T_rs.apply(T.apply(self.p))
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.K.fx * y[:, 0] / y[:, 2] + self.K.cx
            v = self.K.fy * y[:, 1] / y[:, 2] + self.K.cy
        ok, val, _, _ = bilinear(self.I_ref, self.ref_valid, u, v)
        ok &= y[:, 2] > 0
        r = self.i_now - val
        return np.where(ok, r, self.threshold)


def photometric_residual(p, i_now, w, I_ref, ref_valid, T_rs, T, K: CameraIntrinsics, intensity_threshold: float, min_gradient: float = 0.01, dim: int = 6):
    """Intensity residuals ``I_now(x) - I_ref(pi(K T_rs T p))`` and their Jacobians.

    ``i_now`` holds the current intensity at each point's own pixel.
    """
    Tp = T.apply(p)
    y = T_rs.apply(Tp)
    z = y[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * y[:, 0] / z + K.cx
        v = K.fy * y[:, 1] / z + K.cy
    ok, val, du, dv = bilinear(I_ref, ref_valid, u, v)
    ok &= z > 0
    r = i_now - val
    ok &= np.abs(r) <= intensity_threshold
    ok &= np.hypot(du, dv) >= min_gradient
    idx = np.flatnonzero(ok)
    y, Tp = y[idx], Tp[idx]
    grad = np.stack([du[idx], dv[idx]], axis=-1)
    Jpix = pixel_jacobian(K, y)  # (n, 2, 3)
    A = T_rs if isinstance(T_rs, Sim3) else Sim3.from_se3(T_rs)
    Jpt = A.scale * np.einsum("ij,njk->nik", A.rotation, _point_jacobian(Tp, dim))
    J = -np.einsum("ni,nij,njk->nk", grad, Jpix, Jpt)
    assoc = PhotometricAssociation(p[idx], i_now[idx], w[idx], I_ref, ref_valid, T_rs, K, intensity_threshold)
    return r[idx], J, assoc


# tracking --------------------------------------------------------------------


@dataclass
class TrackingReport:
    frame_index: int = -1
    translation: list = field(default_factory=list)
    quaternion: list = field(default_factory=list)
    iterations: list = field(default_factory=list)  # per level, coarse to fine
    inliers: list = field(default_factory=list)
    photometric_inliers: list = field(default_factory=list)
    residual_geometric: float = 0.0
    residual_photometric: float = 0.0
    inlier_fraction: float = 0.0
    recombined: bool = False
    scale: float | None = None
    log_scale: float | None = None
    compensated_log_scale: float | None = None
    sensor_id: int | None = None
    status: str = "ok"
    hessian_norm_geometric: float = 0.0
    hessian_norm_photometric: float = 0.0

    def set_pose(self, pose) -> None:
        from .io import pose_to_tum

        se3 = pose.se3() if isinstance(pose, Sim3) else pose
        vals = pose_to_tum(se3)
        self.translation = [float(x) for x in vals[:3]]
        self.quaternion = [float(x) for x in vals[3:]]

    def to_json_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _level_data(frame: Frame, level: int, weight_mode: str):
    lv = frame.pyramid[level] if frame.pyramid else frame
    K = lv.intrinsics
    valid = (lv.depth > 0) & np.all(np.isfinite(lv.normals), axis=-1)
    idx = np.flatnonzero(valid.ravel())
    P = lv.points.reshape(-1, 3)[idx]
    N = lv.normals.reshape(-1, 3)[idx]
    z = P[:, 2]
    angle = None
    if weight_mode == "nguyen":
        ray = P / np.linalg.norm(P, axis=-1, keepdims=True)
        angle = np.arccos(np.clip(np.sum(N * -ray, axis=-1), -1.0, 1.0))
    w = icp_weight(np.clip(z, K.z_min, K.z_max), K.z_min, K.z_max, weight_mode, 0.0 if angle is None else angle)
    return idx, P, N, w, lv.intensity.reshape(-1)[idx], K


def _downsample_valid(valid: np.ndarray) -> np.ndarray:
    return downsample_intensity(valid.astype(np.float64)) >= 1.0


def _reference_pyramid(config: IcpConfig, view: RenderedView, keyframe: Keyframe | None, prev_frame: Frame | None, levels: int):
    """Intensity images (with validity) and the reference transform for the photometric term."""
    mode = config.photo_mode
    if mode == "off":
        return None, None
    if mode == "f2r":
        imgs, valids = [view.intensity], [view.valid]
        for _ in range(1, levels):
            imgs.append(downsample_intensity(np.where(valids[-1], imgs[-1], 0.0)))
            valids.append(_downsample_valid(valids[-1]))
        return list(zip(imgs, valids)), Se3.identity()
    if mode == "f2f":
        ref = prev_frame
        T_rs = Se3.identity()
    else:
        if keyframe is None:
            return None, None
        ref = keyframe.frame
        same = np.array_equal(keyframe.pose.matrix, view.pose.matrix)
        T_rs = Se3.identity() if same else keyframe.pose.inverse() @ view.pose
    if ref is None:
        return None, None
    pyr = ref.pyramid or []
    out = [(pyr[k].intensity if k < len(pyr) else None, None) for k in range(levels)]
    return out, T_rs


def _run_level(config, level, frame, view_q, view_n, view_valid, Kv, ref, T_rs, T, dim, freeze_scale=False):
    iters_cap, depth_thr, int_thr = config.limits(level)
    idx, P, N, w, inten, K = _level_data(frame, level, config.weight_mode)
    damping = Damping()
    it = 0
    ne = None
    info = {"iterations": 0, "inliers": 0, "photo_inliers": 0, "geom": 0.0, "photo": 0.0, "Hg": 0.0, "Hp": 0.0}
    need = True
    use_photo = ref is not None and ref[0] is not None and config.lambda_photo > 0
    solve_dim = 6 if freeze_scale else dim
    while it < iters_cap:
        if need:
            rg, Jg, ag = geometric_residual(P, N, w, view_q, view_n, view_valid, Kv, T, depth_thr, config.normal_agreement, dim)
            neg = accumulate_normal_equations(rg, Jg[:, :solve_dim], ag.w, config.workers, solve_dim)
            ne = neg
            ap = None
            if use_photo:
                rp, Jp, ap = photometric_residual(P, inten, w, ref[0], ref[1], T_rs, T, K, int_thr, config.min_gradient_threshold, dim)
                nep = accumulate_normal_equations(rp, Jp[:, :solve_dim], ap.w, config.workers, solve_dim)
                ne = neg + nep.scaled(config.lambda_photo)
                info["photo_inliers"] = nep.inlier_count
                info["photo"] = nep.residual_sum
                info["Hp"] = float(np.linalg.norm(nep.H))
            info["inliers"] = neg.inlier_count
            info["geom"] = neg.residual_sum
            info["Hg"] = float(np.linalg.norm(neg.H))
            need = False

            def evaluate(Tc, ag=ag, ap=ap):
                e = float(tree_sum(ag.w * ag.residuals(Tc) ** 2))
                if ap is not None:
                    e += config.lambda_photo * float(tree_sum(ap.w * ap.residuals(Tc) ** 2))
                return e

        try:
            T_new, damping, step, accepted = solve_and_update(ne, T, damping, evaluate, config.damping_ceiling)
        except SingularSystem:
            # nothing to align at this level; the inlier check decides
            break
        it += 1
        if accepted:
            T = T_new
            need = True
        if step < config.min_step or damping.mu > config.damping_ceiling:
            break
    info["iterations"] = it
    info["valid"] = int(idx.size)
    return T, info


def _view_camera_maps(view: RenderedView):
    return view.camera_points(), view.camera_normals(), view.valid


def _track(frame, view, config, keyframe, prev_frame, T0, dim, freeze_scale=False):
    levels = min(config.levels, len(frame.pyramid) if frame.pyramid else 1)
    view_q, view_n, view_valid = _view_camera_maps(view)
    refs, T_rs = _reference_pyramid(config, view, keyframe, prev_frame, levels)
    report = TrackingReport()
    T = T0
    infos = []
    for level in range(levels - 1, -1, -1):
        ref = refs[level] if refs is not None else None
        T, info = _run_level(config, level, frame, view_q, view_n, view_valid, view.intrinsics, ref, T_rs, T, dim, freeze_scale)
        infos.append(info)
        report.iterations.append(info["iterations"])
        report.inliers.append(info["inliers"])
        report.photometric_inliers.append(info["photo_inliers"])
    fine = infos[-1]
    report.residual_geometric = fine["geom"]
    report.residual_photometric = fine["photo"]
    report.hessian_norm_geometric = fine["Hg"]
    report.hessian_norm_photometric = fine["Hp"]
    report.inlier_fraction = fine["inliers"] / fine["valid"] if fine["valid"] else 0.0
    return T, report


def track_frame(
    frame: Frame,
    view: RenderedView,
    config: IcpConfig | None = None,
    keyframe: Keyframe | None = None,
    prev_frame: Frame | None = None,
    initial: Se3 | None = None,
) -> tuple[Se3, TrackingReport]:
    """Estimate the world pose of ``frame`` against a rendered view.

    ``initial`` is the starting world pose guess (default: the view pose).
    Raises :class:`TrackingLost` when too few geometric inliers remain.
    """
    config = config or IcpConfig()
    T0 = Se3.identity() if initial is None else view.pose.inverse() @ initial
    dT, report = _track(frame, view, config, keyframe, prev_frame, T0, 6)
    pose = view.pose @ dT
    report.set_pose(pose)
    if report.inlier_fraction < config.min_inlier_fraction:
        report.status = "lost"
        raise TrackingLost(f"inlier fraction {report.inlier_fraction:.3f} below {config.min_inlier_fraction}", report)
    return pose, report


def compensated_log_scale(log_scale: float, anchor_log_scale: float) -> float:
    """Sensor log-scale relative to the anchor sensor."""
    return log_scale - anchor_log_scale


def track_frame_sim3(
    frame: Frame,
    view: RenderedView,
    config: IcpConfig | None = None,
    anchor_log_scale: float | None = None,
    initial: Sim3 | None = None,
    freeze_scale: bool = False,
    keyframe: Keyframe | None = None,
    prev_frame: Frame | None = None,
) -> tuple[Sim3, TrackingReport]:
    """Pose and depth scale of ``frame`` against a rendered view.

    The similarity maps the frame's (mis-scaled) camera points into the world.
    The sensor's depth factor is the inverse of its scale, so
    ``report.log_scale = -log(scale)``; with ``anchor_log_scale`` the report
    also carries the compensated value.
    """
    config = config or IcpConfig()
    if initial is None:
        S0 = Sim3.identity()
    else:
        S0 = Sim3.from_se3(view.pose.inverse()) @ initial
    dS, report = _track(frame, view, config, keyframe, prev_frame, S0, 7, freeze_scale)
    pose = Sim3.from_se3(view.pose) @ dS
    report.set_pose(pose)
    report.scale = float(pose.scale)
    report.log_scale = float(-np.log(pose.scale))
    if anchor_log_scale is not None:
        report.compensated_log_scale = compensated_log_scale(report.log_scale, anchor_log_scale)
    if abs(np.log(pose.scale)) > np.log(2.0):
        report.status = "scale-diverged"
        raise ScaleDiverged(f"scale {pose.scale:.4f} left [0.5, 2]")
    if report.inlier_fraction < config.min_inlier_fraction:
        report.status = "lost"
        raise TrackingLost(f"inlier fraction {report.inlier_fraction:.3f} below {config.min_inlier_fraction}", report)
    return pose, report


def select_keyframe(frame_index: int, current: Keyframe | None, interval: int = 10) -> bool:
    """True when ``frame_index`` should become the new keyframe."""
    return current is None or frame_index % interval == 0


def relative_transform(keyframe_pose: Se3, render_pose: Se3) -> Se3:
    """Transform from the rendered view's camera into the keyframe camera."""
    return keyframe_pose.inverse() @ render_pose


__all__ = [
    "IcpConfig",
    "NormalEquations",
    "TrackingLost",
    "SingularSystem",
    "ScaleDiverged",
    "TrackingReport",
    "accumulate_normal_equations",
    "solve_and_update",
    "geometric_residual",
    "photometric_residual",
    "track_frame",
    "track_frame_sim3",
    "select_keyframe",
    "icp_weight",
    "wedge",
]
