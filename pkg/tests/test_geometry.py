import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from dtsdf.geometry import (
    CameraIntrinsics,
    NonPositiveDepth,
    Se3,
    Sim3,
    look_at,
    orthonormalize,
    pixel_jacobian,
    project,
    se3_exp,
    se3_log,
    sim3_exp,
    so3_exp,
    so3_log,
    unproject,
    wedge,
)

finite = st.floats(-1.0, 1.0, allow_nan=False)
twist6 = arrays(np.float64, 6, elements=finite)
twist7 = arrays(np.float64, 7, elements=finite)
rot3 = arrays(np.float64, 3, elements=st.floats(-3.0, 3.0, allow_nan=False))


@given(rot3)
def test_so3_exp_matches_scipy(w):
    assert np.allclose(so3_exp(w), Rotation.from_rotvec(w).as_matrix(), atol=1e-12)


@given(rot3)
def test_so3_log_inverts_exp(w):
    R = so3_exp(w)
    assert np.allclose(so3_exp(so3_log(R)), R, atol=1e-10)


def test_so3_log_near_pi():
    w = np.array([0.0, 0.0, np.pi - 1e-9])
    assert np.allclose(so3_exp(so3_log(so3_exp(w))), so3_exp(w), atol=1e-8)


@given(twist6)
def test_se3_log_exp_round_trip(xi):
    assert np.allclose(se3_log(se3_exp(xi)), xi, atol=1e-9)


@given(twist6, twist6)
def test_se3_composition_and_inverse(a, b):
    A, B = se3_exp(a), se3_exp(b)
    assert np.allclose((A @ B).matrix, A.matrix @ B.matrix, atol=1e-12)
    assert np.allclose((A @ A.inverse()).matrix, np.eye(4), atol=1e-12)
    assert (A @ B).is_valid()


@given(twist7, twist7)
def test_sim3_composition_and_inverse(a, b):
    A, B = sim3_exp(a), sim3_exp(b)
    assert np.allclose((A @ B).matrix, A.matrix @ B.matrix, atol=1e-10)
    assert np.allclose((A @ A.inverse()).matrix, np.eye(4), atol=1e-10)
    assert np.isclose(A.log_scale, a[6])


@given(twist7)
def test_sim3_applies_scale(xi):
    S = sim3_exp(xi)
    p = np.array([[0.3, -0.2, 1.1], [1.0, 2.0, 3.0]])
    assert np.allclose(S.apply(p), (S.matrix[:3, :3] @ p.T).T + S.matrix[:3, 3])


def test_sim3_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        Sim3(np.eye(3), np.zeros(3), 0.0)


def test_se3_flags_reflection_as_invalid():
    assert not Se3(np.diag([1.0, 1.0, -1.0]), np.zeros(3)).is_valid()
    assert Se3.identity().is_valid()


def test_orthonormalize_repairs_drift():
    R = so3_exp([0.3, -0.1, 0.2]) + 1e-6 * np.random.default_rng(0).normal(size=(3, 3))
    Q = orthonormalize(R)
    assert np.allclose(Q @ Q.T, np.eye(3), atol=1e-14)
    assert np.isclose(np.linalg.det(Q), 1.0)
    assert np.abs(Q - R).max() < 1e-5


def test_wedge_is_cross_product():
    a, b = np.array([1.0, 2.0, 3.0]), np.array([-0.5, 0.1, 2.0])
    assert np.allclose(wedge(a) @ b, np.cross(a, b))


K = CameraIntrinsics(150.0, 150.0, 79.5, 59.5, 160, 120)


@given(
    st.floats(0.0, 159.0),
    st.floats(0.0, 119.0),
    st.floats(0.2, 8.0),
)
def test_project_unproject_round_trip(x, y, d):
    p = unproject(K, x, y, d)
    assert np.allclose(project(K, p), [x, y], atol=1e-9)


def test_project_rejects_points_behind_camera():
    with pytest.raises(NonPositiveDepth):
        project(K, np.array([0.0, 0.0, -1.0]))


def test_pixel_jacobian_finite_difference():
    p = np.array([0.2, -0.1, 1.3])
    J = pixel_jacobian(K, p)
    h = 1e-6
    Jn = np.stack([(project(K, p + h * e) - project(K, p - h * e)) / (2 * h) for e in np.eye(3)], axis=1)
    assert np.allclose(J, Jn, atol=1e-5)


def test_downsampled_intrinsics_keep_pixel_centres():
    Kd = K.downsampled()
    assert (Kd.width, Kd.height) == (80, 60)
    p = np.array([0.1, 0.05, 1.0])
    # pixel x in the fine image maps to (x - 0.5) / 2 in the coarse one
    assert np.allclose(project(Kd, p), (project(K, p) - 0.5) / 2)


def test_look_at_points_optical_axis_at_target():
    T = look_at((1.0, -0.8, 1.2), (0.0, 0.0, 0.4))
    c = T.inverse().apply(np.array([0.0, 0.0, 0.4]))
    assert np.allclose(c[:2], 0.0, atol=1e-12) and c[2] > 0


def test_backproject_depth_matches_unproject():
    depth = np.full((120, 160), 2.0)
    P = K.backproject_depth(depth)
    assert np.allclose(P[17, 33], unproject(K, 33, 17, 2.0))
