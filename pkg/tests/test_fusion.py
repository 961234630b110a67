import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dtsdf.directions import Direction
from dtsdf.frame import preprocess_frame
from dtsdf.fusion import FusionParams, blocks_in_frustum, carve_guard, fuse_frame, point_to_plane_sdf
from dtsdf.geometry import CameraIntrinsics, Se3, look_at
from dtsdf.io import Plane, SyntheticScene, render_synthetic_frame
from dtsdf.volume import DirectionalVolume

K = CameraIntrinsics(75.0, 75.0, 39.5, 29.5, 80, 60)


@given(st.floats(-0.5, 0.5), st.floats(0.01, 0.2))
def test_point_to_plane_sdf_clamped(offset, tau):
    s = point_to_plane_sdf([0, 0, 0], [0, 0, 1], [0, 0, offset], tau)
    assert np.isclose(s, np.clip(-offset / tau, -1, 1))


def test_point_to_plane_rejects_bad_tau():
    with pytest.raises(ValueError):
        point_to_plane_sdf([0, 0, 0], [0, 0, 1], [0, 0, 0], 0.0)


def test_carve_guard_marks_depth_edges():
    d = np.full((10, 10), 1.0)
    d[:, 5:] = 2.0
    g = carve_guard(d, 0.04, 2)
    assert not g[:, 3:7].any() and g[:, :3].all() and g[:, 7:].all()


def test_fusion_params_validation():
    with pytest.raises(ValueError):
        FusionParams(theta=0.5)
    with pytest.raises(ValueError):
        FusionParams(carve_weight=0.0)


def _wall_frame():
    scene = SyntheticScene([Plane((0.0, 0.0, 0.0), (0.0, 0.0, 1.0))])
    pose = look_at((0.0, 0.0, 1.0), (0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0))
    return render_synthetic_frame(scene, pose, K), pose


def test_fused_plane_has_correct_signed_distance():
    f, pose = _wall_frame()
    vol = DirectionalVolume(0.02, 0.08)
    vol.allocate_for_frame(f, pose)
    stats = fuse_frame(vol, f, pose)
    assert stats.voxels_updated > 0
    # only the direction facing the camera (+z) receives blocks
    assert set(np.unique(vol.dirs[: vol.n_blocks])) == {int(Direction.Z_POS)}
    p = np.array([[0.0, 0.0, 0.03], [0.01, -0.02, -0.02]])
    s = vol.interpolate(Direction.Z_POS, p)
    assert s.valid.all()
    assert np.allclose(s.sdf * vol.truncation, p[:, 2], atol=1e-6)


def test_weights_saturate_at_max():
    f, pose = _wall_frame()
    vol = DirectionalVolume(0.02, 0.08, max_weight=3.0)
    vol.allocate_for_frame(f, pose)
    for _ in range(6):
        fuse_frame(vol, f, pose)
    assert vol.data["weight"].max() <= 3.0


def test_carving_pulls_free_space_positive():
    f, pose = _wall_frame()
    vol = DirectionalVolume(0.02, 0.08)
    vol.allocate([[0, 0, 1]], Direction.Z_POS)  # voxels 0.16 .. 0.30 m above the wall
    stats = fuse_frame(vol, f, pose)
    assert stats.voxels_carved > 0
    w = vol.data["weight"][0]
    assert np.all(vol.data["sdf"][0][w > 0] == 1.0)
    assert fuse_frame(vol, f, pose, FusionParams(carve=False)).voxels_carved == 0


def test_frustum_culling():
    vol = DirectionalVolume(0.02, 0.08)
    vol.allocate([[0, 0, 0], [0, 0, 20], [50, 0, 0]], 0)
    pose = look_at((0.0, 0.0, 1.0), (0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0))
    assert list(blocks_in_frustum(vol, pose, K)) == [int(vol.find([[0, 0, 0]], 0)[0])]


def test_parallel_fusion_is_bitwise_identical():
    f, pose = _wall_frame()
    a, b = DirectionalVolume(0.02, 0.08), DirectionalVolume(0.02, 0.08)
    for v, workers in ((a, 1), (b, 4)):
        v.allocate_for_frame(f, pose)
        fuse_frame(v, f, pose, FusionParams(workers=workers, chunk_blocks=2))
    for name in ("sdf", "weight", "color", "cweight"):
        assert np.array_equal(a.data[name][: a.n_blocks], b.data[name][: b.n_blocks])
