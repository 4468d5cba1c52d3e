"""Tests for camera models, projection, and depth-map unprojection."""

import numpy as np
import pytest

from dualstream import camgeo
from dualstream.camgeo import CameraModel, look_at_pose, unproject
from dualstream.errors import FrameError


def _pinhole(pose=None, res=(8, 8)):
    if pose is None:
        pose = np.eye(4)
    return CameraModel(kind="pinhole", fx=10.0, fy=12.0, cx=3.5, cy=3.5,
                       pose=pose, resolution=res)


def _ortho(pose=None, res=(8, 8)):
    if pose is None:
        pose = np.eye(4)
    return CameraModel(kind="orthographic", fx=7.0, fy=7.0, cx=3.5, cy=3.5,
                       pose=pose, resolution=res)


def test_pinhole_projection_formula():
    cam = _pinhole()
    pts = np.array([[0.1, -0.2, 2.0]])
    uv, depth, behind = camgeo.project(pts, cam)
    np.testing.assert_allclose(uv[0], [10.0 * 0.1 / 2.0 + 3.5,
                                       12.0 * -0.2 / 2.0 + 3.5])
    np.testing.assert_allclose(depth, [2.0])
    assert not behind[0]


def test_pinhole_behind_flag():
    cam = _pinhole()
    _, _, behind = camgeo.project(np.array([[0.0, 0.0, -1.0],
                                            [0.0, 0.0, 0.0],
                                            [0.0, 0.0, 1.0]]), cam)
    np.testing.assert_array_equal(behind, [True, True, False])


def test_orthographic_ignores_depth_in_uv():
    cam = _ortho()
    pts = np.array([[0.2, 0.1, 1.0], [0.2, 0.1, 9.0]])
    uv, depth, behind = camgeo.project(pts, cam)
    np.testing.assert_allclose(uv[0], uv[1])
    np.testing.assert_allclose(depth, [1.0, 9.0])
    assert not behind.any()


def test_unproject_project_roundtrip_pinhole():
    rng = np.random.default_rng(10)
    pose = look_at_pose(np.array([0.3, -0.5, 0.4]),
                        np.array([0.1, 0.9, -0.2]),
                        np.array([0.0, 0.0, 1.0]))
    cam = _pinhole(pose=pose)
    depth = rng.uniform(0.5, 3.0, size=(8, 8))
    pm = unproject(depth, cam)
    assert pm.valid.all()
    world = camgeo.to_world(pm, cam)
    uv, d, behind = camgeo.project(world.points.reshape(-1, 3), cam)
    v, u = np.mgrid[0:8, 0:8].astype(np.float64)
    np.testing.assert_allclose(uv[:, 0], u.reshape(-1), atol=1e-9)
    np.testing.assert_allclose(uv[:, 1], v.reshape(-1), atol=1e-9)
    np.testing.assert_allclose(d, depth.reshape(-1), atol=1e-9)
    assert not behind.any()


def test_unproject_roundtrip_orthographic():
    rng = np.random.default_rng(11)
    cam = _ortho()
    depth = rng.uniform(0.5, 3.0, size=(8, 8))
    pm = unproject(depth, cam)
    uv, d, _ = camgeo.project(pm.points.reshape(-1, 3), cam)
    v, u = np.mgrid[0:8, 0:8].astype(np.float64)
    np.testing.assert_allclose(uv[:, 0], u.reshape(-1), atol=1e-9)
    np.testing.assert_allclose(d, depth.reshape(-1), atol=1e-9)


def test_unproject_marks_invalid_pixels():
    cam = _pinhole()
    depth = np.ones((8, 8))
    depth[2, 3] = 0.0
    depth[4, 5] = np.nan
    pm = unproject(depth, cam)
    assert not pm.valid[2, 3]
    assert not pm.valid[4, 5]
    assert pm.valid.sum() == 62


def test_look_at_pose_is_right_handed_and_rigid():
    rng = np.random.default_rng(12)
    for _ in range(10):
        eye = rng.uniform(-2, 2, 3)
        fwd = rng.standard_normal(3)
        pose = look_at_pose(eye, fwd, np.array([0.0, 0.0, 1.0]))
        r = pose[:3, :3]
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) > 0.999
        # camera z axis points along the requested forward direction
        np.testing.assert_allclose(r[2], fwd / np.linalg.norm(fwd), atol=1e-12)
        # eye maps to the camera origin
        np.testing.assert_allclose(pose[:3, :3] @ eye + pose[:3, 3],
                                   np.zeros(3), atol=1e-12)


def test_look_at_rejects_degenerate_up():
    with pytest.raises(FrameError):
        look_at_pose(np.zeros(3), np.array([0.0, 0.0, 1.0]),
                     np.array([0.0, 0.0, 1.0]))


def test_world_camera_frame_roundtrip():
    pose = look_at_pose(np.array([1.0, 2.0, 3.0]),
                        np.array([0.0, 1.0, 0.0]),
                        np.array([0.0, 0.0, 1.0]))
    cam = _pinhole(pose=pose)
    rng = np.random.default_rng(13)
    pts = rng.uniform(-1, 1, size=(20, 3))
    back = cam.camera_to_world(cam.world_to_camera(pts))
    np.testing.assert_allclose(back, pts, atol=1e-12)


def test_camera_save_load_roundtrip(tmp_path):
    pose = look_at_pose(np.array([0.5, -1.0, 0.5]),
                        np.array([0.0, 1.0, 0.0]),
                        np.array([0.0, 0.0, 1.0]))
    cam = CameraModel(kind="pinhole", fx=32.0, fy=32.0, cx=31.5, cy=31.5,
                      pose=pose, resolution=(64, 64))
    path = str(tmp_path / "camera.json")
    cam.save(path)
    back = CameraModel.load(path)
    assert back.kind == cam.kind
    assert back.resolution == cam.resolution
    np.testing.assert_allclose(back.pose, cam.pose)
    np.testing.assert_allclose([back.fx, back.fy, back.cx, back.cy],
                               [cam.fx, cam.fy, cam.cx, cam.cy])


def test_non_rigid_pose_rejected():
    bad = np.eye(4)
    bad[0, 0] = 2.0
    with pytest.raises(FrameError):
        CameraModel(kind="pinhole", fx=1.0, fy=1.0, cx=0.0, cy=0.0,
                    pose=bad, resolution=(2, 2))
