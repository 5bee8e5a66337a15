import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from egorig.camera import (
    FisheyeCamera,
    RigidTransform,
    camera_from_dict,
    camera_to_dict,
    load_camera,
    load_head_track,
    local_to_global,
    project,
    projection_jacobian,
    save_camera,
    save_head_track,
    world_to_camera,
)
from egorig.rotations import axis_angle_to_matrix
from egorig.skeleton import JointPositions


@pytest.fixture(scope="module")
def cam():
    return FisheyeCamera(focal=200.0, cx=320.0, cy=240.0, width=640, height=480, dist=(0.02, -0.003, 0.001, 0.0), fov_limit=0.75 * np.pi)


def test_optical_axis_projects_to_principal_point(cam):
    px, valid = project(cam, np.array([[0.0, 0.0, 1.0]]))
    np.testing.assert_allclose(px[0], [cam.cx, cam.cy], atol=1e-12)
    assert valid[0]


def test_equidistant_radius_at_90_degrees():
    cam0 = FisheyeCamera(focal=200.0, cx=320.0, cy=240.0, width=640, height=480)
    px, valid = project(cam0, np.array([[1.0, 0.0, 0.0]]))
    r = np.linalg.norm(px[0] - [320, 240])
    np.testing.assert_allclose(r, 200 * np.pi / 2, atol=1e-9)
    assert valid[0]


def test_rotation_about_axis_rotates_pixel(cam):
    p = np.array([0.3, 0.1, 0.9])
    phi = 0.8
    R = axis_angle_to_matrix(np.array([0.0, 0.0, phi]))
    px1, _ = project(cam, p[None])
    px2, _ = project(cam, (R @ p)[None])
    c = np.array([cam.cx, cam.cy])
    R2 = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
    np.testing.assert_allclose(px2[0] - c, R2 @ (px1[0] - c), atol=1e-9)


@given(st.floats(-0.8, 0.8), st.floats(-0.8, 0.8), st.floats(0.3, 3.0))
@settings(max_examples=30, deadline=None)
def test_projection_depends_only_on_ray(cam, x, y, z):
    p = np.array([[x, y, z]])
    base, _ = project(cam, p)
    for s in (0.5, 2.0, 10.0):
        px, _ = project(cam, p * s)
        np.testing.assert_allclose(px, base, atol=1e-9)


def test_camera_center_rejected(cam):
    with pytest.raises(ValueError):
        project(cam, np.zeros((1, 3)))


def test_fov_flag(cam):
    _, valid = project(cam, np.array([[0.0, 0.1, -1.0]]))  # ~174 degrees
    assert not valid[0]


def test_torch_and_numpy_agree(cam):
    pts = np.array([[0.3, -0.2, 0.8], [0.0, 0.0, 1.0], [1.2, 0.4, 0.1]])
    px_np, v_np = project(cam, pts)
    px_t, v_t = project(cam, torch.as_tensor(pts))
    np.testing.assert_allclose(px_np, px_t.numpy(), atol=0)
    assert np.array_equal(v_np, v_t.numpy())


def test_projection_jacobian_matches_fd(cam):
    pts = torch.tensor([[0.3, -0.2, 0.8], [0.9, 0.5, 0.4], [0.0, 0.0, 2.0]], dtype=torch.float64)
    J = projection_jacobian(cam, pts)
    eps = 1e-6
    for i in range(3):
        dp = torch.zeros(3, dtype=torch.float64)
        dp[i] = eps
        fd = (project(cam, pts + dp)[0] - project(cam, pts - dp)[0]) / (2 * eps)
        assert float((J[:, :, i] - fd).abs().max()) / max(float(fd.abs().max()), 1.0) < 1e-4


def test_local_to_global_identity_and_translation(rng):
    jp = JointPositions(rng.normal(size=(5, 3)))
    out = local_to_global(jp, RigidTransform.identity())
    assert np.array_equal(out.positions, jp.positions)
    tr = RigidTransform(np.eye(3), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(local_to_global(jp, tr).positions, jp.positions + [1, 2, 3], atol=0)


def test_local_to_global_roundtrip(rng):
    R = axis_angle_to_matrix(np.array([0.3, 0.2, -0.4]))
    tr = RigidTransform(R, np.array([1.0, 2.0, 3.0]))
    jp = JointPositions(rng.normal(size=(7, 3)))
    back = local_to_global(local_to_global(jp, tr), tr.inverse())
    np.testing.assert_allclose(back.positions, jp.positions, atol=1e-12)


def test_local_to_global_preserves_distances(rng):
    R = axis_angle_to_matrix(rng.normal(0, 1, 3))
    tr = RigidTransform(R, rng.normal(size=3))
    pts = rng.normal(size=(6, 3))
    out = local_to_global(JointPositions(pts), tr).positions
    d_in = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d_out = np.linalg.norm(out[:, None] - out[None], axis=-1)
    np.testing.assert_allclose(d_in, d_out, atol=1e-10)


def test_world_to_camera_inverts_head(rng):
    R = axis_angle_to_matrix(rng.normal(0, 1, 3))
    head = RigidTransform(R, rng.normal(size=3))
    pts = rng.normal(size=(5, 3))
    world = head.apply(pts)
    np.testing.assert_allclose(world_to_camera(world, head), pts, atol=1e-12)


def test_rigid_transform_validation():
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3) * 1.01, np.zeros(3))
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_camera_json_roundtrip(cam, tmp_path):
    path = tmp_path / "cam.json"
    save_camera(cam, path)
    back = load_camera(path)
    assert back == cam
    assert camera_from_dict(camera_to_dict(cam)) == cam


def test_head_track_roundtrip(tmp_path, rng):
    track = {
        0: RigidTransform(np.eye(3), np.array([0.0, 0.0, -1.0])),
        1: RigidTransform(axis_angle_to_matrix(rng.normal(0, 0.5, 3)), rng.normal(size=3)),
    }
    path = tmp_path / "head.jsonl"
    save_head_track(track, path)
    back = load_head_track(path)
    assert set(back) == {0, 1}
    for k in track:
        np.testing.assert_allclose(back[k].rotation, track[k].rotation, atol=1e-12)
        np.testing.assert_allclose(back[k].translation, track[k].translation, atol=1e-12)
