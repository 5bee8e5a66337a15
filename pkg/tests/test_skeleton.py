import json

import numpy as np
import pytest

from egorig.rotations import axis_angle_to_matrix
from egorig.skeleton import (
    Joint,
    JointPositions,
    PoseVector,
    Skeleton,
    dof_limit_energy,
    fk_jacobian,
    forward_kinematics,
    load_skeleton,
    pose_regularizer,
    save_skeleton,
)


def two_joint_chain():
    joints = [
        Joint(name="root", parent=-1, offset=np.zeros(3), axes=np.array([[0.0, 0.0, 1.0]])),
        Joint(name="child", parent=0, offset=np.array([1.0, 0.0, 0.0]), axes=np.empty((0, 3))),
    ]
    dof_map = [
        ("global_rot", 0), ("global_rot", 1), ("global_rot", 2),
        ("global_trans", 0), ("global_trans", 1), ("global_trans", 2),
        (0, 0),
    ]
    lim = np.array([np.pi] * 6 + [np.pi])
    return Skeleton(joints=joints, dof_map=dof_map, limits_min=-lim, limits_max=lim, mean_pose=np.zeros(7))


def test_zero_pose_is_rest_offsets(chain_skeleton):
    fk = forward_kinematics(chain_skeleton, PoseVector(np.zeros(chain_skeleton.n_dof)))
    assert np.array_equal(fk.joint_positions, chain_skeleton.rest_positions())


def test_single_bone_rotation():
    s = two_joint_chain()
    theta = np.zeros(7)
    theta[6] = np.pi / 2
    fk = forward_kinematics(s, PoseVector(theta))
    np.testing.assert_allclose(fk.joint_positions[1], [0, 1, 0], atol=1e-12)


def test_global_translation_shifts_all_joints(chain_skeleton):
    theta = np.zeros(chain_skeleton.n_dof)
    theta[3:6] = [0.0, 0.0, 0.5]
    fk = forward_kinematics(chain_skeleton, PoseVector(theta))
    rest = chain_skeleton.rest_positions()
    np.testing.assert_allclose(fk.joint_positions, rest + [0, 0, 0.5], atol=0)


def test_rigid_equivariance(chain_skeleton):
    rng = np.random.default_rng(4)
    theta = rng.normal(0, 0.4, chain_skeleton.n_dof)
    theta[0:6] = 0
    base = forward_kinematics(chain_skeleton, PoseVector(theta)).joint_positions
    r = np.array([0.4, -0.3, 0.2])
    z = np.array([0.1, 0.7, -0.2])
    theta2 = theta.copy()
    theta2[0:3] = r
    theta2[3:6] = z
    moved = forward_kinematics(chain_skeleton, PoseVector(theta2)).joint_positions
    R = axis_angle_to_matrix(r)
    np.testing.assert_allclose(moved, base @ R.T + z, atol=1e-10)


def test_fk_jacobian_matches_fd(chain_skeleton):
    rng = np.random.default_rng(5)
    theta = rng.normal(0, 0.4, chain_skeleton.n_dof)
    pose = PoseVector(theta)
    J = fk_jacobian(chain_skeleton, pose)
    eps = 1e-6
    for d in range(chain_skeleton.n_dof):
        tp, tm = theta.copy(), theta.copy()
        tp[d] += eps
        tm[d] -= eps
        fd = (
            forward_kinematics(chain_skeleton, PoseVector(tp)).keypoint_positions.positions
            - forward_kinematics(chain_skeleton, PoseVector(tm)).keypoint_positions.positions
        ) / (2 * eps)
        scale = max(np.abs(fd).max(), 1.0)
        assert np.abs(J[:, :, d] - fd).max() / scale < 1e-4


def test_dof_limits_inside_zero(chain_skeleton):
    e, g = dof_limit_energy(chain_skeleton, PoseVector(np.zeros(chain_skeleton.n_dof)))
    assert e == 0.0
    assert np.all(g == 0.0)


def test_dof_limit_overshoot_squared(chain_skeleton):
    theta = np.zeros(chain_skeleton.n_dof)
    theta[7] = chain_skeleton.limits_max[7] + 0.1
    e, g = dof_limit_energy(chain_skeleton, PoseVector(theta))
    assert abs(e - 0.01) < 1e-12
    assert g[7] > 0 and np.count_nonzero(g) == 1


def test_dof_limit_boundary_zero_gradient(chain_skeleton):
    theta = np.zeros(chain_skeleton.n_dof)
    theta[7] = chain_skeleton.limits_max[7]
    e, g = dof_limit_energy(chain_skeleton, PoseVector(theta))
    assert e == 0.0 and g[7] == 0.0


def test_regularizer_examples(chain_skeleton):
    e, _ = pose_regularizer(chain_skeleton, PoseVector(chain_skeleton.mean_pose.copy()))
    assert e == 0.0
    theta = chain_skeleton.mean_pose.copy()
    theta[8] += 0.2
    e, g = pose_regularizer(chain_skeleton, PoseVector(theta))
    assert abs(e - 0.04) < 1e-12
    # symmetric poses have equal energy
    theta2 = chain_skeleton.mean_pose.copy()
    theta2[8] -= 0.2
    e2, _ = pose_regularizer(chain_skeleton, PoseVector(theta2))
    assert abs(e - e2) < 1e-15


def test_regularizer_excludes_global_translation(chain_skeleton):
    theta = chain_skeleton.mean_pose.copy()
    theta[3:6] = [5.0, -2.0, 1.0]
    e, g = pose_regularizer(chain_skeleton, PoseVector(theta))
    assert e == 0.0
    assert np.all(g[3:6] == 0.0)


def test_energy_invariant_to_joint_permutation():
    """Swapping joint order (with remapped dof_map) preserves the priors."""
    s = two_joint_chain()
    joints = [
        Joint(name="root", parent=-1, offset=np.zeros(3), axes=np.empty((0, 3))),
        Joint(name="child", parent=0, offset=np.array([1.0, 0, 0]), axes=np.array([[0.0, 0.0, 1.0]])),
    ]
    dof_map = list(s.dof_map[:6]) + [(1, 0)]
    s2 = Skeleton(joints=joints, dof_map=dof_map, limits_min=s.limits_min, limits_max=s.limits_max, mean_pose=s.mean_pose)
    theta = np.zeros(7)
    theta[6] = 0.4
    e1, _ = dof_limit_energy(s, PoseVector(theta))
    e2, _ = dof_limit_energy(s2, PoseVector(theta))
    r1, _ = pose_regularizer(s, PoseVector(theta))
    r2, _ = pose_regularizer(s2, PoseVector(theta))
    assert e1 == e2 and r1 == r2


def test_pose_length_mismatch_raises(chain_skeleton):
    with pytest.raises(ValueError):
        forward_kinematics(chain_skeleton, PoseVector(np.zeros(3)))


def test_invariant_violations_raise():
    joints = [Joint(name="a", parent=0, offset=np.zeros(3), axes=np.empty((0, 3)))]
    with pytest.raises(ValueError):
        Skeleton(joints=joints, dof_map=[], limits_min=np.zeros(0), limits_max=np.zeros(0), mean_pose=np.zeros(0))
    joints = [Joint(name="a", parent=-1, offset=np.zeros(3), axes=np.array([[1.0, 1.0, 0.0]]))]
    dof_map = [("global_rot", 0), ("global_rot", 1), ("global_rot", 2), ("global_trans", 0), ("global_trans", 1), ("global_trans", 2), (0, 0)]
    with pytest.raises(ValueError):
        Skeleton(joints=joints, dof_map=dof_map, limits_min=-np.ones(7), limits_max=np.ones(7), mean_pose=np.zeros(7))


def test_json_roundtrip(chain_skeleton, tmp_path):
    path = tmp_path / "skel.json"
    save_skeleton(chain_skeleton, path)
    back = load_skeleton(path)
    assert back.n_dof == chain_skeleton.n_dof
    np.testing.assert_allclose(back.limits_min, chain_skeleton.limits_min)
    fk1 = forward_kinematics(chain_skeleton, PoseVector(np.zeros(chain_skeleton.n_dof)))
    fk2 = forward_kinematics(back, PoseVector(np.zeros(back.n_dof)))
    np.testing.assert_allclose(fk1.joint_positions, fk2.joint_positions)


def test_nonfinite_pose_rejected():
    with pytest.raises(ValueError):
        PoseVector(np.array([np.nan, 0.0, 0.0]))
    with pytest.raises(ValueError):
        JointPositions(np.full((3, 3), np.inf))
