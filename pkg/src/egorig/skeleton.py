"""Kinematic skeleton: forward kinematics, analytic Jacobians, and pose priors.

A skeleton is a topologically ordered tree of joints. Each joint carries a
rest offset from its parent and an ordered list of revolute axes (unit
vectors in the joint's local frame). The pose vector starts with 6 global
degrees of freedom (axis-angle rotation, then translation) followed by one
angle per (joint, axis slot) as listed in the dof map.

Rest pose (all DoFs zero) has identity rotations everywhere, so rest world
transforms are pure translations. Skinning code relies on this.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .rotations import axis_angle_jacobian, axis_angle_to_matrix, rotation_about_axis

GLOBAL_DOFS = 6  # axis-angle rotation (3) then translation (3)


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int  # -1 for root
    offset: np.ndarray  # (3,) rest offset from parent, meters
    axes: np.ndarray  # (n_slots, 3) unit rotation axes, local frame


@dataclass
class Skeleton:
    """Kinematic tree plus DoF bookkeeping, limits, and mean pose.

    dof_map entries are ("global_rot", i), ("global_trans", i) or
    (joint_index, slot_index). The first six must be the global DoFs in
    rotation-then-translation order; every joint axis slot must appear
    exactly once.
    """

    joints: list[Joint]
    dof_map: list[tuple]
    limits_min: np.ndarray
    limits_max: np.ndarray
    mean_pose: np.ndarray
    keypoints: np.ndarray = None  # joint indices reported as keypoints; default all

    # derived, filled in __post_init__
    n_dof: int = field(init=False)
    _dof_joint: np.ndarray = field(init=False, repr=False)
    _dof_slot: np.ndarray = field(init=False, repr=False)
    _joint_dofs: list = field(init=False, repr=False)
    _ancestors: np.ndarray = field(init=False, repr=False)  # bool (J, J): [k, j] = k is ancestor-or-self of j

    def __post_init__(self):
        J = len(self.joints)
        if self.keypoints is None:
            self.keypoints = np.arange(J)
        self.keypoints = np.asarray(self.keypoints, dtype=int)
        self.n_dof = len(self.dof_map)

        for k, jnt in enumerate(self.joints):
            if not (-1 <= jnt.parent < k):
                raise ValueError(f"joint {k} ({jnt.name}): parent {jnt.parent} not topologically ordered")
            norms = np.linalg.norm(jnt.axes, axis=-1) if len(jnt.axes) else np.array([])
            if norms.size and np.any(np.abs(norms - 1.0) > 1e-9):
                raise ValueError(f"joint {k} ({jnt.name}): axes must be unit length")

        expected = {(k, s) for k, jnt in enumerate(self.joints) for s in range(len(jnt.axes))}
        seen = set()
        dof_joint = np.full(self.n_dof, -1, dtype=int)
        dof_slot = np.full(self.n_dof, -1, dtype=int)
        for d, entry in enumerate(self.dof_map):
            kind = entry[0]
            if kind == "global_rot" or kind == "global_trans":
                want = d if kind == "global_rot" else d - 3
                if entry[1] != want or (kind == "global_rot") != (d < 3) or d >= GLOBAL_DOFS:
                    raise ValueError("first six dof_map entries must be global rotation then translation, in order")
            else:
                if d < GLOBAL_DOFS:
                    raise ValueError("first six dof_map entries must be the global DoFs")
                k, s = int(entry[0]), int(entry[1])
                if (k, s) in seen or (k, s) not in expected:
                    raise ValueError(f"dof_map entry {d}: bad or duplicate joint slot {(k, s)}")
                seen.add((k, s))
                dof_joint[d], dof_slot[d] = k, s
        if seen != expected:
            raise ValueError("dof_map does not cover every joint axis slot")

        self.limits_min = np.asarray(self.limits_min, dtype=float)
        self.limits_max = np.asarray(self.limits_max, dtype=float)
        self.mean_pose = np.asarray(self.mean_pose, dtype=float)
        for name, arr in [("limits_min", self.limits_min), ("limits_max", self.limits_max), ("mean_pose", self.mean_pose)]:
            if arr.shape != (self.n_dof,):
                raise ValueError(f"{name} must have length n_dof={self.n_dof}")
        if np.any(self.limits_min > self.mean_pose) or np.any(self.mean_pose > self.limits_max):
            raise ValueError("mean_pose must lie within [limits_min, limits_max]")

        self._dof_joint = dof_joint
        self._dof_slot = dof_slot
        joint_dofs = [[None] * len(jnt.axes) for jnt in self.joints]
        for d in range(GLOBAL_DOFS, self.n_dof):
            joint_dofs[dof_joint[d]][dof_slot[d]] = d
        self._joint_dofs = joint_dofs

        anc = np.zeros((J, J), dtype=bool)
        for j in range(J):
            k = j
            while k != -1:
                anc[k, j] = True
                k = self.joints[k].parent
        self._ancestors = anc

    @property
    def n_joints(self):
        return len(self.joints)

    @property
    def n_keypoints(self):
        return len(self.keypoints)

    def rest_positions(self):
        """World joint positions at the all-zero pose (accumulated offsets)."""
        t = np.zeros((self.n_joints, 3))
        for k, jnt in enumerate(self.joints):
            t[k] = jnt.offset if jnt.parent == -1 else t[jnt.parent] + jnt.offset
        return t


@dataclass(frozen=True)
class PoseVector:
    """One frame of DoF values: globals first, then joint angles."""

    values: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.values.ndim != 1:
            raise ValueError("pose values must be a flat vector")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("pose values must be finite")

    @property
    def global_rotation(self):
        return self.values[0:3]

    @property
    def global_translation(self):
        return self.values[3:6]


@dataclass(frozen=True)
class JointPositions:
    """World-space keypoint positions for one frame, meters."""

    positions: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=float))
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError("positions must be (K, 3)")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")


@dataclass(frozen=True)
class FKResult:
    """Per-joint world transforms plus the keypoint positions."""

    joint_positions: np.ndarray  # (J, 3) all joints
    rotations: np.ndarray  # (J, 3, 3) world rotations
    keypoint_positions: JointPositions


def _check_pose(skeleton, pose):
    if pose.values.shape[0] != skeleton.n_dof:
        raise ValueError(f"pose has {pose.values.shape[0]} DoFs, skeleton expects {skeleton.n_dof}")


def forward_kinematics(skeleton: Skeleton, pose: PoseVector) -> FKResult:
    """World-space joint transforms for a pose.

    The global transform p -> R(r) p + z is applied above every root joint.
    """
    _check_pose(skeleton, pose)
    theta = pose.values
    Rg = axis_angle_to_matrix(theta[0:3])
    z = theta[3:6]
    J = skeleton.n_joints
    R = np.empty((J, 3, 3))
    t = np.empty((J, 3))
    for k, jnt in enumerate(skeleton.joints):
        Rp, tp = (Rg, z) if jnt.parent == -1 else (R[jnt.parent], t[jnt.parent])
        t[k] = Rp @ jnt.offset + tp
        Rk = Rp
        for s in range(len(jnt.axes)):
            Rk = Rk @ rotation_about_axis(jnt.axes[s], theta[skeleton._joint_dofs[k][s]])
        R[k] = Rk
    kp = JointPositions(t[skeleton.keypoints], frame_index=pose.frame_index)
    return FKResult(joint_positions=t, rotations=R, keypoint_positions=kp)


def _dof_axes_and_pivots(skeleton, pose, fk):
    """World axis direction and pivot point for every revolute DoF."""
    theta = pose.values
    Rg = axis_angle_to_matrix(theta[0:3])
    axes = np.zeros((skeleton.n_dof, 3))
    pivots = np.zeros((skeleton.n_dof, 3))
    for d in range(GLOBAL_DOFS, skeleton.n_dof):
        k = skeleton._dof_joint[d]
        s = skeleton._dof_slot[d]
        jnt = skeleton.joints[k]
        Rp = Rg if jnt.parent == -1 else fk.rotations[jnt.parent]
        for u in range(s):
            Rp = Rp @ rotation_about_axis(jnt.axes[u], theta[skeleton._joint_dofs[k][u]])
        axes[d] = Rp @ jnt.axes[s]
        pivots[d] = fk.joint_positions[k]
    return axes, pivots


def _point_jacobian(skeleton, pose, fk, points, attach):
    """d(point)/d(pose) for world points rigidly attached to joints.

    points: (N, 3), attach: (N,) joint index each point is attached to.
    Returns (N, 3, n_dof).
    """
    theta = pose.values
    N = len(points)
    Jac = np.zeros((N, 3, skeleton.n_dof))
    # global translation
    Jac[:, 0, 3] = Jac[:, 1, 4] = Jac[:, 2, 5] = 1.0
    # global rotation: p = R(r) y + z with y the pose-space point
    Rg = axis_angle_to_matrix(theta[0:3])
    dR = axis_angle_jacobian(theta[0:3])
    y = (points - theta[3:6]) @ Rg  # R^T (p - z) via right-multiplication
    for i in range(3):
        Jac[:, :, i] = y @ dR[i].T
    # revolute DoFs: a x (p - pivot) for points in the DoF's subtree
    axes, pivots = _dof_axes_and_pivots(skeleton, pose, fk)
    for d in range(GLOBAL_DOFS, skeleton.n_dof):
        k = skeleton._dof_joint[d]
        mask = skeleton._ancestors[k, attach]
        if not np.any(mask):
            continue
        Jac[mask, :, d] = np.cross(axes[d], points[mask] - pivots[d])
    return Jac


def fk_jacobian(skeleton: Skeleton, pose: PoseVector, fk: FKResult = None):
    """Analytic Jacobian of keypoint positions w.r.t. the pose, (K, 3, n_dof)."""
    _check_pose(skeleton, pose)
    if fk is None:
        fk = forward_kinematics(skeleton, pose)
    kp = skeleton.keypoints
    return _point_jacobian(skeleton, pose, fk, fk.joint_positions[kp], kp)


def attached_point_jacobian(skeleton, pose, points, attach, fk=None):
    """Jacobian of arbitrary joint-attached world points w.r.t. the pose."""
    _check_pose(skeleton, pose)
    if fk is None:
        fk = forward_kinematics(skeleton, pose)
    points = np.asarray(points, dtype=float)
    attach = np.asarray(attach, dtype=int)
    return _point_jacobian(skeleton, pose, fk, points, attach)


def dof_limit_residuals(skeleton, pose):
    """Per-DoF hinge residual max(theta - max, min - theta, 0) and its sign."""
    theta = pose.values
    over = theta - skeleton.limits_max
    under = skeleton.limits_min - theta
    r = np.maximum(np.maximum(over, under), 0.0)
    sign = np.where(over > 0, 1.0, np.where(under > 0, -1.0, 0.0))
    return r, sign


def dof_limit_energy(skeleton: Skeleton, pose: PoseVector):
    """Squared hinge penalty on DoF limits; zero inside the box.

    Returns (energy, gradient). The gradient is one-sided zero at the limits.
    """
    _check_pose(skeleton, pose)
    r, sign = dof_limit_residuals(skeleton, pose)
    return float(np.sum(r * r)), 2.0 * r * sign


def pose_regularizer(skeleton: Skeleton, pose: PoseVector):
    """Squared deviation from the mean pose, global translation excluded.

    Returns (energy, gradient).
    """
    _check_pose(skeleton, pose)
    d = pose.values - skeleton.mean_pose
    d[3:6] = 0.0
    return float(np.sum(d * d)), 2.0 * d


def regularizer_mask(skeleton):
    """Boolean mask of DoFs included in the mean-pose regularizer."""
    m = np.ones(skeleton.n_dof, dtype=bool)
    m[3:6] = False
    return m


# ---------------------------------------------------------------------------
# File format


def skeleton_to_dict(skeleton):
    return {
        "joints": [
            {
                "name": j.name,
                "parent": j.parent,
                "offset": list(map(float, j.offset)),
                "axes": [list(map(float, a)) for a in j.axes],
            }
            for j in skeleton.joints
        ],
        "dof_map": [list(e) for e in skeleton.dof_map],
        "limits_min": skeleton.limits_min.tolist(),
        "limits_max": skeleton.limits_max.tolist(),
        "mean_pose": skeleton.mean_pose.tolist(),
        "keypoints": skeleton.keypoints.tolist(),
    }


def skeleton_from_dict(data):
    joints = [
        Joint(
            name=j["name"],
            parent=int(j["parent"]),
            offset=np.asarray(j["offset"], dtype=float),
            axes=np.asarray(j.get("axes", []), dtype=float).reshape(-1, 3),
        )
        for j in data["joints"]
    ]
    dof_map = []
    for e in data["dof_map"]:
        if e[0] in ("global_rot", "global_trans"):
            dof_map.append((e[0], int(e[1])))
        else:
            dof_map.append((int(e[0]), int(e[1])))
    return Skeleton(
        joints=joints,
        dof_map=dof_map,
        limits_min=np.asarray(data["limits_min"], dtype=float),
        limits_max=np.asarray(data["limits_max"], dtype=float),
        mean_pose=np.asarray(data["mean_pose"], dtype=float),
        keypoints=np.asarray(data["keypoints"], dtype=int) if "keypoints" in data else None,
    )


def load_skeleton(path):
    with open(path) as f:
        return skeleton_from_dict(json.load(f))


def save_skeleton(skeleton, path):
    with open(path, "w") as f:
        json.dump(skeleton_to_dict(skeleton), f, indent=1, sort_keys=True)
