"""Per-frame skeletal pose recovery from 3D keypoints.

The solver minimizes a weighted sum of four squared-residual energies
(keypoint data, temporal smoothness on joint positions, DoF limit hinge,
mean-pose deviation) with damped Gauss-Newton, in two stages: globals only,
then all DoFs jointly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .skeleton import (
    GLOBAL_DOFS,
    PoseVector,
    Skeleton,
    dof_limit_energy,
    dof_limit_residuals,
    fk_jacobian,
    forward_kinematics,
    pose_regularizer,
    regularizer_mask,
)


class IKError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrackFrame:
    frame_index: int
    joints: np.ndarray  # (K, 3) world meters
    valid: np.ndarray  # (K,) bool

    def __post_init__(self):
        object.__setattr__(self, "joints", np.asarray(self.joints, dtype=float))
        v = np.ones(len(self.joints), dtype=bool) if self.valid is None else np.asarray(self.valid, dtype=bool)
        object.__setattr__(self, "valid", v)


@dataclass
class KeypointTrack:
    frames: list

    def __post_init__(self):
        idx = [f.frame_index for f in self.frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("frame indices must be strictly increasing")

    def __len__(self):
        return len(self.frames)

    def reversed(self):
        n = len(self.frames)
        return KeypointTrack(
            [TrackFrame(self.frames[i].frame_index, self.frames[n - 1 - i].joints, self.frames[n - 1 - i].valid) for i in range(n)]
        )


@dataclass
class IKConfig:
    w_data: float = 1.0
    w_temporal: float = 0.5
    w_dof: float = 10.0
    w_reg: float = 0.05
    stage1_iters: int = 40
    stage2_iters: int = 80
    damping_init: float = 1e-3
    damping_increase: float = 10.0
    damping_decrease: float = 0.5
    tol: float = 1e-12  # relative energy decrease convergence threshold

    def __post_init__(self):
        if min(self.w_data, self.w_temporal, self.w_dof, self.w_reg) < 0:
            raise ValueError("energy weights must be nonnegative")
        if self.stage1_iters < 1 or self.stage2_iters < 1:
            raise ValueError("iteration counts must be >= 1")


@dataclass
class MotionEstimate:
    poses: list  # PoseVector per frame
    energies: list  # dict per frame
    config: IKConfig = field(default=None)


def data_energy(skeleton, pose, joints, valid=None):
    """Sum of squared keypoint alignment errors over valid joints.

    Returns (energy, gradient). All joints invalid is an unconstrained
    frame and raises IKError.
    """
    joints = np.asarray(joints, dtype=float)
    if valid is None:
        valid = np.ones(len(joints), dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if not np.any(valid):
        raise IKError("all keypoints invalid: frame is unconstrained")
    fk = forward_kinematics(skeleton, pose)
    res = fk.keypoint_positions.positions[valid] - joints[valid]
    J = fk_jacobian(skeleton, pose, fk)[valid]
    grad = 2.0 * np.einsum("ki,kid->d", res, J)
    return float(np.sum(res * res)), grad


def temporal_energy(skeleton, pose, prev_pose):
    """Squared keypoint displacement against the previous frame's pose.

    The previous pose is a constant; the gradient flows into `pose` only.
    """
    fk = forward_kinematics(skeleton, pose)
    prev = forward_kinematics(skeleton, prev_pose).keypoint_positions.positions
    res = fk.keypoint_positions.positions - prev
    J = fk_jacobian(skeleton, pose, fk)
    grad = 2.0 * np.einsum("ki,kid->d", res, J)
    return float(np.sum(res * res)), grad


def total_energy(skeleton, pose, joints, valid, prev_pose, cfg):
    e_data, _ = data_energy(skeleton, pose, joints, valid)
    e_temp = 0.0
    if prev_pose is not None:
        e_temp, _ = temporal_energy(skeleton, pose, prev_pose)
    e_dof, _ = dof_limit_energy(skeleton, pose)
    e_reg, _ = pose_regularizer(skeleton, pose)
    total = cfg.w_data * e_data + cfg.w_temporal * e_temp + cfg.w_dof * e_dof + cfg.w_reg * e_reg
    return {"data": e_data, "temporal": e_temp, "dof": e_dof, "reg": e_reg, "total": total}


def _residuals_and_jacobian(skeleton, theta, joints, valid, prev_kp, cfg, reg_mask):
    """Stacked sqrt-weighted residual vector and its Jacobian."""
    pose = PoseVector(theta)
    fk = forward_kinematics(skeleton, pose)
    kp = fk.keypoint_positions.positions
    Jkp = fk_jacobian(skeleton, pose, fk)
    blocks_r, blocks_J = [], []

    sw = np.sqrt(cfg.w_data)
    blocks_r.append(sw * (kp[valid] - joints[valid]).ravel())
    blocks_J.append(sw * Jkp[valid].reshape(-1, skeleton.n_dof))

    if prev_kp is not None and cfg.w_temporal > 0:
        sw = np.sqrt(cfg.w_temporal)
        blocks_r.append(sw * (kp - prev_kp).ravel())
        blocks_J.append(sw * Jkp.reshape(-1, skeleton.n_dof))

    if cfg.w_dof > 0:
        r, sign = dof_limit_residuals(skeleton, pose)
        sw = np.sqrt(cfg.w_dof)
        blocks_r.append(sw * r)
        blocks_J.append(sw * np.diag(sign))

    if cfg.w_reg > 0:
        sw = np.sqrt(cfg.w_reg)
        d = (theta - skeleton.mean_pose) * reg_mask
        blocks_r.append(sw * d)
        blocks_J.append(sw * np.diag(reg_mask.astype(float)))

    return np.concatenate(blocks_r), np.concatenate(blocks_J, axis=0)


def _lm_minimize(skeleton, theta0, joints, valid, prev_kp, cfg, active, max_iters):
    """Damped Gauss-Newton over the active DoF subset; energy never increases."""
    theta = theta0.copy()
    reg_mask = regularizer_mask(skeleton)
    r, J = _residuals_and_jacobian(skeleton, theta, joints, valid, prev_kp, cfg, reg_mask)
    energy = float(r @ r)
    if not np.isfinite(energy):
        raise IKError("non-finite energy at initialization")
    lam = cfg.damping_init
    for _ in range(max_iters):
        Ja = J[:, active]
        H = Ja.T @ Ja
        g = Ja.T @ r
        stepped = False
        for _attempt in range(25):
            try:
                delta = np.linalg.solve(H + lam * np.eye(H.shape[0]), -g)
            except np.linalg.LinAlgError:
                lam *= cfg.damping_increase
                continue
            cand = theta.copy()
            cand[active] += delta
            rc, Jc = _residuals_and_jacobian(skeleton, cand, joints, valid, prev_kp, cfg, reg_mask)
            cand_energy = float(rc @ rc)
            if not np.isfinite(cand_energy):
                raise IKError("non-finite energy during iteration")
            if cand_energy < energy:
                theta, r, J = cand, rc, Jc
                improvement = energy - cand_energy
                energy = cand_energy
                lam = max(lam * cfg.damping_decrease, 1e-12)
                stepped = True
                break
            lam *= cfg.damping_increase
        if not stepped:
            break
        if improvement <= cfg.tol * max(energy, 1e-30):
            break
    return theta, energy


def default_init_pose(skeleton, joints, valid):
    """Mean pose with the global translation lifted from the detections.

    Uses the root keypoint when detected, else the mean offset over valid
    keypoints.
    """
    theta = skeleton.mean_pose.copy()
    theta[3:6] = 0.0
    kp0 = forward_kinematics(skeleton, PoseVector(theta)).keypoint_positions.positions
    root_slots = np.flatnonzero(skeleton.keypoints == 0)
    joints = np.asarray(joints, dtype=float)
    if len(root_slots) and valid[root_slots[0]]:
        s = root_slots[0]
        theta[3:6] = joints[s] - kp0[s]
    elif np.any(valid):
        theta[3:6] = (joints[valid] - kp0[valid]).mean(axis=0)
    return PoseVector(theta)


def solve_frame(skeleton, joints, prev_pose, init_pose, cfg, valid=None, frame_index=0):
    """Two-stage pose solve for one frame: globals first, then all DoFs."""
    joints = np.asarray(joints, dtype=float)
    if valid is None:
        valid = np.ones(len(joints), dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if joints.shape != (skeleton.n_keypoints, 3):
        raise IKError(f"expected {skeleton.n_keypoints} keypoints, got {joints.shape}")
    if not np.any(valid):
        raise IKError("all keypoints invalid: frame is unconstrained")
    prev_kp = None
    if prev_pose is not None and cfg.w_temporal > 0:
        prev_kp = forward_kinematics(skeleton, prev_pose).keypoint_positions.positions

    theta0 = init_pose.values.copy()
    active1 = np.zeros(skeleton.n_dof, dtype=bool)
    active1[:GLOBAL_DOFS] = True
    theta1, _ = _lm_minimize(skeleton, theta0, joints, valid, prev_kp, cfg, active1, cfg.stage1_iters)
    active2 = np.ones(skeleton.n_dof, dtype=bool)
    theta2, _ = _lm_minimize(skeleton, theta1, joints, valid, prev_kp, cfg, active2, cfg.stage2_iters)
    return PoseVector(theta2, frame_index=frame_index)


def solve_sequence(skeleton, track: KeypointTrack, cfg: IKConfig) -> MotionEstimate:
    """Solve frames in order; each frame initializes from the previous pose."""
    if not len(track):
        raise IKError("empty keypoint track")
    poses, energies = [], []
    prev = None
    for f in track.frames:
        init = default_init_pose(skeleton, f.joints, f.valid) if prev is None else prev
        try:
            pose = solve_frame(skeleton, f.joints, prev, init, cfg, valid=f.valid, frame_index=f.frame_index)
        except IKError as e:
            raise IKError(f"frame {f.frame_index}: {e}") from e
        prev_for_energy = prev if cfg.w_temporal > 0 else None
        energies.append(total_energy(skeleton, pose, f.joints, f.valid, prev_for_energy, cfg))
        poses.append(pose)
        prev = pose
    return MotionEstimate(poses=poses, energies=energies, config=cfg)


# ---------------------------------------------------------------------------
# File formats


def load_track(path):
    frames = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            joints = np.asarray(d["joints"], dtype=float)
            valid = np.asarray(d["valid"], dtype=bool) if "valid" in d else None
            frames.append(TrackFrame(int(d["frame"]), joints, valid))
    return KeypointTrack(frames)


def save_track(track, path):
    with open(path, "w") as f:
        for fr in track.frames:
            rec = {"frame": int(fr.frame_index), "joints": fr.joints.tolist(), "valid": fr.valid.tolist()}
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def save_motion(motion: MotionEstimate, path):
    with open(path, "w") as f:
        for pose, energy in zip(motion.poses, motion.energies):
            rec = {"frame": int(pose.frame_index), "theta": pose.values.tolist(), "energy": energy}
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_motion(path):
    poses, energies = [], []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            poses.append(PoseVector(np.asarray(d["theta"], dtype=float), frame_index=int(d["frame"])))
            energies.append(d.get("energy", {}))
    return MotionEstimate(poses=poses, energies=energies)


def ik_config_to_dict(cfg):
    return asdict(cfg)


def ik_config_from_dict(d):
    return IKConfig(**d)
