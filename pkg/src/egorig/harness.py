"""Synthetic capture generation, keypoint noise, and the metric suite.

Scenes are procedurally built: a toy chain skeleton, a tube template mesh
skinned to it, a smooth in-limit motion, a fisheye camera on a scripted
head track, and the derived ground truth (keypoints via FK, meshes via the
character model, masks via the soft rasterizer thresholded at 0.5). All
randomness flows from a single seed through named substreams.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
import torch

from . import camera as cam_mod
from .deform import EmbeddedParams, TemplateCharacter, farthest_point_sample, nearest_node_weights, pose_mesh
from .ik import KeypointTrack, TrackFrame
from .skeleton import GLOBAL_DOFS, Joint, PoseVector, Skeleton, forward_kinematics
from .softras import soft_coverage

PSNR_CAP_DB = 99.0


def rng_for(seed, name):
    """Deterministic named substream of a master seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


# ---------------------------------------------------------------------------
# Toy rigs and characters


def make_chain_skeleton(n_bones=4, bone_length=0.3, axes_per_joint=2, angle_limit=1.2):
    """Serial chain along +x: root plus n_bones children.

    Every joint gets `axes_per_joint` revolute axes (z, then y, then x).
    Keypoints are all joints; limits are symmetric, mean pose is zero.
    """
    axis_cycle = [np.array([0.0, 0.0, 1.0]), np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0])]
    joints = [Joint(name="root", parent=-1, offset=np.zeros(3), axes=np.array(axis_cycle[:axes_per_joint]))]
    for b in range(n_bones):
        joints.append(
            Joint(
                name=f"bone{b}",
                parent=b,
                offset=np.array([bone_length, 0.0, 0.0]),
                axes=np.array(axis_cycle[:axes_per_joint]),
            )
        )
    dof_map = [("global_rot", 0), ("global_rot", 1), ("global_rot", 2), ("global_trans", 0), ("global_trans", 1), ("global_trans", 2)]
    for k in range(len(joints)):
        for s in range(axes_per_joint):
            dof_map.append((k, s))
    n_dof = len(dof_map)
    limits_min = np.full(n_dof, -angle_limit)
    limits_max = np.full(n_dof, angle_limit)
    limits_min[:3], limits_max[:3] = -np.pi, np.pi
    limits_min[3:6], limits_max[3:6] = -10.0, 10.0
    return Skeleton(
        joints=joints,
        dof_map=dof_map,
        limits_min=limits_min,
        limits_max=limits_max,
        mean_pose=np.zeros(n_dof),
    )


def make_twist_skeleton(bone_length=0.3):
    """Three-joint chain whose middle joint twists about the bone axis.

    The twist DoF moves no keypoint (children are collinear with the axis),
    giving a data-term null direction for regularizer tests.
    """
    joints = [
        Joint(name="root", parent=-1, offset=np.zeros(3), axes=np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])),
        Joint(name="mid", parent=0, offset=np.array([bone_length, 0, 0]), axes=np.array([[1.0, 0.0, 0.0]])),  # twist
        Joint(name="tip", parent=1, offset=np.array([bone_length, 0, 0]), axes=np.empty((0, 3))),
    ]
    dof_map = [("global_rot", 0), ("global_rot", 1), ("global_rot", 2), ("global_trans", 0), ("global_trans", 1), ("global_trans", 2), (0, 0), (0, 1), (1, 0)]
    n = len(dof_map)
    lim = np.full(n, np.pi)
    return Skeleton(joints=joints, dof_map=dof_map, limits_min=-lim, limits_max=lim, mean_pose=np.zeros(n))


def _tube_uv_atlas(n_rings, ring_size):
    """Cylindrical chart laid out in [0.05, 0.95]^2; seam duplicated in UV only."""
    us = np.linspace(0.05, 0.95, ring_size + 1)
    vs = np.linspace(0.05, 0.95, n_rings)
    return us, vs


def make_tube_character(skeleton, ring_size=8, rings_per_bone=3, radius=0.06, part_end_rings=1, dense_parts=False):
    """Tube of vertices around the chain bones, skinned to the two nearest joints.

    The last `part_end_rings` rings are labeled part 1 (an exposed ARAP
    part); everything else is body. With dense_parts=True every bone
    segment becomes its own exposed part instead. Graph nodes come from
    farthest-point sampling.
    """
    rest = skeleton.rest_positions()
    order = list(range(skeleton.n_joints))
    segs = [(skeleton.joints[k].parent, k) for k in order if skeleton.joints[k].parent != -1]
    n_rings = len(segs) * rings_per_bone + 1
    us, vs = _tube_uv_atlas(n_rings, ring_size)

    centers, attach = [], []
    centers.append(rest[segs[0][0]])
    attach.append(segs[0][0])
    for a, b in segs:
        for r in range(1, rings_per_bone + 1):
            t = r / rings_per_bone
            centers.append(rest[a] * (1 - t) + rest[b] * t)
            attach.append(b if t > 0.5 else a)
    centers = np.asarray(centers)

    verts, ring_vertex_ids = [], []
    phis = 2 * np.pi * np.arange(ring_size) / ring_size
    for c in centers:
        ids = []
        for phi in phis:
            verts.append(c + radius * np.array([0.0, np.cos(phi), np.sin(phi)]))
            ids.append(len(verts) - 1)
        ring_vertex_ids.append(ids)
    verts = np.asarray(verts)

    faces, uvs = [], []
    for r in range(n_rings - 1):
        for j in range(ring_size):
            j2 = (j + 1) % ring_size
            a, b = ring_vertex_ids[r][j], ring_vertex_ids[r][j2]
            c, d = ring_vertex_ids[r + 1][j], ring_vertex_ids[r + 1][j2]
            ua, ub = us[j], us[j + 1]
            va, vb = vs[r], vs[r + 1]
            faces.append([a, b, c])
            uvs.append([[ua, va], [ub, va], [ua, vb]])
            faces.append([b, d, c])
            uvs.append([[ub, va], [ub, vb], [ua, vb]])
    faces = np.asarray(faces, dtype=int)
    uvs = np.asarray(uvs, dtype=float)

    # skin to the two nearest joints with inverse-distance weights
    d = np.linalg.norm(verts[:, None, :] - rest[None, :, :], axis=2)
    nearest = np.argsort(d, axis=1)[:, :2]
    w = 1.0 / np.maximum(np.take_along_axis(d, nearest, axis=1), 1e-9)
    w /= w.sum(axis=1, keepdims=True)

    n_nodes = max(4, len(verts) // 10)
    node_ids = farthest_point_sample(verts, n_nodes)
    nodes = verts[node_ids]
    node_idx, node_w = nearest_node_weights(verts, nodes, k=4)

    labels = np.zeros(len(verts), dtype=int)
    if dense_parts:
        for r, ids in enumerate(ring_vertex_ids):
            labels[ids] = 1 + min(r // rings_per_bone, len(segs) - 1)
    else:
        for ids in ring_vertex_ids[-part_end_rings:]:
            labels[ids] = 1

    return TemplateCharacter(
        vertices=verts,
        faces=faces,
        uvs=uvs,
        graph_nodes=nodes,
        node_idx=node_idx,
        node_w=node_w,
        skin_idx=nearest,
        skin_w=w,
        part_labels=labels,
        part_names=("body",) + tuple(f"seg{i}" for i in range(1, labels.max() + 1)),
    ), np.asarray(attach)


def make_quad_character(size=0.8):
    """Two-triangle quad in the xy plane with the full UV atlas; one bone."""
    h = size / 2
    verts = np.array([[-h, -h, 0.0], [h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0]])
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    uvs = np.array(
        [
            [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]],
            [[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
        ]
    )
    nodes = verts.copy()
    node_idx, node_w = nearest_node_weights(verts, nodes, k=4)
    return TemplateCharacter(
        vertices=verts,
        faces=faces,
        uvs=uvs,
        graph_nodes=nodes,
        node_idx=node_idx,
        node_w=node_w,
        skin_idx=np.zeros((4, 1), dtype=int),
        skin_w=np.ones((4, 1)),
        part_labels=np.zeros(4, dtype=int),
    )


# ---------------------------------------------------------------------------
# Scenes


@dataclass
class SceneSpec:
    n_frames: int = 20
    n_bones: int = 4
    bone_length: float = 0.3
    motion_amplitude: float = 0.6  # radians, must stay inside joint limits
    motion_period: float = 40.0  # frames
    translation_amplitude: float = 0.1  # meters
    image_size: tuple = (64, 64)
    focal: float = 40.0
    camera_distance: float = 2.2
    camera_target: tuple = None  # world aim point; default = rig center
    mask_temperature: float = 1.0


@dataclass
class SyntheticScene:
    spec: SceneSpec
    seed: int
    skeleton: Skeleton
    template: TemplateCharacter
    gt_poses: list
    camera: object
    head_track: dict
    keypoints: KeypointTrack
    meshes: list
    masks: np.ndarray  # (T, H, W) uint8


def _smooth_motion(skeleton, spec, seed):
    """Per-frame poses: sinusoidal joint angles inside limits, drifting root."""
    rng = rng_for(seed, "motion")
    n_dof = skeleton.n_dof
    amp = np.zeros(n_dof)
    phase = np.zeros(n_dof)
    for d in range(GLOBAL_DOFS, n_dof):
        room = min(
            skeleton.limits_max[d] - skeleton.mean_pose[d],
            skeleton.mean_pose[d] - skeleton.limits_min[d],
        )
        amp[d] = min(spec.motion_amplitude, 0.9 * room) * rng.uniform(0.3, 1.0)
        phase[d] = rng.uniform(0, 2 * np.pi)
    tr_phase = rng.uniform(0, 2 * np.pi, size=3)
    poses = []
    for t in range(spec.n_frames):
        w = 2 * np.pi * t / spec.motion_period
        theta = skeleton.mean_pose.copy()
        theta[GLOBAL_DOFS:] += amp[GLOBAL_DOFS:] * np.sin(w + phase[GLOBAL_DOFS:])
        theta[3:6] += spec.translation_amplitude * np.sin(w + tr_phase)
        poses.append(PoseVector(theta, frame_index=t))
    return poses


def scene_camera(spec):
    """Camera looking down +z toward the rig from above (head-mounted style)."""
    H, W = spec.image_size
    cam = cam_mod.FisheyeCamera(
        focal=spec.focal, cx=(W - 1) / 2, cy=(H - 1) / 2, width=W, height=H, dist=(0.01, 0.0, 0.0, 0.0)
    )
    if spec.camera_target is None:
        target = np.array([spec.n_bones * spec.bone_length / 2, 0.0, 0.0])
    else:
        target = np.asarray(spec.camera_target, dtype=float)
    # camera frame: +z forward; the camera sits -z of the target, axes aligned
    t = target - np.array([0.0, 0.0, spec.camera_distance])
    return cam, cam_mod.RigidTransform(np.eye(3), t)


def render_mask(mesh, cam, head, temperature=1.0, soft=False):
    """Foreground mask from the soft rasterizer.

    Binary (thresholded at 0.5, uint8 0/255) by default; soft=True returns
    the raw float coverage in [0, 1].
    """
    v = torch.as_tensor(mesh.vertices, dtype=torch.float64)
    faces_t = torch.as_tensor(np.asarray(mesh.faces), dtype=torch.long)
    pc = cam_mod.world_to_camera(v, head)
    pixels, valid = cam_mod.project(cam, pc)
    face_valid = valid[faces_t].all(dim=1)
    with torch.no_grad():
        cov = soft_coverage(pixels, faces_t, cam.height, cam.width, temperature=temperature, face_valid=face_valid)
    if soft:
        return cov.numpy()
    return (cov.numpy() > 0.5).astype(np.uint8) * 255


def generate_scene(spec: SceneSpec, seed: int) -> SyntheticScene:
    """Build a fully deterministic synthetic capture from (spec, seed)."""
    skeleton = make_chain_skeleton(n_bones=spec.n_bones, bone_length=spec.bone_length)
    template, _ = make_tube_character(skeleton)
    poses = _smooth_motion(skeleton, spec, seed)
    for pose in poses:
        if np.any(pose.values > skeleton.limits_max + 1e-12) or np.any(pose.values < skeleton.limits_min - 1e-12):
            raise ValueError("generated motion violates joint limits")
    cam, head = scene_camera(spec)
    head_track = {t: head for t in range(spec.n_frames)}
    params = EmbeddedParams.identity(template)
    meshes, frames, masks = [], [], []
    for pose in poses:
        fk = forward_kinematics(skeleton, pose)
        frames.append(TrackFrame(pose.frame_index, fk.keypoint_positions.positions, None))
        mesh = pose_mesh(template, params, skeleton, pose)
        meshes.append(mesh)
        masks.append(render_mask(mesh, cam, head_track[pose.frame_index], temperature=spec.mask_temperature))
    return SyntheticScene(
        spec=spec,
        seed=seed,
        skeleton=skeleton,
        template=template,
        gt_poses=poses,
        camera=cam,
        head_track=head_track,
        keypoints=KeypointTrack(frames),
        meshes=meshes,
        masks=np.stack(masks),
    )


# ---------------------------------------------------------------------------
# Keypoint noise


@dataclass
class NoiseModel:
    sigma: float = 0.03  # meters, per coordinate
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must be a probability")


def perturb_keypoints(track: KeypointTrack, model: NoiseModel) -> KeypointTrack:
    """Additive Gaussian noise plus occlusion dropout, seeded."""
    rng = rng_for(model.seed, "keypoint-noise")
    frames = []
    for f in track.frames:
        noise = rng.normal(0.0, model.sigma, size=f.joints.shape) if model.sigma > 0 else 0.0
        drop = rng.uniform(size=len(f.joints)) < model.dropout
        frames.append(TrackFrame(f.frame_index, f.joints + noise, f.valid & ~drop))
    return KeypointTrack(frames)


# ---------------------------------------------------------------------------
# Metrics


def mpjpe(pred, gt, joint_mask=None):
    """Mean per-joint position error in centimeters.

    pred/gt: (T, K, 3) arrays or sequences of JointPositions. joint_mask
    optionally excludes joints (head-region exclusion).
    """
    p = np.asarray([getattr(x, "positions", x) for x in pred], dtype=float)
    g = np.asarray([getattr(x, "positions", x) for x in gt], dtype=float)
    if p.shape != g.shape:
        raise ValueError("sequences must have matching shapes")
    d = np.linalg.norm(p - g, axis=-1)
    if joint_mask is not None:
        d = d[:, np.asarray(joint_mask, dtype=bool)]
    return float(d.mean()) * 100.0


def _closest_point_triangle(p, a, b, c):
    """Closest point on one triangle (Ericson's region test)."""
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = ab @ ap, ac @ ap
    if d1 <= 0 and d2 <= 0:
        return a
    bp = p - b
    d3, d4 = ab @ bp, ac @ bp
    if d3 >= 0 and d4 <= d3:
        return b
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        return a + ab * (d1 / (d1 - d3))
    cp = p - c
    d5, d6 = ab @ cp, ac @ cp
    if d6 >= 0 and d5 <= d6:
        return c
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        return a + ac * (d2 / (d2 - d6))
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)))
    den = va + vb + vc
    return a + ab * (vb / den) + ac * (vc / den)


class TriangleBVH:
    """Median-split AABB tree over triangles with branch-and-bound queries."""

    def __init__(self, vertices, faces, leaf_size=8):
        self.tri = np.asarray(vertices, dtype=float)[np.asarray(faces, dtype=int)]
        lo = self.tri.min(axis=1)
        hi = self.tri.max(axis=1)
        centroid = self.tri.mean(axis=1)
        self.nodes = []  # (lo, hi, left, right, tri_ids or None)
        order = np.arange(len(self.tri))
        self._build(order, lo, hi, centroid, leaf_size)

    def _build(self, ids, lo, hi, centroid, leaf_size):
        node_lo = lo[ids].min(axis=0)
        node_hi = hi[ids].max(axis=0)
        idx = len(self.nodes)
        self.nodes.append([node_lo, node_hi, -1, -1, None])
        if len(ids) <= leaf_size:
            self.nodes[idx][4] = ids
            return idx
        axis = int(np.argmax(node_hi - node_lo))
        half = len(ids) // 2
        part = ids[np.argsort(centroid[ids, axis], kind="stable")]
        left = self._build(part[:half], lo, hi, centroid, leaf_size)
        right = self._build(part[half:], lo, hi, centroid, leaf_size)
        self.nodes[idx][2] = left
        self.nodes[idx][3] = right
        return idx

    @staticmethod
    def _box_dist2(p, lo, hi):
        d = np.maximum(np.maximum(lo - p, p - hi), 0.0)
        return d @ d

    def distance(self, p):
        """Distance from a point to the closest triangle."""
        best = np.inf
        stack = [0]
        while stack:
            ni = stack.pop()
            lo, hi, left, right, ids = self.nodes[ni]
            if self._box_dist2(p, lo, hi) >= best:
                continue
            if ids is not None:
                for t in ids:
                    q = _closest_point_triangle(p, *self.tri[t])
                    d2 = float((p - q) @ (p - q))
                    if d2 < best:
                        best = d2
                continue
            # visit the nearer child first
            dl = self._box_dist2(p, *self.nodes[left][:2])
            dr = self._box_dist2(p, *self.nodes[right][:2])
            if dl < dr:
                stack.extend([right, left])
            else:
                stack.extend([left, right])
        return float(np.sqrt(best))


def p2sd(pred_mesh, gt_mesh, vertex_mask=None):
    """Mean point-to-surface distance (pred vertices -> gt triangles), cm.

    Directional: predicted vertices against the ground-truth surface.
    """
    pv = np.asarray(pred_mesh.vertices, dtype=float)
    if vertex_mask is not None:
        pv = pv[np.asarray(vertex_mask, dtype=bool)]
    bvh = TriangleBVH(gt_mesh.vertices, gt_mesh.faces)
    d = np.array([bvh.distance(p) for p in pv])
    return float(d.mean()) * 100.0


def p2sd_bruteforce(pred_mesh, gt_mesh, vertex_mask=None):
    """All-triangles scan oracle for p2sd (no acceleration structure)."""
    pv = np.asarray(pred_mesh.vertices, dtype=float)
    if vertex_mask is not None:
        pv = pv[np.asarray(vertex_mask, dtype=bool)]
    tri = np.asarray(gt_mesh.vertices, dtype=float)[np.asarray(gt_mesh.faces, dtype=int)]
    total = 0.0
    for p in pv:
        best = np.inf
        for t in range(len(tri)):
            q = _closest_point_triangle(p, tri[t, 0], tri[t, 1], tri[t, 2])
            best = min(best, float((p - q) @ (p - q)))
        total += np.sqrt(best)
    return total / len(pv) * 100.0


def psnr(img, target):
    """10 log10(1 / MSE) on [0, 1] images; identical images cap at 99 dB."""
    a = np.asarray(img, dtype=float)
    b = np.asarray(target, dtype=float)
    if a.shape != b.shape:
        raise ValueError("image resolutions must match")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB))


def ssim(img, target):
    """Mean SSIM value (not the loss), numpy convenience wrapper."""
    from .splat import ssim_t

    a = torch.as_tensor(np.asarray(img, dtype=float))
    b = torch.as_tensor(np.asarray(target, dtype=float))
    with torch.no_grad():
        return float(ssim_t(a, b))
