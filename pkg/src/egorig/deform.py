"""Template character, embedded-graph deformation, and linear blend skinning.

The posed mesh is the composition
    posed = skin(embedded_deform(template, params), skeleton, pose)
i.e. a coarse per-node rigid blend plus per-vertex offsets in canonical
space, followed by skeleton-driven skinning.

Both stages are written in a weight-normalized form that returns the input
bitwise-exactly under identity parameters / zero pose.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .rotations import axis_angle_jacobian, axis_angle_to_matrix
from .skeleton import Skeleton, PoseVector, attached_point_jacobian, forward_kinematics

# part label 0 is the default body; labels >= 1 are the exposed rigid parts
BODY_PART = 0


def _check_weight_rows(w, what):
    if np.any(w < -1e-12):
        raise ValueError(f"{what} must be nonnegative")
    sums = w.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError(f"{what} rows must sum to 1 (max deviation {np.abs(sums - 1).max():.2e})")


@dataclass
class TemplateCharacter:
    """Rest-pose mesh with UV atlas, embedded graph, and skinning data.

    node_idx/node_w and skin_idx/skin_w are fixed-width sparse rows
    (k nearest nodes / joints per vertex), rows normalized to sum to 1.
    uvs are per-corner, shape (F, 3, 2), in [0, 1]^2.
    """

    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    uvs: np.ndarray  # (F, 3, 2)
    graph_nodes: np.ndarray  # (G, 3)
    node_idx: np.ndarray  # (V, Kn) int
    node_w: np.ndarray  # (V, Kn)
    skin_idx: np.ndarray  # (V, Kj) int
    skin_w: np.ndarray  # (V, Kj)
    part_labels: np.ndarray  # (V,) int, BODY_PART = unconstrained
    part_names: tuple = ("body",)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.faces = np.asarray(self.faces, dtype=int)
        self.uvs = np.asarray(self.uvs, dtype=float)
        self.graph_nodes = np.asarray(self.graph_nodes, dtype=float)
        self.node_idx = np.asarray(self.node_idx, dtype=int)
        self.node_w = np.asarray(self.node_w, dtype=float)
        self.skin_idx = np.asarray(self.skin_idx, dtype=int)
        self.skin_w = np.asarray(self.skin_w, dtype=float)
        self.part_labels = np.asarray(self.part_labels, dtype=int)

        V = len(self.vertices)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= V):
            raise ValueError("face indices out of range")
        if self.uvs.shape != self.faces.shape + (2,):
            raise ValueError("uvs must be per-corner, shape (F, 3, 2)")
        _check_weight_rows(self.node_w, "node weights")
        _check_weight_rows(self.skin_w, "skin weights")
        if self.part_labels.shape != (V,):
            raise ValueError("part_labels must be per-vertex")

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_nodes(self):
        return len(self.graph_nodes)

    def part_vertex_ids(self):
        """Vertex index arrays of the exposed (ARAP-constrained) parts."""
        out = {}
        for label in np.unique(self.part_labels):
            if label != BODY_PART:
                out[int(label)] = np.flatnonzero(self.part_labels == label)
        return out


@dataclass(frozen=True)
class EmbeddedParams:
    """Per-node rotations (axis-angle) and translations, per-vertex offsets."""

    rotations: np.ndarray  # (G, 3) axis-angle
    translations: np.ndarray  # (G, 3)
    offsets: np.ndarray  # (V, 3)

    def __post_init__(self):
        object.__setattr__(self, "rotations", np.asarray(self.rotations, dtype=float))
        object.__setattr__(self, "translations", np.asarray(self.translations, dtype=float))
        object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=float))
        for a in (self.rotations, self.translations, self.offsets):
            if not np.all(np.isfinite(a)):
                raise ValueError("embedded params must be finite")

    @staticmethod
    def identity(template):
        return EmbeddedParams(
            rotations=np.zeros((template.n_nodes, 3)),
            translations=np.zeros((template.n_nodes, 3)),
            offsets=np.zeros((template.n_vertices, 3)),
        )


@dataclass(frozen=True)
class PosedMesh:
    """World-space vertices sharing the template's faces and UVs."""

    vertices: np.ndarray  # (V, 3)
    template: TemplateCharacter
    frame_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=float))
        if self.vertices.shape != (self.template.n_vertices, 3):
            raise ValueError("vertex count must match the template")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("vertices must be finite")

    @property
    def faces(self):
        return self.template.faces

    @property
    def uvs(self):
        return self.template.uvs

    def with_vertices(self, vertices, frame_index=None):
        return replace(self, vertices=vertices, frame_index=self.frame_index if frame_index is None else frame_index)


def _check_params(template, params):
    if params.rotations.shape != (template.n_nodes, 3) or params.translations.shape != (template.n_nodes, 3):
        raise ValueError("node parameter count must match the graph")
    if params.offsets.shape != (template.n_vertices, 3):
        raise ValueError("offset count must match the vertices")


def embedded_deform(template: TemplateCharacter, params: EmbeddedParams):
    """Canonical vertices q_i = d_i + sum_k w_ik (R_k (p_i - g_k) + g_k + t_k).

    Computed as p_i + d_i + sum_k w_ik ((R_k - I)(p_i - g_k) + t_k), which is
    algebraically equal under the row-sum-1 weight invariant and returns the
    template bitwise-exactly for identity parameters.
    """
    _check_params(template, params)
    R = axis_angle_to_matrix(params.rotations)  # (G, 3, 3)
    RmI = R - np.eye(3)
    p = template.vertices
    g = template.graph_nodes[template.node_idx]  # (V, K, 3)
    rel = p[:, None, :] - g
    moved = np.einsum("vkij,vkj->vki", RmI[template.node_idx], rel) + params.translations[template.node_idx]
    return p + params.offsets + np.einsum("vk,vki->vi", template.node_w, moved)


def embedded_deform_jvp(template, params, d_rot, d_trans, d_off):
    """Directional derivative of embedded_deform along a parameter tangent."""
    _check_params(template, params)
    d_rot = np.asarray(d_rot, dtype=float)
    d_trans = np.asarray(d_trans, dtype=float)
    d_off = np.asarray(d_off, dtype=float)
    G = template.n_nodes
    dR = np.zeros((G, 3, 3))
    for k in range(G):
        Jk = axis_angle_jacobian(params.rotations[k])  # (3, 3, 3)
        dR[k] = np.einsum("i,ijk->jk", d_rot[k], Jk)
    p = template.vertices
    g = template.graph_nodes[template.node_idx]
    rel = p[:, None, :] - g
    moved = np.einsum("vkij,vkj->vki", dR[template.node_idx], rel) + d_trans[template.node_idx]
    return d_off + np.einsum("vk,vki->vi", template.node_w, moved)


def skinning_transforms(skeleton: Skeleton, pose: PoseVector, fk=None):
    """Rest-relative joint transforms (R_k, t_k) with v = R_k q + t_k.

    Rest world rotations are exactly identity (zero pose has no rotation
    anywhere), so the inverse bind reduces to subtracting rest positions.
    """
    if fk is None:
        fk = forward_kinematics(skeleton, pose)
    rest_t = skeleton.rest_positions()
    R = fk.rotations
    t = fk.joint_positions - np.einsum("kij,kj->ki", R, rest_t)
    return R, t


def skin(template: TemplateCharacter, q, skeleton: Skeleton, pose: PoseVector, frame_index=None) -> PosedMesh:
    """Linear blend skinning of canonical vertices q by the posed skeleton.

    Written as q_i + sum_k w_ik ((R_k - I) q_i + t_k) so the zero pose is a
    bitwise no-op.
    """
    q = np.asarray(q, dtype=float)
    if q.shape != (template.n_vertices, 3):
        raise ValueError("canonical vertex count must match the template")
    if template.skin_idx.max() >= skeleton.n_joints:
        raise ValueError("skin weights reference joints outside the skeleton")
    R, t = skinning_transforms(skeleton, pose)
    RmI = R - np.eye(3)
    moved = np.einsum("vkij,vj->vki", RmI[template.skin_idx], q) + t[template.skin_idx]
    v = q + np.einsum("vk,vki->vi", template.skin_w, moved)
    return PosedMesh(vertices=v, template=template, frame_index=pose.frame_index if frame_index is None else frame_index)


def skin_pose_jacobian(template, q, skeleton, pose):
    """Jacobian of skinned vertices w.r.t. the pose DoFs, (V, 3, n_dof).

    The image of q_i under joint k's transform is a point rigidly attached
    to joint k, so the per-joint images reuse the attached-point Jacobian.
    """
    q = np.asarray(q, dtype=float)
    fk = forward_kinematics(skeleton, pose)
    R, t = skinning_transforms(skeleton, pose, fk)
    V, K = template.skin_idx.shape
    flat_idx = template.skin_idx.reshape(-1)
    images = np.einsum("nij,nj->ni", R[flat_idx], np.repeat(q, K, axis=0)) + t[flat_idx]
    J = attached_point_jacobian(skeleton, pose, images, flat_idx, fk=fk)
    J = J.reshape(V, K, 3, skeleton.n_dof)
    return np.einsum("vk,vkid->vid", template.skin_w, J)


def pose_mesh(template, params, skeleton, pose):
    """Full character model: embedded deformation followed by skinning."""
    return skin(template, embedded_deform(template, params), skeleton, pose)


def vertex_normals(mesh: PosedMesh):
    """Area-weighted per-vertex unit normals.

    Isolated vertices (or vertices whose incident faces cancel) get a zero
    normal and trigger a warning.
    """
    v = mesh.vertices
    f = mesh.faces
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    n = np.zeros_like(v)
    for c in range(3):
        np.add.at(n, f[:, c], fn)
    norms = np.linalg.norm(n, axis=1)
    bad = norms < 1e-14
    if np.any(bad):
        warnings.warn(f"{int(bad.sum())} vertices have a degenerate normal", RuntimeWarning)
    n[~bad] /= norms[~bad, None]
    return n


def edge_adjacency(faces, n_vertices):
    """Unique undirected edges of a triangle mesh as an (E, 2) index array."""
    faces = np.asarray(faces, dtype=int)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=0)
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def uniform_laplacian(faces, n_vertices):
    """Normalized combinatorial Laplacian L = I - D^-1 A as sparse CSR.

    Constant fields are in the kernel; isolated vertices get a zero row.
    """
    edges = edge_adjacency(faces, n_vertices)
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    A = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_vertices, n_vertices)).tocsr()
    deg = np.asarray(A.sum(axis=1)).ravel()
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    D_inv = sp.diags(inv)
    I = sp.diags((deg > 0).astype(float))
    return (I - D_inv @ A).tocsr()


def laplacian_energy(L, offsets):
    """E = sum_i |L offsets_i|^2 with gradient 2 L^T L offsets."""
    offsets = np.asarray(offsets, dtype=float)
    Lx = L @ offsets
    return float(np.sum(Lx * Lx)), 2.0 * (L.T @ Lx)


# ---------------------------------------------------------------------------
# Construction helpers


def nearest_node_weights(vertices, nodes, k=4):
    """Inverse-distance weights over the k nearest graph nodes per vertex."""
    k = min(k, len(nodes))
    tree = cKDTree(nodes)
    dist, idx = tree.query(vertices, k=k)
    dist = np.atleast_2d(dist.reshape(len(vertices), k))
    idx = np.atleast_2d(idx.reshape(len(vertices), k))
    w = 1.0 / np.maximum(dist, 1e-9)
    w /= w.sum(axis=1, keepdims=True)
    return idx, w


def farthest_point_sample(points, n_samples, start=0):
    """Greedy farthest-point subset of row indices; deterministic given start."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    n_samples = min(n_samples, n)
    chosen = np.empty(n_samples, dtype=int)
    chosen[0] = start
    d = np.linalg.norm(points - points[start], axis=1)
    for i in range(1, n_samples):
        nxt = int(np.argmax(d))
        chosen[i] = nxt
        d = np.minimum(d, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


def validate_uv_atlas(template, resolution=256):
    """Check that UV charts do not overlap by rasterizing texel centers.

    A texel claimed by two faces that share no vertex is an overlap error.
    """
    owner = np.full((resolution, resolution), -1, dtype=int)
    for fi in range(len(template.faces)):
        cover = _texels_in_uv_triangle(template.uvs[fi], resolution)
        for (r, c, *_bary) in cover:
            prev = owner[r, c]
            if prev >= 0 and not set(template.faces[prev]) & set(template.faces[fi]):
                raise ValueError(f"UV charts overlap: faces {prev} and {fi} both cover texel {(r, c)}")
            if prev < 0:
                owner[r, c] = fi
    return owner


def _texels_in_uv_triangle(uv_tri, resolution):
    """(row, col) texel centers covered by one UV triangle."""
    uv = np.asarray(uv_tri, dtype=float) * resolution - 0.5  # texel-center grid coords
    lo = np.floor(uv.min(axis=0)).astype(int)
    hi = np.ceil(uv.max(axis=0)).astype(int)
    out = []
    a, b, c = uv
    den = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1])
    if abs(den) < 1e-15:
        return out
    for r in range(max(lo[1], 0), min(hi[1] + 1, resolution)):
        for col in range(max(lo[0], 0), min(hi[0] + 1, resolution)):
            p = np.array([col, r], dtype=float)
            w0 = ((b[1] - c[1]) * (p[0] - c[0]) + (c[0] - b[0]) * (p[1] - c[1])) / den
            w1 = ((c[1] - a[1]) * (p[0] - c[0]) + (a[0] - c[0]) * (p[1] - c[1])) / den
            w2 = 1.0 - w0 - w1
            if w0 >= 0 and w1 >= 0 and w2 >= 0:
                out.append((r, col, w0, w1, w2))
    return out


# ---------------------------------------------------------------------------
# OBJ + sidecar file format


def save_obj(path, vertices, faces, uvs=None):
    """Minimal OBJ writer (v / vt / f with per-corner vt indices)."""
    with open(path, "w") as f:
        for v in vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        if uvs is not None:
            for tri in uvs:
                for uv in tri:
                    f.write(f"vt {uv[0]:.9g} {uv[1]:.9g}\n")
            for fi, tri in enumerate(faces):
                t = 3 * fi
                f.write(f"f {tri[0]+1}/{t+1} {tri[1]+1}/{t+2} {tri[2]+1}/{t+3}\n")
        else:
            for tri in faces:
                f.write(f"f {tri[0]+1} {tri[1]+1} {tri[2]+1}\n")


def load_obj(path):
    """Minimal OBJ reader; returns (vertices, faces, per_corner_uvs or None)."""
    verts, vts, faces, face_uv = [], [], [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vt":
                vts.append([float(x) for x in parts[1:3]])
            elif parts[0] == "f":
                vi, ti = [], []
                for tok in parts[1:4]:
                    sub = tok.split("/")
                    vi.append(int(sub[0]) - 1)
                    ti.append(int(sub[1]) - 1 if len(sub) > 1 and sub[1] else -1)
                faces.append(vi)
                face_uv.append(ti)
    verts = np.asarray(verts, dtype=float)
    faces = np.asarray(faces, dtype=int)
    face_uv = np.asarray(face_uv, dtype=int)
    uvs = None
    if vts and np.all(face_uv >= 0):
        uvs = np.asarray(vts, dtype=float)[face_uv]
    return verts, faces, uvs


def save_character(template, obj_path, sidecar_path):
    save_obj(obj_path, template.vertices, template.faces, template.uvs)
    data = {
        "graph_nodes": template.graph_nodes.tolist(),
        "node_idx": template.node_idx.tolist(),
        "node_w": template.node_w.tolist(),
        "skin_idx": template.skin_idx.tolist(),
        "skin_w": template.skin_w.tolist(),
        "part_labels": template.part_labels.tolist(),
        "part_names": list(template.part_names),
    }
    with open(sidecar_path, "w") as f:
        json.dump(data, f, sort_keys=True)


def load_character(obj_path, sidecar_path, node_k=4):
    """Load an OBJ plus sidecar JSON; graph weights are rebuilt if absent."""
    vertices, faces, uvs = load_obj(obj_path)
    if uvs is None:
        raise ValueError(f"{obj_path}: character OBJ must carry per-corner UVs")
    with open(sidecar_path) as f:
        data = json.load(f)
    nodes = np.asarray(data["graph_nodes"], dtype=float)
    if "node_idx" in data and "node_w" in data:
        node_idx = np.asarray(data["node_idx"], dtype=int)
        node_w = np.asarray(data["node_w"], dtype=float)
    else:
        node_idx, node_w = nearest_node_weights(vertices, nodes, k=node_k)
    tpl = TemplateCharacter(
        vertices=vertices,
        faces=faces,
        uvs=uvs,
        graph_nodes=nodes,
        node_idx=node_idx,
        node_w=node_w,
        skin_idx=np.asarray(data["skin_idx"], dtype=int),
        skin_w=np.asarray(data["skin_w"], dtype=float),
        part_labels=np.asarray(data["part_labels"], dtype=int),
        part_names=tuple(data.get("part_names", ("body",))),
    )
    return tpl
