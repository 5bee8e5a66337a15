"""Test-time mesh refinement against the egocentric silhouette.

A fresh coordinate-based MLP is optimized per frame; its output offsets are
added to the input mesh. The objective is a weighted sum of a soft
silhouette energy, a uniform-Laplacian smoothness energy on the offsets,
and a part-based as-rigid-as-possible energy. A temporal low-pass filter
over the refined vertex sequence runs as a separate pass.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from . import camera as cam_mod
from .deform import BODY_PART, PosedMesh, edge_adjacency
from .softras import max_projected_edge, soft_coverage


@dataclass
class RefineConfig:
    w_sil: float = 800.0
    w_arap: float = 2.0
    w_lap: float = 0.1
    iters: int = 1000
    lr: float = 1e-3
    weight_decay: float = 1e-4
    temperature: float = 1.0  # soft-rasterizer sigmoid width, pixels
    huber_delta: float = 1e-4  # ARAP smoothed-L1 scale, meters
    filter_window: int = 5
    filter_sigma: float = 1.0
    divergence_factor: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if min(self.w_sil, self.w_arap, self.w_lap) < 0:
            raise ValueError("energy weights must be nonnegative")


class DeformationField(torch.nn.Module):
    """Small MLP v -> offset with per-batch normalization on hidden layers.

    Widths (3, 64, 64, 64, 3): three hidden affine+norm+ReLU blocks and a
    linear output. Normalization statistics are computed over the evaluation
    batch each forward pass, so evaluation is deterministic and state-free.
    The final layer is initialized near zero ("small initial deformation").
    """

    def __init__(self, widths=(3, 64, 64, 64, 3), init_scale=1e-5, seed=0, dtype=torch.float64):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.widths = tuple(widths)
        self.linears = torch.nn.ModuleList()
        self.gammas = torch.nn.ParameterList()
        self.betas = torch.nn.ParameterList()
        for i in range(len(widths) - 1):
            lin = torch.nn.Linear(widths[i], widths[i + 1], dtype=dtype)
            with torch.no_grad():
                bound = 1.0 / np.sqrt(widths[i])
                lin.weight.uniform_(-bound, bound, generator=gen)
                lin.bias.zero_()
            self.linears.append(lin)
            if i < len(widths) - 2:
                self.gammas.append(torch.nn.Parameter(torch.ones(widths[i + 1], dtype=dtype)))
                self.betas.append(torch.nn.Parameter(torch.zeros(widths[i + 1], dtype=dtype)))
        with torch.no_grad():
            self.linears[-1].weight.normal_(0.0, init_scale, generator=gen)
            self.linears[-1].bias.zero_()
        self.register_buffer("in_center", torch.zeros(3, dtype=dtype))
        self.register_buffer("in_scale", torch.ones(3, dtype=dtype))

    def set_input_normalization(self, points):
        """Normalize inputs to the bounding box of `points` (maps to [-1, 1])."""
        pts = torch.as_tensor(points, dtype=self.in_center.dtype)
        lo, hi = pts.min(dim=0).values, pts.max(dim=0).values
        self.in_center.copy_((lo + hi) / 2)
        self.in_scale.copy_(((hi - lo) / 2).clamp(min=1e-9))

    def forward(self, x, stats_batch=None):
        """Offsets for a batch of points; normalization stats come from
        `stats_batch` when given (otherwise from x itself)."""
        h = (x - self.in_center) / self.in_scale
        hs = None if stats_batch is None else (stats_batch - self.in_center) / self.in_scale
        n_hidden = len(self.widths) - 2
        for i in range(n_hidden):
            h = self.linears[i](h)
            if hs is not None:
                hs = self.linears[i](hs)
            ref = h if hs is None else hs
            mu = ref.mean(dim=0)
            std = torch.sqrt(ref.var(dim=0, unbiased=False) + 1e-5)
            h = torch.relu(self.gammas[i] * ((h - mu) / std) + self.betas[i])
            if hs is not None:
                hs = torch.relu(self.gammas[i] * ((hs - mu) / std) + self.betas[i])
        return self.linears[-1](h)


def eval_field(fld: DeformationField, points, stats_batch=None):
    """Numpy convenience wrapper around the field forward pass."""
    pts = torch.as_tensor(np.asarray(points, dtype=float))
    sb = None if stats_batch is None else torch.as_tensor(np.asarray(stats_batch, dtype=float))
    with torch.no_grad():
        out = fld(pts, stats_batch=sb)
    return out.numpy()


def silhouette_energy_t(verts_world, faces_t, cam, head, mask_t, temperature=1.0, edge_limit=None):
    """Torch silhouette energy: sum of squared coverage-vs-mask differences."""
    pc = cam_mod.world_to_camera(verts_world, head)
    pixels, valid = cam_mod.project(cam, pc)
    face_valid = valid[faces_t].all(dim=1)
    if not bool(face_valid.any()):
        warnings.warn("mesh is entirely outside the camera fov", RuntimeWarning)
    else:
        longest = float(max_projected_edge(pixels, faces_t, face_valid).detach())
        limit = edge_limit if edge_limit is not None else 0.5 * float(np.hypot(cam.width, cam.height))
        if longest > limit:
            raise ValueError(
                f"projected edge of {float(longest):.1f}px exceeds the small-triangle limit {limit:.1f}px"
            )
    cov = soft_coverage(pixels, faces_t, cam.height, cam.width, temperature=temperature, face_valid=face_valid)
    diff = cov - mask_t
    return (diff * diff).sum()


def silhouette_energy(mesh: PosedMesh, cam, head, mask, temperature=1.0):
    """Silhouette energy and its gradient w.r.t. the mesh vertices."""
    v = torch.as_tensor(mesh.vertices, dtype=torch.float64).requires_grad_(True)
    faces_t = torch.as_tensor(mesh.faces, dtype=torch.long)
    mask_t = torch.as_tensor(np.asarray(mask, dtype=float))
    e = silhouette_energy_t(v, faces_t, cam, head, mask_t, temperature=temperature)
    (grad,) = torch.autograd.grad(e, v)
    return float(e.detach()), grad.numpy()


def _pseudo_huber(sq_norm, delta):
    # sqrt(|r|^2 + delta^2) - delta: smooth at zero, |r|-asymptotic
    return torch.sqrt(sq_norm + delta * delta) - delta


def _best_fit_rigid(src, dst):
    """Least-squares rotation + translation mapping src onto dst (torch).

    Degenerate point sets (rank < 2 cross-covariance) fall back to a
    translation-only fit and emit a warning.
    """
    c_src = src.mean(dim=0)
    c_dst = dst.mean(dim=0)
    H = (src - c_src).T @ (dst - c_dst)
    U, S, Vh = torch.linalg.svd(H)
    s_max, s_mid = float(S[0].detach()), float(S[1].detach())
    scale = s_max if s_max > 0 else 1.0
    if s_mid < 1e-12 * scale:
        warnings.warn("degenerate part in rigid fit; using translation only", RuntimeWarning)
        R = torch.eye(3, dtype=src.dtype)
        return R, c_dst - c_src
    d = torch.sign(torch.det(Vh.T @ U.T))
    D = torch.diag(torch.stack([torch.ones((), dtype=src.dtype), torch.ones((), dtype=src.dtype), d]))
    R = Vh.T @ D @ U.T
    t = c_dst - R @ c_src
    return R, t


def arap_energy_t(part_labels, verts_before, verts_after, huber_delta=1e-4):
    """Part-based rigidity energy (torch): smoothed-L1 of residual norms.

    Each exposed part (label != BODY_PART) contributes its deviation from
    the best-fit rigid motion between the before/after vertex sets.
    """
    labels = np.asarray(part_labels)
    total = torch.zeros((), dtype=verts_before.dtype)
    for label in np.unique(labels):
        if label == BODY_PART:
            continue
        ids = torch.as_tensor(np.flatnonzero(labels == label), dtype=torch.long)
        src = verts_before[ids]
        dst = verts_after[ids]
        R, t = _best_fit_rigid(src, dst)
        res = dst - (src @ R.T + t)
        total = total + _pseudo_huber((res * res).sum(dim=1), huber_delta).sum()
    return total


def arap_energy(template, verts_before, verts_after, huber_delta=1e-4):
    """ARAP energy plus gradient w.r.t. the deformed (after) vertices."""
    vb = torch.as_tensor(np.asarray(verts_before, dtype=float))
    va = torch.as_tensor(np.asarray(verts_after, dtype=float)).requires_grad_(True)
    e = arap_energy_t(template.part_labels, vb, va, huber_delta=huber_delta)
    if e.requires_grad:
        (grad,) = torch.autograd.grad(e, va)
        grad = grad.numpy()
    else:  # no exposed parts
        grad = np.zeros_like(verts_after, dtype=float)
    return float(e), grad


def laplacian_energy_t(offsets, neighbor_idx, neighbor_ptr):
    """Uniform-Laplacian smoothness on per-vertex offsets (torch, CSR lists)."""
    deg = (neighbor_ptr[1:] - neighbor_ptr[:-1]).clamp(min=1)
    owner = torch.repeat_interleave(torch.arange(len(deg)), neighbor_ptr[1:] - neighbor_ptr[:-1])
    sums = torch.zeros_like(offsets)
    sums.index_add_(0, owner, offsets[neighbor_idx])
    lap = offsets - sums / deg[:, None].to(offsets.dtype)
    return (lap * lap).sum()


def neighbor_csr(faces, n_vertices):
    """CSR-style (indices, ptr) neighbor lists from triangle connectivity."""
    edges = edge_adjacency(faces, n_vertices)
    both = np.concatenate([edges, edges[:, ::-1]], axis=0)
    order = np.lexsort((both[:, 1], both[:, 0]))
    both = both[order]
    counts = np.bincount(both[:, 0], minlength=n_vertices)
    ptr = np.concatenate([[0], np.cumsum(counts)])
    return torch.as_tensor(both[:, 1], dtype=torch.long), torch.as_tensor(ptr, dtype=torch.long)


@dataclass
class RefineResult:
    mesh: PosedMesh
    energy_trace: list
    initial_energy: float
    final_energy: float
    diverged: bool = False
    field: DeformationField = field(default=None, repr=False)


def refine_frame(mesh: PosedMesh, cam, head, mask, cfg: RefineConfig) -> RefineResult:
    """Optimize a fresh deformation field for one frame.

    Returns the refined mesh; on divergence (energy exceeding the configured
    multiple of the initial energy) the input mesh is returned with a
    warning.
    """
    tpl = mesh.template
    v0 = torch.as_tensor(mesh.vertices, dtype=torch.float64)
    faces_t = torch.as_tensor(mesh.faces, dtype=torch.long)
    mask_t = torch.as_tensor(np.asarray(mask, dtype=float))
    if mask_t.shape != (cam.height, cam.width):
        raise ValueError("mask resolution must match the camera")
    nbr_idx, nbr_ptr = neighbor_csr(mesh.faces, tpl.n_vertices)

    fld = DeformationField(seed=cfg.seed + 1000 * mesh.frame_index)
    fld.set_input_normalization(v0)
    opt = torch.optim.Adam(fld.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    def energy():
        offsets = fld(v0)
        v = v0 + offsets
        e = cfg.w_sil * silhouette_energy_t(v, faces_t, cam, head, mask_t, temperature=cfg.temperature)
        if cfg.w_lap > 0:
            e = e + cfg.w_lap * laplacian_energy_t(offsets, nbr_idx, nbr_ptr)
        if cfg.w_arap > 0:
            e = e + cfg.w_arap * arap_energy_t(tpl.part_labels, v0, v, huber_delta=cfg.huber_delta)
        return e

    with torch.no_grad():
        e0 = float(energy())
    trace = [e0]
    for _ in range(cfg.iters):
        opt.zero_grad()
        e = energy()
        ev = float(e.detach())
        if not np.isfinite(ev) or ev > cfg.divergence_factor * max(e0, 1e-30):
            warnings.warn("refinement diverged; returning the unrefined mesh", RuntimeWarning)
            return RefineResult(mesh, trace, e0, trace[-1], diverged=True, field=fld)
        e.backward()
        opt.step()
        trace.append(ev)
    with torch.no_grad():
        v_out = (v0 + fld(v0)).numpy()
    return RefineResult(mesh.with_vertices(v_out), trace, e0, trace[-1], field=fld)


# ---------------------------------------------------------------------------
# File formats

MESH_SEQ_MAGIC = b"EGMS"


def save_mesh_sequence(path, meshes):
    """Binary mesh sequence: magic, V, F, frame count, float32 vertex blocks."""
    import struct

    V = meshes[0].vertices.shape[0]
    F = len(meshes[0].faces)
    with open(path, "wb") as f:
        f.write(MESH_SEQ_MAGIC)
        f.write(struct.pack("<III", V, F, len(meshes)))
        for m in meshes:
            if m.vertices.shape[0] != V:
                raise ValueError("mesh sequence frames must share a vertex count")
            f.write(np.ascontiguousarray(m.vertices, dtype="<f4").tobytes())


def load_mesh_sequence(path, template=None):
    """Read a mesh sequence; returns PosedMesh list if a template is given,
    else the raw (n_frames, V, 3) float array plus the (V, F) header."""
    import struct

    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MESH_SEQ_MAGIC:
            raise ValueError(f"not a mesh sequence file: bad magic {magic!r}")
        V, F, n = struct.unpack("<III", f.read(12))
        data = np.frombuffer(f.read(4 * 3 * V * n), dtype="<f4").astype(float).reshape(n, V, 3)
    if template is None:
        return data, (V, F)
    if template.n_vertices != V:
        raise ValueError(f"mesh sequence has {V} vertices, template has {template.n_vertices}")
    return [PosedMesh(vertices=data[t], template=template, frame_index=t) for t in range(n)]


def save_mask_png(mask, path):
    """8-bit grayscale PNG, 255 = foreground. Accepts [0,1] floats or uint8."""
    from PIL import Image

    m = np.asarray(mask)
    if m.dtype != np.uint8:
        m = np.clip(np.round(np.asarray(m, dtype=float) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(m, mode="L").save(path)


def load_mask_png(path):
    """Mask PNG to float [0, 1]."""
    from PIL import Image

    return np.asarray(Image.open(path).convert("L"), dtype=float) / 255.0


def gaussian_kernel(window, sigma):
    if window < 1 or window % 2 == 0:
        raise ValueError("filter window must be a positive odd integer")
    half = window // 2
    x = np.arange(-half, half + 1, dtype=float)
    k = np.exp(-0.5 * (x / max(sigma, 1e-9)) ** 2)
    return k / k.sum()


def temporal_lowpass(meshes, window=5, sigma=1.0):
    """Per-vertex Gaussian moving average over a mesh sequence.

    Endpoints use the truncated, renormalized kernel. window=1 is identity.
    """
    if window == 1:
        return list(meshes)
    k = gaussian_kernel(window, sigma)
    half = window // 2
    verts = np.stack([m.vertices for m in meshes])
    n = len(meshes)
    out = []
    for t in range(n):
        lo, hi = max(0, t - half), min(n, t + half + 1)
        w = k[lo - t + half : hi - t + half]
        w = w / w.sum()
        out.append(meshes[t].with_vertices(np.einsum("w,wvi->vi", w, verts[lo:hi])))
    return out
