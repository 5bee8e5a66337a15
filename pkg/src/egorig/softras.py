"""Differentiable soft silhouette rasterization in image space.

Coverage at a pixel is aggregated over triangles through a sigmoid of the
2D signed distance to each projected triangle (positive inside):

    coverage = 1 - prod_t (1 - sigmoid(d_t / temperature))
             = 1 - exp(-sum_t softplus(d_t / temperature))

The softplus form is exact and avoids saturation of the product. Pixel
(row, col) samples continuous image coordinates (x=col, y=row), matching
the camera model's principal-point convention.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F


def pixel_grid(height, width, dtype=torch.float64):
    """(H*W, 2) pixel-center coordinates, x then y."""
    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=dtype), torch.arange(width, dtype=dtype), indexing="ij"
    )
    return torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1)


def signed_distance_to_triangles(pixels, tri_xy):
    """Signed 2D distance from pixels to triangles, positive inside.

    pixels: (P, 2); tri_xy: (F, 3, 2). Returns (F, P). Distance to the
    boundary is the minimum over the three edge segments; the sign comes
    from a winding-agnostic same-side test. Degenerate triangles are
    treated as everywhere-outside.
    """
    a = tri_xy[:, :, None, :]  # (F, 3, 1, 2) edge starts
    b = tri_xy[:, [1, 2, 0], None, :]  # edge ends
    p = pixels[None, None, :, :]  # (1, 1, P, 2)
    ab = b - a
    ap = p - a
    denom = (ab * ab).sum(-1).clamp(min=1e-30)
    t = ((ap * ab).sum(-1) / denom).clamp(0.0, 1.0)
    diff = ap - t[..., None] * ab
    d2 = (diff * diff).sum(-1)  # (F, 3, P)
    d2_min = d2.min(dim=1).values
    s = ab[..., 0] * ap[..., 1] - ab[..., 1] * ap[..., 0]  # (F, 3, P)
    inside = (s >= 0).all(dim=1) | (s <= 0).all(dim=1)
    area2 = torch.abs(
        (tri_xy[:, 1, 0] - tri_xy[:, 0, 0]) * (tri_xy[:, 2, 1] - tri_xy[:, 0, 1])
        - (tri_xy[:, 1, 1] - tri_xy[:, 0, 1]) * (tri_xy[:, 2, 0] - tri_xy[:, 0, 0])
    )
    ok = (area2 > 1e-20)[:, None]
    dist = torch.sqrt(d2_min.clamp(min=1e-30))
    return torch.where(inside & ok, dist, -dist)


def soft_coverage(verts_px, faces, height, width, temperature=1.0, face_valid=None):
    """Soft foreground coverage image, (H, W) in (0, 1).

    verts_px: (V, 2) projected vertex pixels (torch, differentiable).
    face_valid: optional (F,) bool; invalid faces contribute nothing.
    """
    tri = verts_px[faces]  # (F, 3, 2)
    if face_valid is not None:
        tri = tri[face_valid]
    if tri.shape[0] == 0:
        # keep the autograd graph alive with a zero-valued dependency
        return torch.zeros(height, width, dtype=verts_px.dtype) + 0.0 * verts_px.sum()
    pix = pixel_grid(height, width, dtype=verts_px.dtype)
    d = signed_distance_to_triangles(pix, tri)
    acc = F.softplus(d / temperature).sum(dim=0)
    return (1.0 - torch.exp(-acc)).reshape(height, width)


def max_projected_edge(verts_px, faces, face_valid=None):
    """Longest projected triangle edge in pixels (small-triangle check)."""
    tri = verts_px[faces]
    if face_valid is not None:
        tri = tri[face_valid]
    if tri.shape[0] == 0:
        return torch.zeros((), dtype=verts_px.dtype)
    e = torch.stack([tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 1], tri[:, 0] - tri[:, 2]])
    return torch.linalg.norm(e, dim=-1).max()
