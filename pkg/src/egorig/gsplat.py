"""Software Gaussian-splat rasterizer with front-to-back alpha compositing.

Two implementations share the projection math:

* `rasterize` — vectorized torch path. Splats are culled to the pixel
  window where their alpha can reach the cutoff, (pixel, splat) pairs are
  sorted by (pixel, depth, splat index), and per-pixel transmittance is an
  exclusive segmented product computed in log space. Differentiable w.r.t.
  splat parameters; float64 throughout.
* `rasterize_reference` — an independent brute-force numpy loop over
  pixels used as the compositing oracle.

Per pixel: C = sum_i c_i a_i prod_{j<i} (1 - a_j) + prod_j (1 - a_j) * bg,
a_i = min(o_i G2D_i(pixel), 0.999), contributions with a_i below the cutoff
(default 1/255) are skipped. Splats are depth-sorted by camera-frame
distance with a stable index tie-break.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import camera as cam_mod
from .sh import sh_eval

ALPHA_MAX = 0.999
DEFAULT_ALPHA_CUTOFF = 1.0 / 255.0


@dataclass
class SplatSet:
    """World-space Gaussians: positions, rotations, scales, opacity, color.

    Color is either SH coefficients (N, 16, 3), evaluated per view at
    rasterization time, or explicit rgb (N, 3). Tensors are torch float64;
    covariance is materialized on demand.
    """

    positions: torch.Tensor  # (N, 3)
    rotations: torch.Tensor  # (N, 4) unit quaternions (w, x, y, z)
    scales: torch.Tensor  # (N, 3) > 0
    opacities: torch.Tensor  # (N,) in (0, 1)
    sh: torch.Tensor = None  # (N, 16, 3) or None
    rgb: torch.Tensor = None  # (N, 3) or None

    def __len__(self):
        return int(self.positions.shape[0])

    def colors_for_view(self, cam_center):
        if self.rgb is not None:
            return self.rgb
        d = self.positions - torch.as_tensor(cam_center, dtype=self.positions.dtype)
        d = d / torch.linalg.norm(d, dim=-1, keepdim=True).clamp(min=1e-12)
        return sh_eval(self.sh, d)


@dataclass
class RenderedImage:
    """Composited image: rgb clamped to [0, 1], alpha = 1 - background weight."""

    rgb: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    camera_id: str = ""
    frame_index: int = 0


def quat_to_matrix_t(q):
    """Unit quaternion (w, x, y, z) to rotation matrix, torch, batched."""
    q = q / torch.linalg.norm(q, dim=-1, keepdim=True).clamp(min=1e-12)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1),
        torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1),
        torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def covariance(scales, quats):
    """World covariance R diag(s^2) R^T; eigenvalues are the squared scales."""
    R = quat_to_matrix_t(quats)
    S2 = scales * scales
    return R @ (S2[..., None] * R.transpose(-1, -2))


def quat_multiply_t(q1, q2):
    """Hamilton product q1 * q2 (torch, batched)."""
    w1, x1, y1, z1 = q1[..., 0], q1[..., 1], q1[..., 2], q1[..., 3]
    w2, x2, y2, z2 = q2[..., 0], q2[..., 1], q2[..., 2], q2[..., 3]
    return torch.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        dim=-1,
    )


def project_splats(splats, cam, head, cov2d_dilation=0.0):
    """Project splats into the view: pixel means, 2D covariances, depth.

    The 2D covariance uses the first-order camera Jacobian at the mean.
    Depth is the camera-frame distance (monotone for fisheye fields of
    view beyond 90 degrees).
    """
    R_wc = torch.as_tensor(head.rotation, dtype=splats.positions.dtype)
    p_cam = cam_mod.world_to_camera(splats.positions, head)
    mean2d, valid = cam_mod.project(cam, p_cam)
    J = cam_mod.projection_jacobian(cam, p_cam)  # (N, 2, 3)
    cov_world = covariance(splats.scales, splats.rotations)
    cov_cam = R_wc.T @ cov_world @ R_wc
    cov2d = J @ cov_cam @ J.transpose(-1, -2)
    if cov2d_dilation > 0:
        cov2d = cov2d + cov2d_dilation * torch.eye(2, dtype=cov2d.dtype)
    depth = torch.linalg.norm(p_cam, dim=-1)
    valid = valid & (depth > 1e-9) & torch.isfinite(mean2d).all(dim=-1)
    return mean2d, cov2d, depth, valid


def _inv2x2(M):
    a, b, c, d = M[..., 0, 0], M[..., 0, 1], M[..., 1, 0], M[..., 1, 1]
    det = (a * d - b * c).clamp(min=1e-30)
    inv = torch.stack(
        [torch.stack([d, -b], dim=-1), torch.stack([-c, a], dim=-1)], dim=-2
    ) / det[..., None, None]
    return inv, det


def rasterize(
    splats: SplatSet,
    cam,
    head,
    background=(0.0, 0.0, 0.0),
    alpha_cutoff=DEFAULT_ALPHA_CUTOFF,
    cov2d_dilation=0.0,
    return_torch=False,
):
    """Composite the splat set into an image.

    With return_torch=True returns raw (rgb, alpha, weight_sum) tensors kept
    on the autograd graph (rgb unclamped); otherwise a RenderedImage with
    rgb clamped to [0, 1].
    """
    H, W = cam.height, cam.width
    dtype = torch.float64
    bg = torch.as_tensor(background, dtype=dtype)
    empty_rgb = bg.expand(H, W, 3)
    if len(splats) == 0:
        if return_torch:
            return empty_rgb.clone(), torch.zeros(H, W, dtype=dtype), torch.zeros(H, W, dtype=dtype)
        return RenderedImage(rgb=empty_rgb.numpy().copy(), alpha=np.zeros((H, W)))

    mean2d, cov2d, depth, valid = project_splats(splats, cam, head, cov2d_dilation=cov2d_dilation)
    colors = splats.colors_for_view(np.asarray(head.translation, dtype=float))
    opac = splats.opacities

    inv_cov, det = _inv2x2(cov2d)
    keep = valid & (det > 1e-30) & torch.isfinite(depth)
    if alpha_cutoff > 0:
        keep = keep & (opac > alpha_cutoff)
    idx_all = torch.nonzero(keep).squeeze(-1)
    if idx_all.numel() == 0:
        if return_torch:
            return empty_rgb.clone(), torch.zeros(H, W, dtype=dtype), torch.zeros(H, W, dtype=dtype)
        return RenderedImage(rgb=empty_rgb.numpy().copy(), alpha=np.zeros((H, W)))

    # pixel windows where alpha can reach the cutoff (whole image if cutoff=0)
    with torch.no_grad():
        if alpha_cutoff > 0:
            eig_max = torch.linalg.eigvalsh(cov2d[idx_all]).max(dim=-1).values
            radius = torch.sqrt((2.0 * torch.log(opac[idx_all] / alpha_cutoff)).clamp(min=0.0) * eig_max)
            x0 = torch.ceil(mean2d[idx_all, 0] - radius).clamp(0, W - 1).long()
            x1 = torch.floor(mean2d[idx_all, 0] + radius).clamp(0, W - 1).long()
            y0 = torch.ceil(mean2d[idx_all, 1] - radius).clamp(0, H - 1).long()
            y1 = torch.floor(mean2d[idx_all, 1] + radius).clamp(0, H - 1).long()
            inside = (mean2d[idx_all, 0] + radius >= 0) & (mean2d[idx_all, 0] - radius <= W - 1)
            inside &= (mean2d[idx_all, 1] + radius >= 0) & (mean2d[idx_all, 1] - radius <= H - 1)
            x0, x1, y0, y1 = x0[inside], x1[inside], y0[inside], y1[inside]
            idx_all = idx_all[inside]
        else:
            n = idx_all.numel()
            x0 = torch.zeros(n, dtype=torch.long)
            x1 = torch.full((n,), W - 1, dtype=torch.long)
            y0 = torch.zeros(n, dtype=torch.long)
            y1 = torch.full((n,), H - 1, dtype=torch.long)
        if idx_all.numel() == 0:
            if return_torch:
                return empty_rgb.clone(), torch.zeros(H, W, dtype=dtype), torch.zeros(H, W, dtype=dtype)
            return RenderedImage(rgb=empty_rgb.numpy().copy(), alpha=np.zeros((H, W)))
        widths = (x1 - x0 + 1).clamp(min=0)
        heights = (y1 - y0 + 1).clamp(min=0)
        counts = widths * heights
        pair_splat = torch.repeat_interleave(torch.arange(idx_all.numel()), counts)
        starts = torch.cumsum(counts, 0) - counts
        local = torch.arange(int(counts.sum())) - starts[pair_splat]
        px = x0[pair_splat] + local % widths[pair_splat]
        py = y0[pair_splat] + local // widths[pair_splat]
        pixel_id = py * W + px
        # global depth rank with stable index tie-break
        order = torch.argsort(depth[idx_all], stable=True)
        rank = torch.empty_like(order)
        rank[order] = torch.arange(order.numel())
        key = pixel_id * idx_all.numel() + rank[pair_splat]
        perm = torch.argsort(key)
        pair_splat = pair_splat[perm]
        pixel_id = pixel_id[perm]
        px, py = px[perm], py[perm]

    sid = idx_all[pair_splat]
    d = torch.stack([px.to(dtype), py.to(dtype)], dim=-1) - mean2d[sid]
    ic = inv_cov[sid]
    maha = ic[:, 0, 0] * d[:, 0] * d[:, 0] + (ic[:, 0, 1] + ic[:, 1, 0]) * d[:, 0] * d[:, 1] + ic[:, 1, 1] * d[:, 1] * d[:, 1]
    alpha = (opac[sid] * torch.exp(-0.5 * maha)).clamp(max=ALPHA_MAX)
    if alpha_cutoff > 0:
        gate = alpha >= alpha_cutoff
        pair_splat, pixel_id, sid, alpha = pair_splat[gate], pixel_id[gate], sid[gate], alpha[gate]
    if pixel_id.numel() == 0:
        if return_torch:
            return empty_rgb.clone(), torch.zeros(H, W, dtype=dtype), torch.zeros(H, W, dtype=dtype)
        return RenderedImage(rgb=empty_rgb.numpy().copy(), alpha=np.zeros((H, W)))

    # exclusive per-pixel transmittance via segmented log-space cumsum
    log_t = torch.log1p(-alpha)
    cum = torch.cumsum(log_t, dim=0)
    is_start = torch.ones_like(pixel_id, dtype=torch.bool)
    is_start[1:] = pixel_id[1:] != pixel_id[:-1]
    start_pos = torch.nonzero(is_start).squeeze(-1)
    seg_of_pair = torch.cumsum(is_start.long(), dim=0) - 1
    base = torch.where(start_pos > 0, cum[(start_pos - 1).clamp(min=0)], torch.zeros((), dtype=dtype))
    excl = cum - log_t - base[seg_of_pair]
    T = torch.exp(excl)
    w = alpha * T

    flat_rgb = torch.zeros(H * W, 3, dtype=dtype)
    flat_rgb.index_add_(0, pixel_id, w[:, None] * colors[sid])
    weight_sum = torch.zeros(H * W, dtype=dtype)
    weight_sum.index_add_(0, pixel_id, w)
    # background weight: full product per covered pixel, 1 elsewhere
    seg_end = torch.ones_like(is_start)
    seg_end[:-1] = is_start[1:]
    end_pos = torch.nonzero(seg_end).squeeze(-1)
    seg_total = torch.exp(cum[end_pos] - base)
    t_end = torch.ones(H * W, dtype=dtype)
    t_end = t_end.index_put((pixel_id[end_pos],), seg_total)
    rgb = flat_rgb + t_end[:, None] * bg
    alpha_img = (1.0 - t_end).reshape(H, W)
    if return_torch:
        return rgb.reshape(H, W, 3), alpha_img, weight_sum.reshape(H, W)
    return RenderedImage(rgb=np.clip(rgb.detach().numpy().reshape(H, W, 3), 0.0, 1.0), alpha=alpha_img.detach().numpy())


def rasterize_reference(
    positions, quats, scales, opacities, colors, cam, head, background=(0.0, 0.0, 0.0), alpha_cutoff=DEFAULT_ALPHA_CUTOFF
):
    """Brute-force per-pixel compositing oracle (numpy, explicit loops).

    Same contract as `rasterize` with explicit rgb colors; no windowing, no
    vectorized compositing: every pixel walks every splat in depth order.
    """
    from .rotations import quat_to_matrix

    positions = np.asarray(positions, dtype=float)
    quats = np.asarray(quats, dtype=float)
    scales = np.asarray(scales, dtype=float)
    opacities = np.asarray(opacities, dtype=float)
    colors = np.asarray(colors, dtype=float)
    H, W = cam.height, cam.width
    bg = np.asarray(background, dtype=float)
    n = len(positions)

    R = head.rotation
    entries = []
    for i in range(n):
        p_cam = R.T @ (positions[i] - head.translation)
        if np.linalg.norm(p_cam) < 1e-9:
            continue
        mean2d, valid = cam_mod.project(cam, p_cam[None, :])
        if not bool(valid[0]):
            continue
        q = quats[i] / np.linalg.norm(quats[i])
        Rq = quat_to_matrix(q)
        cov_w = Rq @ np.diag(scales[i] ** 2) @ Rq.T
        cov_c = R.T @ cov_w @ R
        J = cam_mod.projection_jacobian(cam, p_cam[None, :])[0]
        cov2d = J @ cov_c @ J.T
        det = np.linalg.det(cov2d)
        if det <= 1e-30:
            continue
        entries.append((float(np.linalg.norm(p_cam)), i, mean2d[0], np.linalg.inv(cov2d)))
    entries.sort(key=lambda e: (e[0], e[1]))

    rgb = np.zeros((H, W, 3))
    alpha_img = np.zeros((H, W))
    for row in range(H):
        for col in range(W):
            T = 1.0
            acc = np.zeros(3)
            for depth, i, mu, ic in entries:
                d = np.array([col, row], dtype=float) - mu
                a = opacities[i] * np.exp(-0.5 * (d @ ic @ d))
                a = min(a, ALPHA_MAX)
                if a < alpha_cutoff:
                    continue
                acc = acc + colors[i] * (a * T)
                T = T * (1.0 - a)
            rgb[row, col] = acc + T * bg
            alpha_img[row, col] = 1.0 - T
    return RenderedImage(rgb=np.clip(rgb, 0.0, 1.0), alpha=alpha_img)
