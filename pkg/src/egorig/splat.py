"""Mesh-anchored Gaussian-splat appearance.

Every texel of the character's UV atlas that is covered by a triangle
carries one Gaussian: a position offset in the texel's surface tangent
frame, a quaternion rotation offset composed onto the fetched surface
rotation, order-3 SH color, log-domain scales, and a logit-domain opacity.
Binding fetches the base position/rotation from the covering triangle by
barycentric interpolation on the posed mesh.

Fitting optimizes the texel parameters directly against target images with
an L1 + SSIM objective.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, replace

import numpy as np
import torch

from .deform import PosedMesh, _texels_in_uv_triangle
from .gsplat import DEFAULT_ALPHA_CUTOFF, RenderedImage, SplatSet, quat_multiply_t, rasterize
from .rotations import matrix_to_quat
from .sh import N_BASIS

TEXTURE_MAGIC = b"EGTX"


@dataclass
class GaussianTexture:
    """Per-covered-texel Gaussian parameters in UV space.

    Covered texels are stored row-major; `rows`/`cols` give their texel
    coordinates, `face_idx`/`bary` the covering triangle and barycentric
    coordinates of the texel center.
    """

    resolution: tuple  # (H, W)
    rows: np.ndarray  # (T,)
    cols: np.ndarray  # (T,)
    face_idx: np.ndarray  # (T,)
    bary: np.ndarray  # (T, 3)
    offsets: torch.Tensor  # (T, 3) tangent-frame position offsets, meters
    rot_offsets: torch.Tensor  # (T, 4) unit quaternions
    sh: torch.Tensor  # (T, 16, 3)
    log_scales: torch.Tensor  # (T, 3)
    opacity_logits: torch.Tensor  # (T,)

    def __post_init__(self):
        T = len(self.rows)
        for name in ("cols", "face_idx"):
            if len(getattr(self, name)) != T:
                raise ValueError("texel arrays must agree in length")
        if self.bary.shape != (T, 3):
            raise ValueError("bary must be (T, 3)")
        qn = torch.linalg.norm(self.rot_offsets, dim=-1)
        if float((qn - 1.0).abs().max().item() if T else 0.0) > 1e-6:
            raise ValueError("stored rotation offsets must be unit quaternions")

    @property
    def n_texels(self):
        return len(self.rows)

    def coverage_mask(self):
        m = np.zeros(self.resolution, dtype=bool)
        m[self.rows, self.cols] = True
        return m

    @property
    def opacities(self):
        return torch.sigmoid(self.opacity_logits)

    @property
    def scales(self):
        return torch.exp(self.log_scales)

    def clone_params(self):
        return replace(
            self,
            offsets=self.offsets.clone(),
            rot_offsets=self.rot_offsets.clone(),
            sh=self.sh.clone(),
            log_scales=self.log_scales.clone(),
            opacity_logits=self.opacity_logits.clone(),
        )


def create_texture(template, resolution, init_scale=None, init_opacity=0.2, init_color=(0.5, 0.5, 0.5)):
    """Build a texture over the template's UV atlas.

    A texel is covered when its center lies in a UV triangle; ties go to
    the lowest face index. Scales default to roughly the world-space texel
    footprint; DC color is set so the view-independent color matches
    init_color.
    """
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    H, W = resolution
    owner = {}
    for fi in range(len(template.faces)):
        for (r, c, w0, w1, w2) in _texels_in_uv_triangle(template.uvs[fi], max(H, W)):
            if r >= H or c >= W:
                continue
            if (r, c) not in owner:
                owner[(r, c)] = (fi, w0, w1, w2)
    keys = sorted(owner)
    T = len(keys)
    rows = np.array([k[0] for k in keys], dtype=int)
    cols = np.array([k[1] for k in keys], dtype=int)
    face_idx = np.array([owner[k][0] for k in keys], dtype=int)
    bary = np.array([owner[k][1:] for k in keys], dtype=float)

    if init_scale is None:
        tri = template.vertices[template.faces]
        area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
        uv = template.uvs
        uv_area = 0.5 * np.abs(
            (uv[:, 1, 0] - uv[:, 0, 0]) * (uv[:, 2, 1] - uv[:, 0, 1])
            - (uv[:, 1, 1] - uv[:, 0, 1]) * (uv[:, 2, 0] - uv[:, 0, 0])
        )
        density = area.sum() / max(uv_area.sum(), 1e-12)  # world area per unit UV area
        init_scale = 0.5 * np.sqrt(density) / max(H, W)

    from .sh import C0

    sh = torch.zeros((T, N_BASIS, 3), dtype=torch.float64)
    sh[:, 0, :] = torch.as_tensor(np.asarray(init_color, dtype=float) / C0)
    quat = torch.zeros((T, 4), dtype=torch.float64)
    quat[:, 0] = 1.0
    p = float(np.clip(init_opacity, 1e-4, 1 - 1e-4))
    return GaussianTexture(
        resolution=(H, W),
        rows=rows,
        cols=cols,
        face_idx=face_idx,
        bary=bary,
        offsets=torch.zeros((T, 3), dtype=torch.float64),
        rot_offsets=quat,
        sh=sh,
        log_scales=torch.full((T, 3), float(np.log(init_scale)), dtype=torch.float64),
        opacity_logits=torch.full((T,), float(np.log(p / (1 - p))), dtype=torch.float64),
    )


def _texel_frames(mesh, face_idx):
    """Base positions and tangent frames of the covering triangles.

    Returns (tri_verts (T,3,3), frames (T,3,3)) with frame columns
    [tangent1, tangent2, normal].
    """
    tri = mesh.vertices[mesh.faces[face_idx]]  # (T, 3, 3)
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    n = np.cross(e1, e2)
    nn = np.linalg.norm(n, axis=1, keepdims=True)
    if np.any(nn < 1e-15):
        raise ValueError("degenerate covering triangle while binding texture")
    n = n / nn
    t1 = e1 - (e1 * n).sum(axis=1, keepdims=True) * n
    t1 = t1 / np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    frames = np.stack([t1, t2, n], axis=-1)
    return tri, frames


def bind_to_mesh(tex: GaussianTexture, mesh: PosedMesh) -> SplatSet:
    """Instantiate world-space Gaussians on the posed mesh.

    Positions are base point + tangent-frame offset; rotations compose the
    stored offset onto the surface frame quaternion (offset applied last).
    """
    if tex.n_texels == 0:
        raise ValueError("texture covers no texels")
    if tex.face_idx.max() >= len(mesh.faces):
        raise ValueError("texture binding references faces outside the mesh")
    tri, frames = _texel_frames(mesh, tex.face_idx)
    base = np.einsum("tc,tci->ti", tex.bary, tri)
    base_t = torch.as_tensor(base, dtype=torch.float64)
    frames_t = torch.as_tensor(frames, dtype=torch.float64)
    surf_quat = torch.as_tensor(matrix_to_quat(frames), dtype=torch.float64)

    pos = base_t + torch.einsum("tij,tj->ti", frames_t, tex.offsets)
    dq = tex.rot_offsets / torch.linalg.norm(tex.rot_offsets, dim=-1, keepdim=True).clamp(min=1e-12)
    rot = quat_multiply_t(dq, surf_quat)
    return SplatSet(
        positions=pos,
        rotations=rot,
        scales=tex.scales,
        opacities=tex.opacities,
        sh=tex.sh,
    )


def render(tex, mesh, cam, head, background=(0.0, 0.0, 0.0), alpha_cutoff=DEFAULT_ALPHA_CUTOFF, cov2d_dilation=0.0) -> RenderedImage:
    """Bind then rasterize; pure function of its inputs."""
    return rasterize(
        bind_to_mesh(tex, mesh), cam, head, background=background, alpha_cutoff=alpha_cutoff, cov2d_dilation=cov2d_dilation
    )


# ---------------------------------------------------------------------------
# Losses


def loss_l1_t(img, target):
    return (img - target).abs().mean()


def _gaussian_window(size=11, sigma=1.5, dtype=torch.float64):
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-0.5 * (x / sigma) ** 2)
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim_t(img, target, window_size=11, sigma=1.5, c1=0.01**2, c2=0.03**2):
    """Mean SSIM over valid (fully-windowed) pixels, channels averaged.

    Images are (H, W) or (H, W, C) in [0, 1]; the window is an 11x11
    Gaussian with sigma 1.5.
    """
    if img.shape != target.shape:
        raise ValueError("image resolutions must match")
    if img.dim() == 2:
        img = img[..., None]
        target = target[..., None]
    x = img.permute(2, 0, 1)[:, None]  # (C, 1, H, W)
    y = target.permute(2, 0, 1)[:, None]
    w = _gaussian_window(window_size, sigma, dtype=img.dtype)[None, None]
    mu_x = torch.nn.functional.conv2d(x, w)
    mu_y = torch.nn.functional.conv2d(y, w)
    xx = torch.nn.functional.conv2d(x * x, w) - mu_x * mu_x
    yy = torch.nn.functional.conv2d(y * y, w) - mu_y * mu_y
    xy = torch.nn.functional.conv2d(x * y, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return (num / den).mean()


def loss_ssim_t(img, target):
    return 1.0 - ssim_t(img, target)


def loss_l1(img, target):
    """Mean absolute error and its gradient w.r.t. img (numpy API)."""
    a = torch.as_tensor(np.asarray(img, dtype=float)).requires_grad_(True)
    b = torch.as_tensor(np.asarray(target, dtype=float))
    v = loss_l1_t(a, b)
    (g,) = torch.autograd.grad(v, a)
    return float(v), g.numpy()


def loss_ssim(img, target):
    """SSIM loss (1 - mean SSIM) and its gradient w.r.t. img (numpy API)."""
    a = torch.as_tensor(np.asarray(img, dtype=float)).requires_grad_(True)
    b = torch.as_tensor(np.asarray(target, dtype=float))
    v = loss_ssim_t(a, b)
    (g,) = torch.autograd.grad(v, a)
    return float(v), g.numpy()


# ---------------------------------------------------------------------------
# Fitting


@dataclass
class FitConfig:
    iters: int = 500
    lr: float = 5e-3
    w_l1: float = 1.0
    w_ssim: float = 8e-5  # L1:SSIM ratio follows the reference weighting
    sh_bands: int = 4  # active SH bands during optimization (1 = DC only)
    optimize: tuple = ("offsets", "rot_offsets", "sh", "log_scales", "opacity_logits")
    alpha_cutoff: float = DEFAULT_ALPHA_CUTOFF
    cov2d_dilation: float = 0.0  # screen-space low-pass, px^2, for subpixel splats
    background: tuple = (0.0, 0.0, 0.0)
    divergence_factor: float = 20.0
    log_every: int = 0

    def __post_init__(self):
        if self.w_l1 < 0 or self.w_ssim < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 1 <= self.sh_bands <= 4:
            raise ValueError("sh_bands must be in 1..4")
        bad = set(self.optimize) - {"offsets", "rot_offsets", "sh", "log_scales", "opacity_logits"}
        if bad:
            raise ValueError(f"unknown parameters in optimize: {sorted(bad)}")


def fit(tex: GaussianTexture, meshes, cams, heads, targets, cfg: FitConfig, texel_mask=None):
    """Optimize texel parameters against target views.

    meshes/cams/heads/targets are parallel lists (one entry per view).
    texel_mask optionally freezes the complement (e.g. a per-part split).
    Returns a new texture; the input is unchanged. Rotation offsets are
    renormalized after every step.
    """
    views = list(zip(meshes, cams, heads, targets))
    if not views:
        raise ValueError("fit needs at least one view")
    out = tex.clone_params()
    if cfg.iters == 0:
        return out
    params = {
        "offsets": out.offsets.requires_grad_(True),
        "rot_offsets": out.rot_offsets.requires_grad_(True),
        "sh": out.sh.requires_grad_(True),
        "log_scales": out.log_scales.requires_grad_(True),
        "opacity_logits": out.opacity_logits.requires_grad_(True),
    }
    if texel_mask is not None:
        frozen = ~torch.as_tensor(np.asarray(texel_mask, dtype=bool))
    opt = torch.optim.Adam(params.values(), lr=cfg.lr)

    # per-view binding geometry is constant: cache base points and frames
    cache = []
    for mesh, cam, head, tgt in views:
        tri, frames = _texel_frames(mesh, out.face_idx)
        base = np.einsum("tc,tci->ti", out.bary, tri)
        cache.append(
            (
                torch.as_tensor(base, dtype=torch.float64),
                torch.as_tensor(frames, dtype=torch.float64),
                torch.as_tensor(matrix_to_quat(frames), dtype=torch.float64),
                cam,
                head,
                torch.as_tensor(np.asarray(tgt, dtype=float)),
            )
        )

    initial = None
    for it in range(cfg.iters):
        opt.zero_grad()
        loss = torch.zeros((), dtype=torch.float64)
        for base_t, frames_t, surf_quat, cam, head, tgt in cache:
            pos = base_t + torch.einsum("tij,tj->ti", frames_t, out.offsets)
            dq = out.rot_offsets / torch.linalg.norm(out.rot_offsets, dim=-1, keepdim=True).clamp(min=1e-12)
            splats = SplatSet(
                positions=pos,
                rotations=quat_multiply_t(dq, surf_quat),
                scales=out.scales,
                opacities=out.opacities,
                sh=out.sh,
            )
            rgb, _alpha, _wsum = rasterize(
                splats,
                cam,
                head,
                background=cfg.background,
                alpha_cutoff=cfg.alpha_cutoff,
                cov2d_dilation=cfg.cov2d_dilation,
                return_torch=True,
            )
            loss = loss + cfg.w_l1 * loss_l1_t(rgb, tgt) + cfg.w_ssim * loss_ssim_t(rgb, tgt)
        loss = loss / len(views)
        lv = float(loss)
        if initial is None:
            initial = lv
        if not np.isfinite(lv) or lv > cfg.divergence_factor * max(initial, 1e-12):
            warnings.warn("splat fit diverged; stopping early", RuntimeWarning)
            break
        loss.backward()
        for name, p in params.items():
            if name not in cfg.optimize:
                p.grad.zero_()
        if texel_mask is not None:
            for p in params.values():
                p.grad[frozen] = 0
        if cfg.sh_bands < 4:
            params["sh"].grad[:, cfg.sh_bands**2 :, :] = 0
        opt.step()
        with torch.no_grad():
            out.rot_offsets /= torch.linalg.norm(out.rot_offsets, dim=-1, keepdim=True).clamp(min=1e-12)
        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            print(f"fit iter {it + 1}/{cfg.iters}: loss {lv:.6f}")
    for p in params.values():
        p.requires_grad_(False)
    return out


def save_render_png(image: RenderedImage, path):
    """RGB 8-bit PNG from a rendered image."""
    from PIL import Image

    arr = np.clip(np.round(image.rgb * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_render_png(path):
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"), dtype=float) / 255.0


# ---------------------------------------------------------------------------
# Container format


def save_texture(tex: GaussianTexture, path):
    H, W = tex.resolution
    bitmap = np.packbits(tex.coverage_mask().reshape(-1))
    with open(path, "wb") as f:
        f.write(TEXTURE_MAGIC)
        f.write(struct.pack("<IIII", 1, H, W, tex.n_texels))
        f.write(bitmap.tobytes())
        f.write(tex.face_idx.astype("<i4").tobytes())
        f.write(tex.bary.astype("<f4").tobytes())
        for t in (tex.offsets, tex.rot_offsets, tex.sh.reshape(tex.n_texels, -1), tex.log_scales, tex.opacity_logits):
            f.write(t.detach().numpy().astype("<f4").tobytes())


def load_texture(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != TEXTURE_MAGIC:
            raise ValueError(f"not a gaussian texture container: bad magic {magic!r}")
        version, H, W, T = struct.unpack("<IIII", f.read(16))
        if version != 1:
            raise ValueError(f"unsupported texture container version {version}")
        nbytes = (H * W + 7) // 8
        bitmap = np.unpackbits(np.frombuffer(f.read(nbytes), dtype=np.uint8))[: H * W].astype(bool).reshape(H, W)
        rows, cols = np.nonzero(bitmap)
        if len(rows) != T:
            raise ValueError("texture container coverage does not match texel count")
        face_idx = np.frombuffer(f.read(4 * T), dtype="<i4").astype(int)
        bary = np.frombuffer(f.read(12 * T), dtype="<f4").astype(float).reshape(T, 3)

        def read_plane(shape):
            count = int(np.prod(shape))
            return torch.as_tensor(
                np.frombuffer(f.read(4 * count), dtype="<f4").astype(np.float64).reshape(shape)
            )

        offsets = read_plane((T, 3))
        rot = read_plane((T, 4))
        rot = rot / torch.linalg.norm(rot, dim=-1, keepdim=True).clamp(min=1e-12)
        sh = read_plane((T, N_BASIS * 3)).reshape(T, N_BASIS, 3)
        log_scales = read_plane((T, 3))
        opacity = read_plane((T,))
    return GaussianTexture(
        resolution=(H, W),
        rows=rows,
        cols=cols,
        face_idx=face_idx,
        bary=bary,
        offsets=offsets,
        rot_offsets=rot,
        sh=sh,
        log_scales=log_scales,
        opacity_logits=opacity,
    )


def export_splats_ply(tex: GaussianTexture, mesh: PosedMesh, path):
    """Write the bound splats in the community point-list PLY layout."""
    splats = bind_to_mesh(tex, mesh)
    n = len(splats)
    props = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    props += [f"f_rest_{i}" for i in range(45)]
    props += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in props]
    header.append("end_header")
    data = np.zeros((n, len(props)), dtype="<f4")
    data[:, 0:3] = splats.positions.detach().numpy()
    sh = tex.sh.detach().numpy()
    data[:, 6:9] = sh[:, 0, :]
    # rest coefficients channel-major: 15 per channel
    data[:, 9:54] = np.concatenate([sh[:, 1:, 0], sh[:, 1:, 1], sh[:, 1:, 2]], axis=1)
    data[:, 54] = tex.opacity_logits.detach().numpy()
    data[:, 55:58] = tex.log_scales.detach().numpy()
    data[:, 58:62] = splats.rotations.detach().numpy()
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())
