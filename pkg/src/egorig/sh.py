"""Real spherical harmonics, bands 0..3 (16 basis functions).

Orthonormal real SH in the convention common to splatting renderers;
coefficients are laid out band-major: [Y00, Y1-1, Y10, Y11, Y2-2, ...].
Works on numpy arrays and torch tensors (pure polynomial arithmetic).
"""

from __future__ import annotations

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

N_BASIS = 16


def sh_basis(dirs):
    """Stack of the 16 basis values for unit directions (..., 3) -> (..., 16)."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    one = x * 0 + 1.0
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    vals = [
        C0 * one,
        -C1 * y,
        C1 * z,
        -C1 * x,
        C2[0] * xy,
        C2[1] * yz,
        C2[2] * (2.0 * zz - xx - yy),
        C2[3] * xz,
        C2[4] * (xx - yy),
        C3[0] * y * (3.0 * xx - yy),
        C3[1] * xy * z,
        C3[2] * y * (4.0 * zz - xx - yy),
        C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        C3[4] * x * (4.0 * zz - xx - yy),
        C3[5] * z * (xx - yy),
        C3[6] * x * (xx - yy),
    ]
    if hasattr(dirs, "new_empty"):  # torch tensor
        import torch

        return torch.stack(vals, dim=-1)
    import numpy as np

    return np.stack(vals, axis=-1)


def sh_eval(coeffs, view_dir):
    """Evaluate SH color: coeffs (..., 16, 3) x directions (..., 3) -> (..., 3)."""
    basis = sh_basis(view_dir)  # (..., 16)
    return (coeffs * basis[..., None]).sum(-2)
