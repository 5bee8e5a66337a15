"""Rotation parameterizations shared across the rig, deformation, and splat code.

Axis-angle vectors are 3-vectors whose direction is the rotation axis and
whose norm is the angle in radians. Quaternions are (w, x, y, z), Hamilton
convention.
"""

from __future__ import annotations

import numpy as np

# Below this angle the closed-form axis-angle derivative is replaced by its
# second-order Taylor expansion to avoid cancellation in the 1/theta^2 terms.
_SMALL_ANGLE = 1e-4


def hat(v):
    """Skew-symmetric cross-product matrix [v]x (batched over leading dims)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def axis_angle_to_matrix(a):
    """Rodrigues formula, stable at zero angle (batched over leading dims).

    Uses the series forms of sin(t)/t and (1-cos(t))/t^2 below the small-angle
    cutoff so that axis_angle_to_matrix(0) is exactly the identity.
    """
    a = np.asarray(a, dtype=float)
    theta = np.linalg.norm(a, axis=-1)
    small = theta < _SMALL_ANGLE
    t2 = theta * theta
    # sin(t)/t and (1-cos(t))/t^2 with series fallback
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(small, 1.0 - t2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
        c = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, t2))
    K = hat(a)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + s[..., None, None] * K + c[..., None, None] * (K @ K)


def axis_angle_jacobian(a):
    """Partial derivatives dR/da_i of the Rodrigues map, shape (3, 3, 3).

    Closed form after Gallego & Yezzi: for a != 0,
        dR/da_i = (a_i [a]x + [a x ((I - R) e_i)]x) / |a|^2 @ R
    with the exact limit dR/da_i = [e_i]x at a = 0. Near zero the quadratic
    Taylor expansion is used instead of the closed form.
    """
    a = np.asarray(a, dtype=float)
    theta = np.linalg.norm(a)
    out = np.zeros((3, 3, 3))
    if theta < _SMALL_ANGLE:
        # R ~ I + [a]x + 0.5 [a]x^2 => dR/da_i ~ [e_i]x + 0.5([e_i]x[a]x + [a]x[e_i]x)
        A = hat(a)
        for i in range(3):
            E = hat(np.eye(3)[i])
            out[i] = E + 0.5 * (E @ A + A @ E)
        return out
    R = axis_angle_to_matrix(a)
    eye = np.eye(3)
    for i in range(3):
        v = np.cross(a, (eye - R) @ eye[i])
        out[i] = ((a[i] * hat(a) + hat(v)) / (theta * theta)) @ R
    return out


def rotation_about_axis(axis, angle):
    """Rotation matrix about a unit axis by an angle (scalar inputs)."""
    axis = np.asarray(axis, dtype=float)
    c, s = np.cos(angle), np.sin(angle)
    K = hat(axis)
    return np.eye(3) * c + s * K + (1.0 - c) * np.outer(axis, axis)


def quat_to_matrix(q):
    """Unit quaternion (w, x, y, z) to rotation matrix (batched)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quat(R):
    """Rotation matrix to unit quaternion (w, x, y, z), w >= 0 (batched).

    Shepperd's method: picks the largest diagonal combination for stability.
    """
    R = np.asarray(R, dtype=float)
    batch = R.shape[:-2]
    R = R.reshape((-1, 3, 3))
    n = R.shape[0]
    q = np.empty((n, 4))
    tr = R[:, 0, 0] + R[:, 1, 1] + R[:, 2, 2]
    for i in range(n):
        m = R[i]
        if tr[i] > 0:
            s = np.sqrt(tr[i] + 1.0) * 2
            q[i] = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q[i] = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q[i] = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q[i] = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    sign = np.where(q[:, 0] < 0, -1.0, 1.0)
    q *= sign[:, None]
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q.reshape(batch + (4,))


def quat_multiply(q1, q2):
    """Hamilton product q1 * q2 (q2 applied first), batched."""
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    w1, x1, y1, z1 = q1[..., 0], q1[..., 1], q1[..., 2], q1[..., 3]
    w2, x2, y2, z2 = q2[..., 0], q2[..., 1], q2[..., 2], q2[..., 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )
