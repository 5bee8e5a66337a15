"""Equidistant fisheye camera and rigid head-pose transforms.

Camera frame: +z forward (down the body for a head-mounted down-facing
camera), +x right, +y down in the image. Pixel coordinate (0, 0) is the
center of the top-left pixel.

Projection: with incidence angle t = atan2(hypot(x, y), z),
    r = focal * (t + k1 t^3 + k2 t^5 + k3 t^7 + k4 t^9)
    pixel = principal_point + r * (x, y) / hypot(x, y).

The same formulas run on numpy arrays and torch tensors so the splat and
refinement code can differentiate through them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .skeleton import JointPositions


@dataclass(frozen=True)
class FisheyeCamera:
    focal: float
    cx: float
    cy: float
    width: int
    height: int
    dist: tuple = (0.0, 0.0, 0.0, 0.0)  # k1..k4 over the incidence angle
    fov_limit: float = np.pi * 0.75  # max incidence angle, radians

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError("focal must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("resolution must be positive")
        object.__setattr__(self, "dist", tuple(float(k) for k in self.dist))

    @property
    def principal_point(self):
        return np.array([self.cx, self.cy])


@dataclass(frozen=True)
class RigidTransform:
    """World pose of a frame: p_world = rotation @ p_local + translation."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rigid transform needs a 3x3 rotation and 3-vector translation")
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(R) < 0:
            raise ValueError("rotation must be proper (det +1)")

    @staticmethod
    def identity():
        return RigidTransform(np.eye(3), np.zeros(3))

    def inverse(self):
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def apply(self, points):
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation


def _xp_of(points):
    if isinstance(points, np.ndarray):
        return np
    import torch

    return torch


def _poly(xp, t, dist):
    t2 = t * t
    g = t
    p = t
    for k in dist:
        p = p * t2
        g = g + k * p
    return g


def _poly_deriv(xp, t, dist):
    t2 = t * t
    g = xp.ones_like(t)
    p = xp.ones_like(t)
    for n, k in enumerate(dist):
        p = p * t2
        g = g + (2 * n + 3) * k * p
    return g


def project(cam: FisheyeCamera, points):
    """Project camera-frame points to pixels.

    Returns (pixels, valid) where valid marks points inside the fov limit.
    Points on the exact camera center are a contract violation. Works on
    numpy (...,3) arrays and torch tensors alike.
    """
    xp = _xp_of(points)
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    rho2 = x * x + y * y
    n2 = rho2 + z * z
    if xp is np:
        if np.any(n2 < 1e-24):
            raise ValueError("cannot project a point at the camera center")
        rho = np.sqrt(rho2)
        theta = np.arctan2(rho, z)
    else:
        rho = xp.sqrt(xp.clamp(rho2, min=1e-36))
        theta = xp.atan2(rho, z)
    r = cam.focal * _poly(xp, theta, cam.dist)
    # unit image direction; on-axis points project to the principal point
    safe = rho > 1e-12
    if xp is np:
        inv = np.where(safe, 1.0 / np.where(safe, rho, 1.0), 0.0)
        scale = r * inv
    else:
        inv = xp.where(safe, 1.0 / xp.where(safe, rho, xp.ones_like(rho)), xp.zeros_like(rho))
        scale = r * inv
    px = cam.cx + scale * x
    py = cam.cy + scale * y
    pixels = xp.stack([px, py], **({"axis": -1} if xp is np else {"dim": -1}))
    valid = theta <= cam.fov_limit
    return pixels, valid


def projection_jacobian(cam: FisheyeCamera, points):
    """Analytic d(pixel)/d(point), shape (..., 2, 3).

    Smooth in the point; the on-axis limit reduces to the pinhole Jacobian
    focal/z * [[1,0,-x/z],[0,1,-y/z]] and is handled with a safe branch.
    """
    xp = _xp_of(points)
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    rho2 = x * x + y * y
    n2 = rho2 + z * z
    if xp is np:
        rho = np.sqrt(rho2)
        theta = np.arctan2(rho, z)
    else:
        rho = xp.sqrt(xp.clamp(rho2, min=1e-36))
        theta = xp.atan2(rho, z)
    g = _poly(xp, theta, cam.dist)
    gp = _poly_deriv(xp, theta, cam.dist)

    safe = rho > 1e-9 * xp.sqrt(n2) if xp is np else rho > 1e-9 * xp.sqrt(n2)
    one = xp.ones_like(rho)
    rho_s = xp.where(safe, rho, one)
    # dtheta/dp
    dth_dx = xp.where(safe, (z / n2) * (x / rho_s), xp.zeros_like(x))
    dth_dy = xp.where(safe, (z / n2) * (y / rho_s), xp.zeros_like(y))
    dth_dz = -rho / n2
    # u = (x, y)/rho and its derivatives
    ux = xp.where(safe, x / rho_s, xp.zeros_like(x))
    uy = xp.where(safe, y / rho_s, xp.zeros_like(y))
    dux_dx = xp.where(safe, 1.0 / rho_s - x * x / rho_s**3, xp.zeros_like(x))
    dux_dy = xp.where(safe, -x * y / rho_s**3, xp.zeros_like(x))
    duy_dy = xp.where(safe, 1.0 / rho_s - y * y / rho_s**3, xp.zeros_like(y))
    f = cam.focal
    j00 = f * (gp * dth_dx * ux + g * dux_dx)
    j01 = f * (gp * dth_dy * ux + g * dux_dy)
    j02 = f * (gp * dth_dz * ux)
    j10 = f * (gp * dth_dx * uy + g * dux_dy)
    j11 = f * (gp * dth_dy * uy + g * duy_dy)
    j12 = f * (gp * dth_dz * uy)
    # on-axis limit: pixel ~ c + f g'(0) (x, y)/z -> diag(f/z) (g'(0) = 1)
    inv_z = xp.where(safe, xp.zeros_like(z), 1.0 / z)
    j00 = xp.where(safe, j00, f * inv_z)
    j11 = xp.where(safe, j11, f * inv_z)
    rows = [
        xp.stack([j00, j01, j02], **({"axis": -1} if xp is np else {"dim": -1})),
        xp.stack([j10, j11, j12], **({"axis": -1} if xp is np else {"dim": -1})),
    ]
    return xp.stack(rows, **({"axis": -2} if xp is np else {"dim": -2}))


def local_to_global(joints: JointPositions, head: RigidTransform) -> JointPositions:
    """Transfer camera-frame keypoints into the world frame."""
    return JointPositions(head.apply(joints.positions), frame_index=joints.frame_index)


def world_to_camera(points, head: RigidTransform):
    """Inverse of the head pose applied to world points (numpy or torch)."""
    xp = _xp_of(points)
    if xp is np:
        return (points - head.translation) @ head.rotation
    import torch

    R = torch.as_tensor(head.rotation, dtype=points.dtype)
    t = torch.as_tensor(head.translation, dtype=points.dtype)
    return (points - t) @ R


# ---------------------------------------------------------------------------
# File formats


def camera_to_dict(cam):
    return {
        "model": "equidistant",
        "focal": cam.focal,
        "cx": cam.cx,
        "cy": cam.cy,
        "width": cam.width,
        "height": cam.height,
        "dist": list(cam.dist),
        "fov_limit": cam.fov_limit,
    }


def camera_from_dict(d):
    if d.get("model", "equidistant") != "equidistant":
        raise ValueError(f"unsupported camera model {d.get('model')!r}")
    return FisheyeCamera(
        focal=float(d["focal"]),
        cx=float(d["cx"]),
        cy=float(d["cy"]),
        width=int(d["width"]),
        height=int(d["height"]),
        dist=tuple(d.get("dist", (0, 0, 0, 0))),
        fov_limit=float(d.get("fov_limit", np.pi * 0.75)),
    )


def load_camera(path):
    with open(path) as f:
        return camera_from_dict(json.load(f))


def save_camera(cam, path):
    with open(path, "w") as f:
        json.dump(camera_to_dict(cam), f, indent=1, sort_keys=True)


def load_head_track(path):
    """JSON-lines head poses {"frame", "R":[9], "t":[3]} -> {frame: RigidTransform}."""
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            out[int(d["frame"])] = RigidTransform(
                rotation=np.asarray(d["R"], dtype=float).reshape(3, 3),
                translation=np.asarray(d["t"], dtype=float),
            )
    return out


def save_head_track(track, path):
    with open(path, "w") as f:
        for frame in sorted(track):
            tr = track[frame]
            rec = {"frame": int(frame), "R": tr.rotation.reshape(-1).tolist(), "t": tr.translation.tolist()}
            f.write(json.dumps(rec, sort_keys=True) + "\n")
