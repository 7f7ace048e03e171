"""Pinhole camera model, disparity/depth conversion and rigid transforms.

Frames follow the KITTI convention. Camera: x right, y down, z forward.
LiDAR: x forward, y left, z up. A ``RigidTransform`` ``C = (R, t)`` maps
LiDAR coordinates into camera coordinates, ``p_cam = R @ p_lidar + t``.

All functions are vectorised over leading axes; points are ``(..., 3)``
arrays in float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    f_u: float
    f_v: float
    c_u: float
    c_v: float

    def __post_init__(self):
        if not (self.f_u > 0 and self.f_v > 0):
            raise DomainError(f"focal lengths must be positive, got f_u={self.f_u}, f_v={self.f_v}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.f_u, 0.0, self.c_u],
                         [0.0, self.f_v, self.c_v],
                         [0.0, 0.0, 1.0]])


def check_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> None:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise DomainError(f"rotation must be 3x3, got {R.shape}")
    err = np.abs(R.T @ R - np.eye(3)).max()
    det = np.linalg.det(R)
    if err > tol or abs(det - 1.0) > tol:
        raise DomainError(f"not a proper rotation (|R^T R - I|={err:.2e}, det={det:.9f})")


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    """Project a near-rotation onto SO(3) (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] *= -1
        R = U @ Vt
    return R


@dataclass(frozen=True)
class RigidTransform:
    """LiDAR-to-camera transform ``p_cam = R p_lidar + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        check_rotation(R)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> "RigidTransform":
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)


def lidar_to_cam(p, C: RigidTransform) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return p @ C.R.T + C.t


def cam_to_lidar(p, C: RigidTransform) -> np.ndarray:
    # R^T (p - t), i.e. the inverse homogeneous transform without forming it.
    p = np.asarray(p, dtype=np.float64)
    return (p - C.t) @ C.R


def backproject(uvz, K: Intrinsics) -> np.ndarray:
    """Pixel + depth ``(u, v, Z)`` to a camera-frame point ``(X, Y, Z)``."""
    uvz = np.asarray(uvz, dtype=np.float64)
    u, v, z = uvz[..., 0], uvz[..., 1], uvz[..., 2]
    if np.any(~(z > 0)):
        raise DomainError("depth must be positive for backprojection")
    x = (u - K.c_u) * z / K.f_u
    y = (v - K.c_v) * z / K.f_v
    return np.stack([x, y, z], axis=-1)


def project(p, K: Intrinsics) -> np.ndarray:
    """Camera-frame point to ``(u, v, Z)``."""
    p = np.asarray(p, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    if np.any(~(z > 0)):
        raise DomainError("point is behind the camera (Z <= 0)")
    u = K.f_u * x / z + K.c_u
    v = K.f_v * y / z + K.c_v
    return np.stack([u, v, z], axis=-1)


def depth_from_disparity(d, f_u: float, b: float):
    d = np.asarray(d, dtype=np.float64)
    if np.any(~(d > 0)) or not (f_u > 0 and b > 0):
        raise DomainError("disparity, focal length and baseline must be positive")
    out = f_u * b / d
    return float(out) if out.ndim == 0 else out


def disparity_from_depth(depth, f_u: float, b: float):
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)) or not (f_u > 0 and b > 0):
        raise DomainError("depth, focal length and baseline must be positive")
    out = f_u * b / depth
    return float(out) if out.ndim == 0 else out
