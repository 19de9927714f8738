"""Depth back-projection and plane-fit surface normals.

Each pixel's normal solves ``A n = 1`` in the least-squares sense, where the
rows of ``A`` are the K back-projected points closest (in 3D) to the pixel's
own point inside a small pixel window.  The solve is closed form, so the
normal map is differentiable with respect to depth; the neighbour selection
itself is treated as constant.

Normals live in the camera frame and are flipped to face the camera.  Depth
maps passed to :func:`normal_map_from_depth` hold z-depth; rendered maps hold
distance along the ray, see :func:`ray_depth_to_z`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DegenerateNormalError, InvalidDepthError, InvalidInputError
from .render import Camera

INVALID_ENCODING = np.array([0.5, 0.5, 0.0])


def backproject(camera: Camera, u, v, z) -> np.ndarray:
    """Camera-frame point ``((u+.5-cx) z/fx, (v+.5-cy) z/fy, z)``."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(~(z > 0)):
        raise InvalidDepthError("depth must be positive")
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.stack([(u + 0.5 - camera.cx) * z / camera.fx, (v + 0.5 - camera.cy) * z / camera.fy, z], axis=-1)


def backproject_depth(depth_z, camera: Camera) -> np.ndarray:
    """``(H, W, 3)`` camera-frame points for a z-depth image."""
    r = camera.pixel_rays().reshape(camera.height, camera.width, 3)
    return r * np.asarray(depth_z, dtype=np.float64)[..., None]


def ray_depth_to_z(depth, camera: Camera):
    """Convert distance-along-ray depth to z-depth (divide by the ray norm)."""
    norm = np.linalg.norm(camera.pixel_rays(), axis=-1).reshape(camera.height, camera.width)
    return depth / norm.astype(depth.dtype)


@dataclass
class PointCloudPatch:
    points: np.ndarray  # (K, 3)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] < 3:
            raise InvalidInputError("patch needs K >= 3 points of dimension 3")
        if not np.all(np.isfinite(self.points)):
            raise InvalidInputError("patch points must be finite")

    @property
    def k(self) -> int:
        return self.points.shape[0]


def fit_plane_normal(patch: PointCloudPatch, view_dir=None) -> np.ndarray:
    """Least-squares plane normal of one patch, facing the camera.

    ``view_dir`` defaults to the direction from the origin to the patch
    centroid.
    """
    a = patch.points
    m = a.T @ a
    eig = np.linalg.eigvalsh(m)
    if not (eig[0] > 0 and eig[-1] <= _kernels.MAX_CONDITION * eig[0]):
        raise DegenerateNormalError("patch is rank deficient (condition number above 1e8)")
    n = np.linalg.solve(m, a.sum(axis=0))
    if np.linalg.norm(a @ n - 1.0) > _kernels.RESIDUAL_RATIO * np.sqrt(patch.k):
        cen = a - a.mean(axis=0)
        n = np.linalg.svd(cen)[2][-1]
    n = n / np.linalg.norm(n)
    view = a.mean(axis=0) if view_dir is None else np.asarray(view_dir, dtype=np.float64)
    if n @ view > 0:
        n = -n
    return n


@dataclass
class NormalMap:
    normals: np.ndarray  # (H, W, 3), unit where valid, zero elsewhere
    valid: np.ndarray  # (H, W) bool
    mode: np.ndarray | None = None
    _fit: tuple | None = None


def normal_map_from_depth(depth_z, camera: Camera, k: int = 9, window: int = 5, depth_valid=None) -> NormalMap:
    depth_z = np.asarray(depth_z)
    if depth_z.shape != (camera.height, camera.width):
        raise InvalidInputError(f"depth shape {depth_z.shape} does not match camera {camera.height}x{camera.width}")
    valid = np.isfinite(depth_z) & (depth_z > 0)
    if depth_valid is not None:
        valid &= np.asarray(depth_valid, bool)
    pts = backproject_depth(np.where(valid, depth_z, 1.0), camera)
    normals, mode, nbr, n_raw, sign = _kernels.plane_fit_forward(pts, valid, int(k), int(window) // 2)
    return NormalMap(normals, mode > 0, mode, (pts, mode, nbr, n_raw, sign))


def normal_map_backward(nmap: NormalMap, g_normals, camera: Camera) -> np.ndarray:
    """Gradient w.r.t. the z-depth image of ``sum(g_normals * normals)``."""
    pts, mode, nbr, n_raw, sign = nmap._fit
    g = np.asarray(g_normals, dtype=np.float64)
    g_pts = _kernels.plane_fit_backward(pts, mode, nbr, n_raw, sign, g)
    r = camera.pixel_rays().reshape(camera.height, camera.width, 3)
    return np.sum(g_pts * r, axis=-1)


def finite_difference_normals(depth_z, camera: Camera) -> np.ndarray:
    """Per-pixel cross-product normals from forward neighbour differences."""
    pts = backproject_depth(depth_z, camera)
    du = np.zeros_like(pts)
    dv = np.zeros_like(pts)
    du[:, :-1] = pts[:, 1:] - pts[:, :-1]
    du[:, -1] = du[:, -2]
    dv[:-1] = pts[1:] - pts[:-1]
    dv[-1] = dv[-2]
    n = np.cross(du, dv)
    n /= np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-300)
    flip = np.sum(n * pts, axis=-1) > 0
    n[flip] *= -1
    return n


def encode_normal_image(nmap: NormalMap) -> np.ndarray:
    """``(n + 1) / 2`` per channel; invalid pixels get the camera-facing encoding."""
    img = (nmap.normals + 1.0) * 0.5
    img[~nmap.valid] = INVALID_ENCODING
    return img


def decode_normal_image(img) -> np.ndarray:
    return np.asarray(img) * 2.0 - 1.0


def angular_error(a, b) -> np.ndarray:
    """Angle in radians between unit vectors along the last axis."""
    cos = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return np.arccos(cos)
