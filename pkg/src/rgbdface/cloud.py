"""Observed RGBD frames and the organized point clouds derived from them."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from .model import CameraIntrinsics, backproject


@dataclass(eq=False)
class PointCloud:
    """Valid depth pixels backprojected to meters.

    ``pixels`` holds (row, col) of each point. ``normal_valid`` marks points
    whose normal could be estimated; invalid normals are zero.
    """
    points: np.ndarray
    normals: np.ndarray
    normal_valid: np.ndarray
    pixels: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __len__(self):
        return len(self.points)

    @cached_property
    def usable(self) -> np.ndarray:
        """Indices of points that have a normal."""
        return np.nonzero(self.normal_valid)[0]

    @cached_property
    def kdtree(self) -> cKDTree:
        """k-d tree over the usable points (indices into ``usable``)."""
        return cKDTree(self.points[self.usable])


@dataclass(eq=False)
class ObservedFrame:
    color: np.ndarray               # (H, W, 3) uint8
    depth: np.ndarray               # (H, W) meters, 0 = invalid
    K: CameraIntrinsics

    @cached_property
    def cloud(self) -> PointCloud:
        return backproject_depth(self.depth, self.K)

    @cached_property
    def gray(self) -> np.ndarray:
        return to_gray(self.color)


def to_gray(color) -> np.ndarray:
    c = np.asarray(color, dtype=np.float64)
    return c if c.ndim == 2 else c.mean(axis=2)


def depth_to_points(depth, K: CameraIntrinsics) -> np.ndarray:
    """Organized (H, W, 3) point grid; invalid pixels give zero points."""
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    v, u = np.mgrid[0:H, 0:W]
    return backproject(K, u, v, depth)


def estimate_normals(depth, K: CameraIntrinsics, max_jump: float = 0.02) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel unit normals from central-difference tangents on the depth grid.

    A neighbor counts only if it is valid and its depth differs by at most
    ``max_jump * z`` (so silhouettes do not mix surfaces). A tangent falls
    back to a one-sided difference when a neighbor is missing; a pixel needs
    at least 3 usable 4-neighbors and a tangent along both axes. Normals are
    oriented toward the camera. Returns ``(normals (H, W, 3), valid (H, W))``.
    """
    depth = np.asarray(depth, dtype=np.float64)
    P = depth_to_points(depth, K)
    ok = depth > 0
    H, W = depth.shape

    def shifted(a, dr, dc, fill):
        out = np.full_like(a, fill)
        rs = slice(max(dr, 0), H + min(dr, 0))
        rd = slice(max(-dr, 0), H + min(-dr, 0))
        cs = slice(max(dc, 0), W + min(dc, 0))
        cd = slice(max(-dc, 0), W + min(-dc, 0))
        out[rd, cd] = a[rs, cs]
        return out

    tangents = []
    n_neighbors = np.zeros((H, W), dtype=np.int64)
    def near(dr, dc):
        zn = shifted(depth, dr, dc, 0.0)
        return shifted(ok, dr, dc, False) & (np.abs(zn - depth) <= max_jump * depth)

    for dr, dc in ((0, 1), (1, 0)):
        fwd_ok = near(dr, dc)
        bwd_ok = near(-dr, -dc)
        fwd = shifted(P, dr, dc, 0.0)
        bwd = shifted(P, -dr, -dc, 0.0)
        t = np.zeros_like(P)
        both = fwd_ok & bwd_ok
        t[both] = fwd[both] - bwd[both]
        only_f = fwd_ok & ~bwd_ok
        t[only_f] = fwd[only_f] - P[only_f]
        only_b = bwd_ok & ~fwd_ok
        t[only_b] = P[only_b] - bwd[only_b]
        tangents.append((t, fwd_ok | bwd_ok))
        n_neighbors += fwd_ok.astype(np.int64) + bwd_ok.astype(np.int64)

    (tu, has_u), (tv, has_v) = tangents
    n = np.cross(tu, tv)
    norm = np.linalg.norm(n, axis=2)
    valid = ok & has_u & has_v & (n_neighbors >= 3) & (norm > 1e-15)
    n = np.divide(n, norm[..., None], out=np.zeros_like(n), where=valid[..., None])
    flip = np.einsum("ijk,ijk->ij", n, P) > 0
    n[flip] *= -1.0
    return n, valid


def backproject_depth(depth, K: CameraIntrinsics) -> PointCloud:
    depth = np.asarray(depth, dtype=np.float64)
    ok = depth > 0
    if not ok.any():
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=bool),
                          np.zeros((0, 2), dtype=np.int64))
    normals, nvalid = estimate_normals(depth, K)
    rows, cols = np.nonzero(ok)
    pts = backproject(K, cols, rows, depth[rows, cols])
    return PointCloud(pts, normals[rows, cols], nvalid[rows, cols],
                      np.stack([rows, cols], axis=1))
