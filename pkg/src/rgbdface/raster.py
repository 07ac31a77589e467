"""Z-buffer triangle rasterizer with perspective-correct interpolation.

Pixel (col, row) has its center at image coordinate (col, row), matching
:func:`rgbdface.model.project`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import CameraIntrinsics


@dataclass
class Raster:
    depth: np.ndarray         # (H, W) meters, 0 where uncovered
    triangle: np.ndarray      # (H, W) triangle index, -1 where uncovered
    bary: np.ndarray          # (H, W, 3) perspective-correct barycentrics

    @property
    def mask(self) -> np.ndarray:
        return self.triangle >= 0

    def interpolate(self, vertex_attr, triangles) -> np.ndarray:
        """Interpolate per-vertex attributes (N_v, C) over covered pixels."""
        vertex_attr = np.asarray(vertex_attr, dtype=np.float64)
        out = np.zeros(self.depth.shape + vertex_attr.shape[1:])
        m = self.mask
        tri = np.asarray(triangles)[self.triangle[m]]
        b = self.bary[m]
        out[m] = np.einsum("nk,nk...->n...", b, vertex_attr[tri])
        return out


def rasterize(S, triangles, K: CameraIntrinsics, size=None, cull_backfaces: bool = True) -> Raster:
    """Rasterize camera-frame vertices ``S`` (N_v, 3).

    Triangles with a vertex at z <= 0 are dropped; with ``cull_backfaces``
    so are triangles whose 3D normal (counter-clockwise winding) faces away
    from the camera.
    """
    H, W = size if size is not None else K.size
    S = np.asarray(S, dtype=np.float64)
    tri = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    depth = np.zeros((H, W))
    tri_map = np.full((H, W), -1, dtype=np.int64)
    bary = np.zeros((H, W, 3))
    if len(tri) == 0:
        return Raster(depth, tri_map, bary)

    P = S[tri]                                           # (T, 3, 3)
    keep = np.all(P[:, :, 2] > 0, axis=1)
    if cull_backfaces:
        n = np.cross(P[:, 1] - P[:, 0], P[:, 2] - P[:, 0])
        keep &= np.einsum("ij,ij->i", n, P[:, 0]) < 0
    ids = np.nonzero(keep)[0]
    if len(ids) == 0:
        return Raster(depth, tri_map, bary)
    P = P[ids]
    z = P[:, :, 2]
    u = K.cx + K.fx * P[:, :, 0] / z
    v = K.cy + K.fy * P[:, :, 1] / z

    u0 = np.clip(np.ceil(u.min(1)), 0, W).astype(np.int64)
    u1 = np.clip(np.floor(u.max(1)), -1, W - 1).astype(np.int64)
    v0 = np.clip(np.ceil(v.min(1)), 0, H).astype(np.int64)
    v1 = np.clip(np.floor(v.max(1)), -1, H - 1).astype(np.int64)
    nu = np.maximum(u1 - u0 + 1, 0)
    nv = np.maximum(v1 - v0 + 1, 0)
    count = nu * nv
    if count.sum() == 0:
        return Raster(depth, tri_map, bary)

    t = np.repeat(np.arange(len(ids)), count)
    start = np.cumsum(count) - count
    local = np.arange(count.sum()) - np.repeat(start, count)
    pu = u0[t] + local % nu[t]
    pv = v0[t] + local // nu[t]

    ua, ub, uc = u[t, 0], u[t, 1], u[t, 2]
    va, vb, vc = v[t, 0], v[t, 1], v[t, 2]
    area = (ub - ua) * (vc - va) - (uc - ua) * (vb - va)
    ok = np.abs(area) > 1e-12
    area = np.where(ok, area, 1.0)
    w0 = ((ub - pu) * (vc - pv) - (uc - pu) * (vb - pv)) / area
    w1 = ((uc - pu) * (va - pv) - (ua - pu) * (vc - pv)) / area
    w2 = 1.0 - w0 - w1
    eps = -1e-9
    inside = ok & (w0 >= eps) & (w1 >= eps) & (w2 >= eps)
    t, pu, pv = t[inside], pu[inside], pv[inside]
    sb = np.stack([w0[inside], w1[inside], w2[inside]], axis=1).clip(0.0, 1.0)
    sb /= sb.sum(1, keepdims=True)

    inv_z = sb / z[t]
    zz = 1.0 / inv_z.sum(1)
    pb = inv_z * zz[:, None]

    pix = pv * W + pu
    order = np.lexsort((ids[t], zz, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]
    flat = pix[win]
    depth.ravel()[flat] = zz[win]
    tri_map.ravel()[flat] = ids[t[win]]
    bary.reshape(-1, 3)[flat] = pb[win]
    return Raster(depth, tri_map, bary)
