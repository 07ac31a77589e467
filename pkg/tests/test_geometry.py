import numpy as np
import pytest

from rgbdface.cloud import ObservedFrame, backproject_depth, depth_to_points, estimate_normals
from rgbdface.model import CameraIntrinsics, backproject, project
from rgbdface.raster import rasterize


def fronto_triangle(K, z=1.0, half=40):
    """Counter-clockwise (seen from the camera) triangle around the principal point."""
    px = np.array([[K.cx - half, K.cy + half], [K.cx + half, K.cy + half], [K.cx, K.cy - half]])
    return backproject(K, px[:, 0], px[:, 1], np.full(3, z))


def test_fronto_triangle_covers_center(K):
    S = fronto_triangle(K)
    r = rasterize(S, [[0, 2, 1]], K)
    if not r.mask.any():
        r = rasterize(S, [[0, 1, 2]], K)
    c, v = int(K.cx), int(K.cy)
    assert r.mask[v, c]
    assert r.depth[v, c] == pytest.approx(1.0, abs=1e-12)
    assert r.bary[v, c].sum() == pytest.approx(1.0)
    np.testing.assert_allclose(r.depth[r.mask], 1.0, atol=1e-12)


def test_backface_culling(K):
    S = fronto_triangle(K)
    a = rasterize(S, [[0, 1, 2]], K).mask.sum()
    b = rasterize(S, [[0, 2, 1]], K).mask.sum()
    assert (a == 0) != (b == 0)
    both = rasterize(S, [[0, 1, 2]], K, cull_backfaces=False).mask.sum()
    assert both == max(a, b)


def test_nearer_triangle_wins(K):
    near, far = fronto_triangle(K, 1.0), fronto_triangle(K, 2.0, half=20)
    S = np.vstack([far, near])
    tris = [[0, 1, 2], [3, 4, 5]]
    r = rasterize(S, tris, K, cull_backfaces=False)
    c, v = int(K.cx), int(K.cy)
    assert r.triangle[v, c] == 1
    assert r.depth[v, c] == pytest.approx(1.0)


def test_slanted_plane_depth_is_perspective_correct(K):
    # plane z = 1 + 0.5 x; every covered pixel must lie on it
    px = np.array([[200.0, 150.0], [440.0, 150.0], [320.0, 350.0]])
    S = []
    for u, v in px:
        ray = backproject(K, u, v, 1.0)
        t = 1.0 / (1.0 - 0.5 * ray[0])
        S.append(ray * t)
    r = rasterize(np.array(S), [[0, 1, 2]], K, cull_backfaces=False)
    rows, cols = np.nonzero(r.mask)
    P = backproject(K, cols, rows, r.depth[rows, cols])
    np.testing.assert_allclose(P[:, 2], 1.0 + 0.5 * P[:, 0], atol=1e-10)


def test_interpolate_constant_attribute(K):
    S = fronto_triangle(K)
    r = rasterize(S, [[0, 1, 2]], K, cull_backfaces=False)
    out = r.interpolate(np.full((3, 2), 7.0), [[0, 1, 2]])
    np.testing.assert_allclose(out[r.mask], 7.0)
    assert np.all(out[~r.mask] == 0)


def test_behind_camera_triangle_dropped(K):
    S = fronto_triangle(K)
    S[0, 2] = -0.1
    assert not rasterize(S, [[0, 1, 2]], K, cull_backfaces=False).mask.any()


def test_depth_to_points_inverts_projection(K):
    depth = np.full((480, 640), 1.5)
    P = depth_to_points(depth, K)
    uv = project(K, P[100:103, 200:203].reshape(-1, 3))
    np.testing.assert_allclose(uv[0], [200, 100], atol=1e-9)


def test_fronto_parallel_normals(K):
    depth = np.zeros((40, 50))
    depth[5:35, 5:45] = 1.0
    n, valid = estimate_normals(depth, CameraIntrinsics(525, 525, 25, 20, 50, 40))
    assert valid[20, 25]
    np.testing.assert_allclose(n[valid], np.tile([0, 0, -1.0], (valid.sum(), 1)), atol=1e-12)


def test_slanted_normals():
    K = CameraIntrinsics(500, 500, 30, 30, 60, 60)
    v, u = np.mgrid[0:60, 0:60]
    # plane z = 1 + x  (45 degrees about y)
    z = 1.0 / (1.0 - (u - K.cx) / K.fx)
    n, valid = estimate_normals(z, K, max_jump=1.0)
    expect = np.array([1.0, 0.0, -1.0]) / np.sqrt(2.0)
    np.testing.assert_allclose(n[valid], np.tile(expect, (valid.sum(), 1)), atol=1e-9)


def test_isolated_pixel_has_no_normal():
    K = CameraIntrinsics(500, 500, 10, 10, 20, 20)
    depth = np.zeros((20, 20))
    depth[10, 10] = 1.0
    depth[3:6, 3:6] = 1.0
    _, valid = estimate_normals(depth, K)
    assert not valid[10, 10]
    assert valid[4, 4]


def test_depth_jump_isolates_surfaces():
    K = CameraIntrinsics(500, 500, 10, 10, 20, 20)
    depth = np.ones((20, 20))
    depth[:, 10:] = 2.0
    n, valid = estimate_normals(depth, K)
    np.testing.assert_allclose(n[valid][:, 2], -1.0, atol=1e-12)


def test_point_cloud_of_empty_frame(K):
    pc = backproject_depth(np.zeros((480, 640)), K)
    assert len(pc) == 0 and len(pc.usable) == 0


def test_observed_frame_cloud_and_gray(K):
    color = np.zeros((480, 640, 3), np.uint8)
    color[..., 0] = 30
    depth = np.zeros((480, 640))
    depth[100:110, 100:110] = 1.0
    fr = ObservedFrame(color, depth, K)
    assert len(fr.cloud) == 100
    assert fr.gray[0, 0] == pytest.approx(10.0)
    np.testing.assert_array_equal(fr.cloud.pixels[0], [100, 100])
