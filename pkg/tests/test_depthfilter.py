import numpy as np
import pytest

from rgbdface.depthfilter import (FilterConfig, FilterWeights, energy, filter_step, initial_depth,
                                  jtf_weight, recover, render_prior_depth, window_offsets)
from rgbdface.model import backproject


def small_scene(rng, H=16, W=16):
    color = rng.integers(0, 256, (H, W, 3)).astype(np.uint8)
    Z = 1.0 + 0.01 * rng.normal(size=(H, W))
    Z[rng.uniform(size=(H, W)) < 0.15] = 0.0
    V = 1.0 + 0.01 * rng.normal(size=(H, W))
    V[:3] = 0.0
    return color, Z, V


def dense_system(weights, Z, V, cfg):
    """Normal equations assembled pair by pair, independent of the Jacobi code."""
    H, W = Z.shape
    n = H * W
    A = np.zeros((n, n))
    b = np.zeros(n)
    for y in range(H):
        for x in range(W):
            i = y * W + x
            for k, (dy, dx) in enumerate(weights.offsets):
                yy, xx = y + dy, x + dx
                if not (0 <= yy < H and 0 <= xx < W):
                    continue
                a = weights.alpha[k, y, x]
                j = yy * W + xx
                A[i, i] += a
                A[j, j] += a
                A[i, j] -= a
                A[j, i] -= a
            if Z[y, x] > 0:
                A[i, i] += cfg.lambda_d
                b[i] += cfg.lambda_d * Z[y, x]
            if V[y, x] > 0:
                A[i, i] += cfg.lambda_f
                b[i] += cfg.lambda_f * V[y, x]
    return A, b


def test_window_offsets():
    off = window_offsets(1)
    assert len(off) == 8 and not np.any(np.all(off == 0, axis=1))
    assert len(window_offsets(3)) == 48


def test_alpha_normalized(rng):
    color, Z, _ = small_scene(rng)
    w = FilterWeights.compute(color, Z)
    np.testing.assert_allclose(w.alpha.sum(axis=0), 1.0, atol=1e-12)
    assert np.all(w.alpha >= 0)


def test_uniform_guide_gives_spatial_gaussian():
    cfg = FilterConfig(radius=2, sigma_s=1.5)
    color = np.full((9, 9, 3), 90, np.uint8)
    w = FilterWeights.compute(color, np.ones((9, 9)), cfg)
    d2 = (w.offsets ** 2).sum(axis=1)
    g = np.exp(-d2 / (2 * 1.5 ** 2))
    np.testing.assert_allclose(w.alpha[:, 4, 4], g / g.sum(), rtol=1e-12)


def test_color_edge_suppresses_weight():
    color = np.zeros((8, 8, 3), np.uint8)
    color[:, 4:] = 200
    depth = np.ones((8, 8))
    across = jtf_weight((3, 3), (3, 4), color, depth)
    same = jtf_weight((3, 3), (3, 2), color, depth)
    assert across / same < 1e-3
    with pytest.raises(ValueError):
        jtf_weight((3, 3), (3, 3), color, depth)


def test_energy_constant_and_loop_oracle(rng):
    cfg = FilterConfig(radius=1)
    color, Z, V = small_scene(rng, 6, 7)
    w = FilterWeights.compute(color, Z, cfg)
    c = np.full(Z.shape, 1.3)
    assert energy(c, np.where(Z > 0, 1.3, 0), np.where(V > 0, 1.3, 0), w, cfg) == pytest.approx(0, abs=1e-24)
    X = 1 + 0.02 * rng.normal(size=Z.shape)
    H, W = Z.shape
    er = 0.0
    for y in range(H):
        for x in range(W):
            for k, (dy, dx) in enumerate(w.offsets):
                if 0 <= y + dy < H and 0 <= x + dx < W:
                    er += w.alpha[k, y, x] * (X[y, x] - X[y + dy, x + dx]) ** 2
    data = sum(cfg.lambda_d * (X[p] - Z[p]) ** 2 for p in zip(*np.nonzero(Z > 0)))
    prior = sum(cfg.lambda_f * (X[p] - V[p]) ** 2 for p in zip(*np.nonzero(V > 0)))
    assert energy(X, Z, V, w, cfg) == pytest.approx(0.5 * (er + data + prior), rel=1e-12)


def test_huge_data_weight_returns_raw(rng):
    cfg = FilterConfig(lambda_d=1e9, lambda_f=0.0)
    color, Z, V = small_scene(rng)
    Z[Z == 0] = 1.0
    w = FilterWeights.compute(color, Z, cfg)
    X = filter_step(1 + 0.01 * rng.normal(size=Z.shape), Z, V, w, cfg)
    np.testing.assert_allclose(X, Z, atol=1e-9)


def test_constant_field_is_fixed_point(rng):
    color, Z, V = small_scene(rng)
    Z = np.where(Z > 0, 0.8, 0.0)
    V = np.where(V > 0, 0.8, 0.0)
    w = FilterWeights.compute(color, Z)
    X = np.full(Z.shape, 0.8)
    np.testing.assert_allclose(filter_step(X, Z, V, w), 0.8, rtol=1e-14)


def test_jacobi_reads_only_previous_iterate(rng):
    cfg = FilterConfig(radius=1)
    color, Z, V = small_scene(rng, 8, 8)
    w = FilterWeights.compute(color, Z, cfg)
    X = 1 + 0.02 * rng.normal(size=Z.shape)
    A, b = dense_system(w, Z, V, cfg)
    d = np.diag(A)
    expect = (b - (A - np.diag(d)) @ X.ravel()) / d
    np.testing.assert_allclose(filter_step(X, Z, V, w, cfg).ravel(), expect, rtol=1e-12)


def test_stuck_pixel_keeps_value():
    cfg = FilterConfig(radius=0)
    Z = np.array([[1.0, 0.0]])
    V = np.zeros((1, 2))
    w = FilterWeights.compute(np.zeros((1, 2, 3), np.uint8), Z, cfg)
    X, stuck = filter_step(np.array([[2.0, 3.0]]), Z, V, w, cfg, return_flags=True)
    np.testing.assert_array_equal(stuck, [[False, True]])
    np.testing.assert_array_equal(X, [[1.0, 3.0]])


def test_matches_dense_solve(rng):
    cfg = FilterConfig(iterations=50)
    color, Z, V = small_scene(rng)
    w = FilterWeights.compute(color, Z, cfg)
    A, b = dense_system(w, Z, V, cfg)
    x_star = np.linalg.solve(A, b)
    res = recover(Z, V, color, cfg)
    np.testing.assert_allclose(res.depth.ravel(), x_star, atol=1e-6)
    X = res.depth
    for _ in range(150):
        X = filter_step(X, Z, V, w, cfg)
    assert np.linalg.norm(A @ X.ravel() - b) < 1e-8


def test_recover_edge_cases(rng):
    color, Z, V = small_scene(rng)
    r0 = recover(Z, V, color, FilterConfig(iterations=0))
    np.testing.assert_array_equal(r0.depth, initial_depth(Z, V))
    np.testing.assert_array_equal(r0.depth[Z > 0], Z[Z > 0])
    empty = recover(np.zeros_like(Z), np.zeros_like(V), color)
    assert empty.empty and not empty.depth.any()


def test_energy_monotone_and_bounded(rng):
    color, Z, V = small_scene(rng, 24, 20)
    a = recover(Z, V, color, FilterConfig(iterations=15), track_energy=True)
    assert all(y <= x + 1e-15 for x, y in zip(a.energies, a.energies[1:]))
    b = recover(Z, V, color, FilterConfig(iterations=30), track_energy=True)
    assert b.energies[-1] <= a.energies[-1]
    vals = np.r_[Z[Z > 0], V[V > 0]]
    assert vals.min() - 1e-12 <= b.depth.min() and b.depth.max() <= vals.max() + 1e-12


def test_render_prior_fronto_and_zbuffer(K):
    px = np.array([[K.cx - 30, K.cy + 30], [K.cx + 30, K.cy + 30], [K.cx, K.cy - 30]])
    near = backproject(K, px[:, 0], px[:, 1], np.full(3, 1.0))
    far = backproject(K, px[:, 0], px[:, 1], np.full(3, 1.5))
    S = np.vstack([far, near])
    tris = np.array([[0, 1, 2], [3, 4, 5]])
    if not render_prior_depth(S, tris[:1], K).any():
        tris = tris[:, ::-1]
    V = render_prior_depth(S, tris, K)
    c, v = int(K.cx), int(K.cy)
    assert V[v, c] == pytest.approx(1.0)
    assert V[0, 0] == 0.0
    np.testing.assert_allclose(V[V > 0], 1.0, atol=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        FilterConfig(lambda_d=-1)
    with pytest.raises(ValueError):
        FilterConfig(sigma_c=0)
    with pytest.raises(ValueError):
        FilterConfig(lambda_d=0, lambda_f=0, radius=0)
