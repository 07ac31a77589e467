import numpy as np
import pytest

from rgbdface.cloud import ObservedFrame, PointCloud, backproject_depth
from rgbdface.model import RigidPose, ShapeParams, landmark_positions_2d, transform, _blend_unchecked
from rgbdface.synth import SequenceSpec, render_sequence, sequence_identity
from rgbdface.tracking import (CorrespondenceSet, FrameRecord, IdentityObjective, RefinementConfig,
                               TrackerState, bracket_minimum, energy_e2d, energy_e3d_point_plane,
                               energy_ereg, find_correspondences, golden_section, read_records_binary,
                               read_records_csv, refine, sample_vertices, update_identity,
                               write_records_binary, write_records_csv)


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def central_diff(f, x, h):
    g = np.zeros(len(x))
    for k in range(len(x)):
        d = np.zeros(len(x))
        d[k] = h[k] if np.ndim(h) else h
        g[k] = (f(x + d) - f(x - d)) / (2 * d[k])
    return g


@pytest.fixture(scope="module")
def clean_case(rig, K):
    spec = SequenceSpec(frames=1, distance=0.7, noise=None, detail_rms=0.0, background_offset=None)
    p, fr = next(iter(render_sequence(rig, spec, K)))
    return p, fr, sequence_identity(rig, spec)


@pytest.fixture(scope="module")
def noisy_case(rig, K):
    spec = SequenceSpec(frames=3, distance=2.0)
    p, fr = list(render_sequence(rig, spec, K))[2]
    return p, fr, sequence_identity(rig, spec)


def raw_params(state, p, fr, K, offset=None, noise=None):
    theta = p.theta if offset is None else p.theta + offset
    pr = ShapeParams.from_theta(theta, np.zeros((state.topology.n_landmarks, 2)))
    target = fr.landmarks if noise is None else fr.landmarks + noise
    return pr.replace(displacements=landmark_positions_2d(state.blendshapes, pr, K) - target)


# -- correspondences ---------------------------------------------------------

def test_sample_vertices_stride():
    np.testing.assert_array_equal(sample_vertices(10, 4), [0, 3, 6, 9])
    assert len(sample_vertices(600, 1000)) == 600


def test_self_copy_matches_itself(rng):
    S = rng.normal(size=(50, 3)) * 0.05 + [0, 0, 1.0]
    n = np.tile([0, 0, -1.0], (50, 1))
    cloud = PointCloud(S.copy(), n, np.ones(50, bool))
    c = find_correspondences(S, cloud)
    np.testing.assert_array_equal(c.vertices, c.points)
    assert len(c) == 50 and not c.two_d_only


def test_displaced_cloud_gives_no_pairs(clean_case, rig):
    p, fr, w = clean_case
    S = fr.vertices
    moved = PointCloud(fr.frame.cloud.points + [0, 0, 1.0], fr.frame.cloud.normals,
                       fr.frame.cloud.normal_valid)
    c = find_correspondences(S, moved, triangles=rig.topology.triangles)
    assert len(c) == 0 and c.two_d_only


def test_gate_sweep_monotone(noisy_case, rig):
    _, fr, _ = noisy_case
    S = fr.vertices + [0.0, 0.0, 0.01]
    counts = [len(find_correspondences(S, fr.frame.cloud, RefinementConfig(max_distance=g),
                                       triangles=rig.topology.triangles, frame=fr.frame))
              for g in (0.08, 0.05, 0.02, 0.012, 0.008, 0.004)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert counts[0] > counts[-1]


def test_hidden_vertices_are_skipped(clean_case, rig):
    _, fr, _ = clean_case
    tri = rig.topology.triangles
    all_v = find_correspondences(fr.vertices, fr.frame.cloud, triangles=tri)
    vis = find_correspondences(fr.vertices, fr.frame.cloud, triangles=tri, frame=fr.frame)
    assert set(vis.vertices) <= set(all_v.vertices) | set(vis.vertices)
    assert 0 < len(vis) <= len(sample_vertices(len(fr.vertices), 1000))


# -- energies ----------------------------------------------------------------

def test_e2d_examples(rig, K):
    st = TrackerState.initial(rig.core, rig.topology)
    theta = np.r_[0.1, -0.2, 0.05, 0.01, 0.02, 1.0, np.full(11, 0.2)]
    l = landmark_positions_2d(st.blendshapes, ShapeParams.from_theta(theta, np.zeros((16, 2))), K)
    assert energy_e2d(theta, l, st.blendshapes, K)[0] == pytest.approx(0.0, abs=1e-20)
    off = np.tile([0.6, 0.8], (16, 1))
    assert energy_e2d(theta, l + off, st.blendshapes, K)[0] == pytest.approx(1.0)


def test_e2d_gradient_fd(rig, K, rng):
    st = TrackerState.initial(rig.core, rig.topology)
    theta = np.r_[0.1, -0.2, 0.05, 0.01, 0.02, 1.0, rng.uniform(0.1, 0.9, 11)]
    l = rng.uniform(250, 400, (16, 2))
    f = lambda t: energy_e2d(t, l, st.blendshapes, K)[0]
    assert rel_err(energy_e2d(theta, l, st.blendshapes, K)[1], central_diff(f, theta, 1e-6)) < 1e-4


def test_e2d_drops_points_behind_camera(rig, K):
    st = TrackerState.initial(rig.core, rig.topology)
    theta = np.r_[0, 0, 0, 0, 0, -1.0, np.zeros(11)]
    val, g = energy_e2d(theta, np.zeros((16, 2)), st.blendshapes, K)
    assert val == 0.0 and not g.any()


def test_e3d_examples(rig):
    st = TrackerState.initial(rig.core, rig.topology)
    theta = np.r_[0, 0, 0, 0, 0, 1.0, np.zeros(11)]
    S = transform(_blend_unchecked(st.blendshapes, np.zeros(11)), RigidPose([0, 0, 0], [0, 0, 1.0]))
    n = np.tile([0, 0, -1.0], (len(S), 1))
    corr = CorrespondenceSet(np.arange(len(S)), np.arange(len(S)), np.ones(len(S)))
    assert energy_e3d_point_plane(theta, corr, PointCloud(S, n, np.ones(len(S), bool)),
                                  st.blendshapes)[0] == pytest.approx(0.0, abs=1e-25)
    one = CorrespondenceSet(np.array([7]), np.array([0]), np.ones(1))
    nk = np.array([[0.6, 0.0, -0.8]])
    cloud = PointCloud(S[[7]] - 0.003 * nk, nk, np.ones(1, bool))
    assert energy_e3d_point_plane(theta, one, cloud, st.blendshapes)[0] == pytest.approx(0.003 ** 2)
    empty = CorrespondenceSet(np.zeros(0, int), np.zeros(0, int), np.zeros(0), True)
    assert energy_e3d_point_plane(theta, empty, cloud, st.blendshapes)[0] == 0.0


def test_e3d_matches_loop_and_fd(rig, rng):
    st = TrackerState.initial(rig.core, rig.topology)
    theta = np.r_[0.05, 0.1, -0.02, 0.0, 0.01, 0.9, rng.uniform(0.1, 0.9, 11)]
    m = 40
    pts = rng.normal(size=(m, 3)) * 0.05 + [0, 0, 0.9]
    nrm = rng.normal(size=(m, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    cloud = PointCloud(pts, nrm, np.ones(m, bool))
    corr = CorrespondenceSet(rng.choice(600, m, replace=False), np.arange(m), rng.uniform(0.5, 1, m))
    val, g = energy_e3d_point_plane(theta, corr, cloud, st.blendshapes)
    p = ShapeParams.from_theta(theta, np.zeros((16, 2)))
    S = transform(_blend_unchecked(st.blendshapes, p.expr), p.pose)
    loop = 0.0
    for k in range(m):
        r = sum((S[corr.vertices[k], c] - pts[k, c]) * nrm[k, c] for c in range(3))
        loop += corr.weights[k] * r * r
    assert val == pytest.approx(loop / m, rel=1e-12)
    f = lambda t: energy_e3d_point_plane(t, corr, cloud, st.blendshapes, 1000.0)[0]
    g_mm = energy_e3d_point_plane(theta, corr, cloud, st.blendshapes, 1000.0)[1]
    assert rel_err(g_mm, central_diff(f, theta, 1e-6)) < 1e-4


def test_ereg_examples_and_gradient(rig, rng):
    st = TrackerState.initial(rig.core, rig.topology)
    theta_star = rng.normal(size=17)
    assert energy_ereg(theta_star, theta_star, st, 5.0, 7.0)[0] == 0.0
    st.push(theta_star - 2 * 0.01)
    st.push(theta_star - 0.01)
    assert energy_ereg(theta_star, theta_star, st, 5.0, 7.0)[0] == pytest.approx(0.0, abs=1e-24)
    theta = theta_star + rng.normal(size=17) * 0.1
    assert energy_ereg(theta, theta_star, st, 0.0, 0.0)[0] == 0.0
    a, b = RefinementConfig().reg_weights(11)
    f = lambda t: energy_ereg(t, theta_star, st, a, b, 1000.0)[0]
    g = energy_ereg(theta, theta_star, st, a, b, 1000.0)[1]
    assert rel_err(g, central_diff(f, theta, 1e-6)) < 1e-4
    val = energy_ereg(theta, theta_star, st, 2.0, 3.0)[0]
    expect = 2.0 * np.sum((theta - theta_star) ** 2) + 3.0 * np.sum(
        (theta - 2 * st.theta_prev + st.theta_prev2) ** 2)
    assert val == pytest.approx(expect)


# -- refinement --------------------------------------------------------------

def test_refine_energy_not_above_raw(noisy_case, rig, K, rng):
    p, fr, w = noisy_case
    st = TrackerState.initial(rig.core, rig.topology, w)
    pr = raw_params(st, p, fr, K, np.r_[0.02, -0.01, 0.0, 0.004, 0.0, 0.01, np.zeros(11)],
                    rng.normal(0, 1.0, (16, 2)))
    r = refine(pr, fr.frame, st)
    assert r.total <= r.total_raw
    assert np.all((r.params.expr >= 0) & (r.params.expr <= 1))
    np.testing.assert_array_equal(r.params.displacements, pr.displacements)


def test_refine_from_truth_translation_and_floor(clean_case, rig, K):
    p, fr, w = clean_case
    st = TrackerState.initial(rig.core, rig.topology, w)
    r = refine(raw_params(st, p, fr, K), fr.frame, st)
    assert np.abs(r.params.pose.translation - p.pose.translation).max() < 1e-4
    assert r.e3d < 1e-8


@pytest.mark.xfail(strict=True, reason="central-difference cloud normals are biased at mesh "
                                       "creases; the fixed point sits ~4e-4 rad / ~6e-3 off truth")
def test_refine_from_truth_rotation_and_expression(clean_case, rig, K):
    p, fr, w = clean_case
    st = TrackerState.initial(rig.core, rig.topology, w)
    r = refine(raw_params(st, p, fr, K), fr.frame, st)
    assert np.linalg.norm(r.params.pose.rotation - p.pose.rotation) < 1e-4
    assert np.abs(r.params.expr - p.expr).max() < 1e-3


def test_refine_recovers_z_offset(clean_case, rig, K):
    p, fr, w = clean_case
    st = TrackerState.initial(rig.core, rig.topology, w)
    pr = raw_params(st, p, fr, K, np.r_[np.zeros(5), 0.02, np.zeros(11)])
    r = refine(pr, fr.frame, st)
    assert abs(r.params.pose.translation[2] - p.pose.translation[2]) < 2e-3


def test_refine_without_depth_is_2d_only(clean_case, rig, K):
    p, fr, w = clean_case
    st = TrackerState.initial(rig.core, rig.topology, w)
    flat = ObservedFrame(fr.frame.color, np.zeros_like(fr.frame.depth), K)
    r = refine(raw_params(st, p, fr, K), flat, st)
    assert r.two_d_only and r.e3d == 0.0


def test_rigid_refinement_translation_equivariance(clean_case, rig, K):
    """Moving scene and camera together by G = translation t leaves every
    camera-frame input unchanged, so the world-frame result moves by t."""
    p, fr, w = clean_case
    t = np.array([0.3, -0.2, 0.5])
    results = []
    for shift in (np.zeros(3), t):
        st = TrackerState.initial(rig.core, rig.topology, w)
        cam = RigidPose(np.zeros(3), shift)
        r = refine(raw_params(st, p, fr, K, np.r_[0.01, 0, 0, 0, 0.002, 0.005, np.zeros(11)]),
                   fr.frame, st)
        results.append(cam.compose(r.params.pose).translation)
    np.testing.assert_allclose(results[1] - results[0], t, atol=1e-6)


# -- identity ----------------------------------------------------------------

def test_gamma_at_zero_expression(rig):
    np.testing.assert_array_equal(rig.core.gamma(np.zeros(11)), rig.core.exp_basis[0])


def test_golden_section_and_bracket():
    f = lambda x: (x - 1.3) ** 2
    a, b = bracket_minimum(f, 0.0, f(0.0), 0.1)
    assert a <= 1.3 <= b
    x, fx = golden_section(f, a, b, xtol=1e-8)
    assert x == pytest.approx(1.3, abs=1e-6)
    a, b = bracket_minimum(f, 1.3, 0.0, 0.1)
    assert a < 1.3 < b


def test_identity_update_lowers_objective(noisy_case, rig, K):
    p, fr, w_true = noisy_case
    st = TrackerState.initial(rig.core, rig.topology)
    pr = ShapeParams.from_theta(p.theta, np.zeros((16, 2)))
    obj = IdentityObjective(st, fr.frame, pr, fr.landmarks, RefinementConfig())
    before = obj(st.w_id)
    w = update_identity(st, fr.frame, pr, fr.landmarks)
    assert obj(w) <= before
    assert st.identity_frames == 1 and len(st.identity_steps) == 1
    assert np.linalg.norm(w - w_true) < np.linalg.norm(rig.core.id_mean - w_true)


def test_identity_locks_after_max_frames(clean_case, rig, K):
    p, fr, _ = clean_case
    st = TrackerState.initial(rig.core, rig.topology)
    pr = ShapeParams.from_theta(p.theta, np.zeros((16, 2)))
    cfg = RefinementConfig(identity_max_frames=2, identity_tol=0.0)
    update_identity(st, fr.frame, pr, fr.landmarks, cfg)
    assert not st.identity_locked
    update_identity(st, fr.frame, pr, fr.landmarks, cfg)
    assert st.identity_locked
    w = st.w_id.copy()
    update_identity(st, fr.frame, pr, fr.landmarks, cfg)
    np.testing.assert_array_equal(st.w_id, w)
    assert st.identity_frames == 2
    st.reset()
    assert not st.identity_locked and st.theta_prev is None


def test_tracker_state_history():
    from rgbdface.synth import gen_rig
    rig = gen_rig(n_vertices=100, n_id=3, n_exp=3, n_landmarks=6)
    st = TrackerState.initial(rig.core, rig.topology)
    st.push(np.ones(8))
    st.push(2 * np.ones(8))
    np.testing.assert_array_equal(st.theta_prev2, 1.0)
    np.testing.assert_array_equal(st.theta_prev, 2.0)
    with pytest.raises(ValueError):
        TrackerState(rig.core, rig.topology, np.ones(5))


def test_config_validation():
    with pytest.raises(ValueError):
        RefinementConfig(alpha_R=-1.0)
    with pytest.raises(ValueError):
        RefinementConfig(icp_iterations=0)


# -- records -----------------------------------------------------------------

def test_records_round_trip(tmp_path, rng):
    recs = [FrameRecord(k, rng.normal(size=3), rng.normal(size=3), rng.uniform(0, 1, 4),
                        rng.normal(size=(5, 2)), 1.5, 2e-6, 0.25, k == 1, k == 2, k == 0)
            for k in range(3)]
    write_records_csv(tmp_path / "r.csv", recs)
    write_records_binary(tmp_path / "r.btfr", recs)
    for out in (read_records_csv(tmp_path / "r.csv"), read_records_binary(tmp_path / "r.btfr")):
        for a, b in zip(recs, out):
            assert a.index == b.index
            np.testing.assert_array_equal(a.landmarks, b.landmarks)
            np.testing.assert_array_equal(a.expr, b.expr)
            assert (a.e2d, a.e3d, a.ereg) == (b.e2d, b.e3d, b.ereg)
            assert (a.two_d_only, a.identity_locked, a.empty) == (b.two_d_only, b.identity_locked, b.empty)
    write_records_csv(tmp_path / "e.csv", [])
    assert read_records_csv(tmp_path / "e.csv") == []
    with pytest.raises(ValueError):
        read_records_binary(tmp_path / "r.csv")


def test_backproject_examples(K):
    depth = np.zeros((480, 640))
    depth[239, 319] = 1.0
    depth[100:140, 100:140] = 1.25
    pc = backproject_depth(depth, K)
    k = np.nonzero((pc.pixels[:, 0] == 239) & (pc.pixels[:, 1] == 319))[0][0]
    np.testing.assert_allclose(pc.points[k], [(319 - K.cx) / K.fx, (239 - K.cy) / K.fy, 1.0])
    plane = pc.points[pc.points[:, 2] == 1.25]
    c = plane - plane.mean(0)
    assert np.linalg.svd(c, compute_uv=False)[-1] < 1e-9
