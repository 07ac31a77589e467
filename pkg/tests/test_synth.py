import numpy as np
import pytest

from rgbdface.depthfilter import render_prior_depth
from rgbdface.model import contract, project
from rgbdface.synth import (NoiseModel, SequenceSpec, apply_depth_noise, detail_field, eval_lost_fraction,
                            eval_mae, eval_rmse, frame_rmse, gen_rig, render_sequence,
                            sequence_identity)


def test_one_hot_contraction_returns_stored_meshes(rig):
    n_id, n_e = rig.core.n_id, rig.core.n_exp
    for i in range(n_id):
        for j in range(n_e):
            np.testing.assert_allclose(contract(rig.core, np.eye(n_id)[i], np.eye(n_e)[j]),
                                       rig.meshes[i, j], atol=1e-9)


def test_blendshapes_of_mean_are_mean_meshes(rig):
    B = rig.blendshapes(np.eye(rig.core.n_id)[0])
    np.testing.assert_array_equal(B.shapes, rig.meshes[0])


def test_same_seed_same_rig():
    a, b = gen_rig(seed=3), gen_rig(seed=3)
    assert a.core.data.tobytes() == b.core.data.tobytes()
    np.testing.assert_array_equal(a.topology.triangles, b.topology.triangles)
    np.testing.assert_array_equal(a.albedo, b.albedo)
    assert gen_rig(seed=4).core.data.tobytes() != a.core.data.tobytes()


def test_triangles_nondegenerate_over_seeds():
    for seed in range(20):
        r = gen_rig(seed=seed, n_vertices=300)
        rng = np.random.default_rng(seed)
        w = r.random_identity(rng)
        S = r.blendshapes(w).shapes[0]
        a, b, c = (S[r.topology.triangles[:, k]] for k in range(3))
        area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        assert area.min() > 1e-9
        assert len(set(r.topology.landmark_vertices)) == r.topology.n_landmarks


def test_identity_modes_orthogonal_to_rigid_motion(rig):
    base = rig.meshes[0, 0]
    for i in range(1, rig.core.n_id):
        f = rig.meshes[i, 0].ravel()
        for k in range(3):
            assert abs(f @ np.tile(np.eye(3)[k], len(base))) < 1e-9
        assert abs(f @ base.ravel()) < 1e-9


def test_noiseless_render_matches_prior_renderer(rig, K):
    spec = SequenceSpec(frames=2, distance=1.2, noise=None, detail_rms=0.0, background_offset=None)
    for p, fr in render_sequence(rig, spec, K):
        np.testing.assert_array_equal(fr.frame.depth, render_prior_depth(fr.vertices, rig.topology, K))
        np.testing.assert_array_equal(fr.face_mask, fr.frame.depth > 0)


def test_truth_landmarks_are_projected_landmark_vertices(rig, K):
    spec = SequenceSpec(frames=2, distance=1.5)
    for p, fr in render_sequence(rig, spec, K):
        np.testing.assert_allclose(fr.landmarks, project(K, fr.vertices[rig.topology.landmark_vertices]))


def test_background_wall_depth(rig, K):
    spec = SequenceSpec(frames=1, distance=1.5, noise=None)
    _, fr = next(iter(render_sequence(rig, spec, K)))
    np.testing.assert_array_equal(fr.clean_depth[~fr.face_mask], 2.3)


def test_rendering_is_deterministic(rig, K):
    spec = SequenceSpec(frames=3, distance=2.0, seed=5)
    a = [fr for _, fr in render_sequence(rig, spec, K)]
    b = [fr for _, fr in render_sequence(rig, spec, K)]
    for x, y in zip(a, b):
        assert x.frame.depth.tobytes() == y.frame.depth.tobytes()
        assert x.frame.color.tobytes() == y.frame.color.tobytes()
    np.testing.assert_array_equal(sequence_identity(rig, spec), sequence_identity(rig, spec))


def test_sigma_grows_quadratically():
    n = NoiseModel()
    assert n.sigma(2.0) == pytest.approx(4 * n.sigma(1.0))
    assert n.sigma(2.0) == pytest.approx(5.7e-3)


def test_empirical_axial_noise():
    n = NoiseModel(lateral_sigma=0.0, quant_coeff=0.0, dropout_max=0.0)
    depth = np.full((100, 100), 1.5)
    out = apply_depth_noise(depth, n, np.random.default_rng(0))
    assert np.std(out - depth) == pytest.approx(n.sigma(1.5), rel=0.05)
    assert abs(np.mean(out - depth)) < 3 * n.sigma(1.5) / 100


def test_quantization_and_holes_survive_noise():
    n = NoiseModel(axial_coeff=0.0, lateral_sigma=0.0, dropout_max=0.0)
    depth = np.linspace(0.8, 2.4, 400).reshape(20, 20)
    depth[5, 5] = 0.0
    out = apply_depth_noise(depth, n, np.random.default_rng(1))
    assert out[5, 5] == 0.0
    ok = depth > 0
    q = n.quant_step(depth[ok])
    assert np.all(np.abs(out[ok] - depth[ok]) <= q / 2 + 1e-15)
    np.testing.assert_allclose(out[ok] / q, np.rint(out[ok] / q), atol=1e-9)


def test_detail_field_rms(rig):
    d = detail_field(rig, 0.0015, seed=3)
    assert np.sqrt(np.mean(np.sum(d ** 2, axis=1))) == pytest.approx(0.0015, rel=1e-9)
    assert not detail_field(rig, 0.0, seed=3).any()


def test_eval_rmse_examples(rng):
    truth = rng.uniform(0, 600, (5, 16, 2))
    assert eval_rmse(truth, truth) == 0.0
    shifted = truth + [3.0, 4.0]
    assert eval_rmse(shifted, truth) == pytest.approx(5.0)
    pred = truth + rng.normal(size=truth.shape)
    loop = np.mean([np.sqrt(np.mean([np.sum((pred[f, l] - truth[f, l]) ** 2) for l in range(16)]))
                    for f in range(5)])
    assert eval_rmse(pred, truth) == pytest.approx(loop, rel=1e-12)
    with pytest.raises(ValueError):
        frame_rmse(pred[:, :3], truth)


def test_lost_fraction_examples():
    rmse = np.ones(100)
    empty = np.zeros(100, bool)
    empty[7] = True
    assert eval_lost_fraction(rmse, empty) == pytest.approx(0.01)
    rmse[3] = 10.5
    assert eval_lost_fraction(rmse, empty) == pytest.approx(0.02)
    rmse[4] = np.nan
    assert eval_lost_fraction(rmse, empty) == pytest.approx(0.03)
    assert eval_lost_fraction([]) == 0.0


def test_mae_examples(rng):
    truth = rng.uniform(1, 2, (10, 12))
    assert eval_mae(truth + 0.002, truth) == pytest.approx(2.0)
    mask = np.zeros((10, 12), bool)
    mask[2:5, 3:9] = True
    d = truth + rng.normal(0, 0.01, truth.shape)
    assert eval_mae(d, truth, mask) == pytest.approx(np.abs(d - truth)[mask].mean() * 1000)
    assert eval_mae(d, truth, np.zeros_like(mask)) == 0.0
