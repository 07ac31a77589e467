"""Train a small cascaded regressor and apply it to unseen perturbed guesses.

    python3 demos/03_shape_regressor.py      # under a minute
"""
import numpy as np

from rgbdface.fitting import PerturbConfig, make_training_pairs
from rgbdface.model import CameraIntrinsics, landmark_positions_2d
from rgbdface.regressor import RegressorConfig, load_model, predict, save_model, train
from rgbdface.synth import annotated_images, gen_rig

rig, K = gen_rig(), CameraIntrinsics()
imgs = annotated_images(rig, 12, 10, K, seed=0)


def pairs_of(sub, seed):
    return make_training_pairs([(a.image, a.params, rig.blendshapes(a.w_id)) for a in sub],
                               PerturbConfig(seed=seed))


train_pairs, test_pairs = pairs_of(imgs[:100], 0), pairs_of(imgs[100:], 1)
cfg = RegressorConfig(n_stages=3, trees_per_landmark=3, n_features=200)
model = train(train_pairs, cfg, K, log=print)
print("training residual per stage:", " ".join(f"{r:.3f}" for r in model.residuals))


def landmark_error(pairs, guesses):
    return np.mean([np.sqrt(np.mean(np.sum((landmark_positions_2d(p.shapes, g, K)
                                            - landmark_positions_2d(p.shapes, p.p_truth, K)) ** 2, axis=1)))
                    for p, g in zip(pairs, guesses)])


before = landmark_error(test_pairs, [p.p_guess for p in test_pairs])
after = landmark_error(test_pairs, [predict(model, p.image, p.p_guess, K, p.shapes) for p in test_pairs])
print(f"held-out landmark error {before:.2f} -> {after:.2f} px")

save_model("/tmp/demo.btrm", model)
again = load_model("/tmp/demo.btrm")
p = test_pairs[0]
same = np.array_equal(predict(again, p.image, p.p_guess, K, p.shapes).theta,
                      predict(model, p.image, p.p_guess, K, p.shapes).theta)
print("saved model predicts identically:", same)
