"""Joint 2D + 3D refinement of a noisy regressor output against the depth
cloud, then one identity update.

    python3 demos/04_refinement.py
"""
import numpy as np

from rgbdface.model import CameraIntrinsics, ShapeParams, landmark_positions_2d
from rgbdface.synth import SequenceSpec, gen_rig, render_sequence, sequence_identity
from rgbdface.tracking import TrackerState, refine, update_identity

rig, K = gen_rig(), CameraIntrinsics()
spec = SequenceSpec(frames=3, distance=1.5)
frames = list(render_sequence(rig, spec, K))
p, fr = frames[2]
w_true = sequence_identity(rig, spec)

state = TrackerState.initial(rig.core, rig.topology, w_true)
state.push(frames[0][0].theta)
state.push(frames[1][0].theta)

# stand-in for a regressor output: 2 cm too far, slightly rotated, landmarks off by 1 px
rng = np.random.default_rng(0)
th = p.theta + np.r_[0.02, -0.01, 0, 0, 0, 0.02, np.zeros(len(p.expr))]
raw = ShapeParams.from_theta(th, np.zeros((rig.topology.n_landmarks, 2)))
raw = raw.replace(displacements=landmark_positions_2d(state.blendshapes, raw, K)
                  - (fr.landmarks + rng.normal(0, 1.0, fr.landmarks.shape)))

for name, kw in (("2D only", {"rigid_omega": 0.0, "expr_omega": 0.0}), ("2D + 3D", {})):
    r = refine(raw, fr.frame, state, **kw)
    dz = (r.params.pose.translation[2] - p.pose.translation[2]) * 1000
    print(f"{name}: depth error {dz:+.1f} mm, E3D {r.e3d * 1e6:.2f} mm^2, "
          f"{len(r.correspondences)} correspondences, total {r.total_raw:.3g} -> {r.total:.3g}")

# identity adaptation starts from the mean identity and moves toward the subject
state = TrackerState.initial(rig.core, rig.topology)
r = refine(raw, fr.frame, state)
before = np.linalg.norm(state.w_id - w_true)
update_identity(state, fr.frame, r.params, r.landmarks)
print(f"identity distance to truth {before:.3f} -> {np.linalg.norm(state.w_id - w_true):.3f}")
