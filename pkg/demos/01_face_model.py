"""Bilinear face model: contract the core tensor, blend expressions, pose and project.

    python3 demos/01_face_model.py
"""
import numpy as np

from rgbdface.model import (CameraIntrinsics, ShapeParams, blend, build_blendshapes,
                            landmark_positions_2d, transform)
from rgbdface.synth import gen_rig

rig = gen_rig()
core = rig.core
print(f"core tensor: {core.n_id} identity x {core.n_exp} expression knobs, "
      f"{core.data.shape[0] // 3} vertices")

# a subject is one identity vector; its blendshapes are the tensor contracted on it
rng = np.random.default_rng(0)
w_id = rig.random_identity(rng)
B = build_blendshapes(core, w_id, rig.topology)
print("blendshapes:", B.shapes.shape)

# expression weights live in [0, 1]; e = 0 is the neutral face
e = np.zeros(core.n_exp - 1)
e[2] = 0.8
S = blend(B, e)
moved = np.linalg.norm(S - B.shapes[0], axis=1)
print(f"expression 3 at 0.8 moves {np.count_nonzero(moved > 1e-6)} vertices, "
      f"up to {moved.max() * 1000:.1f} mm")

# pose it 1.5 m in front of the camera and project the landmarks
K = CameraIntrinsics()
theta = np.r_[0.1, -0.2, 0.0, 0.02, -0.01, 1.5, e]
p = ShapeParams.from_theta(theta, np.zeros((rig.topology.n_landmarks, 2)))
cam = transform(S, p.pose)
print(f"posed depth range {cam[:, 2].min():.3f}..{cam[:, 2].max():.3f} m")
print("first landmarks (px):\n", np.round(landmark_positions_2d(B, p, K)[:4], 1))
