"""Procedural face rig, RGBD rendering with distance-dependent sensor noise,
and the tracking / depth evaluation metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import ObservedFrame
from .model import (BlendshapeSet, CameraIntrinsics, MeshTopology, ReducedCoreTensor,
                    RigidPose, ShapeParams, build_blendshapes, project, rotvec_from_matrix,
                    vertex_normals, _blend_unchecked)
from .raster import rasterize

# ---------------------------------------------------------------------------
# Rig
# ---------------------------------------------------------------------------

# (name, x, y) of the desk-scale landmark set on the neutral mean face, meters
LANDMARKS_16 = [
    ("eye_outer_r", -0.045, -0.025), ("eye_inner_r", -0.017, -0.025),
    ("eye_inner_l", 0.017, -0.025), ("eye_outer_l", 0.045, -0.025),
    ("brow_r", -0.033, -0.046), ("brow_l", 0.033, -0.046),
    ("nose_tip", 0.0, 0.016), ("nostril_r", -0.013, 0.028), ("nostril_l", 0.013, 0.028),
    ("mouth_r", -0.026, 0.052), ("mouth_l", 0.026, 0.052),
    ("lip_upper", 0.0, 0.044), ("lip_lower", 0.0, 0.061),
    ("chin", 0.0, 0.092), ("jaw_r", -0.058, 0.062), ("jaw_l", 0.058, 0.062),
]


def _smoothstep(x):
    return 1.0 / (1.0 + np.exp(-x))


def _gauss(x, y, cx, cy, sx, sy=None):
    sy = sx if sy is None else sy
    return np.exp(-0.5 * (((x - cx) / sx) ** 2 + ((y - cy) / sy) ** 2))


def _expression_fields(xy):
    """Localized displacement fields (N_v, 3) for the named expressions."""
    x, y = xy[:, 0], xy[:, 1]
    sx = np.sign(x)
    z0 = np.zeros_like(x)
    out = []

    g = _gauss(x, y, 0.0, 0.085, 0.04) * _smoothstep((y - 0.05) / 0.006)
    out.append(np.stack([z0, 0.013 * g, 0.004 * g], 1))                 # jaw open
    for side in (-1, 1):                                                # smile r / l
        g = _gauss(x, y, side * 0.027, 0.052, 0.013)
        out.append(np.stack([side * 0.006 * g, -0.005 * g, 0.002 * g], 1))
    for side in (-1, 1):                                                # brow raise
        g = _gauss(x, y, side * 0.033, -0.047, 0.016, 0.012)
        out.append(np.stack([z0, -0.008 * g, z0], 1))
    g = _gauss(x, y, 0.0, -0.04, 0.018, 0.012)                          # brow furrow
    out.append(np.stack([-sx * 0.004 * g, 0.003 * g, -0.001 * g], 1))
    g = _gauss(x, y, 0.0, 0.052, 0.016, 0.012)                          # lip pucker
    out.append(np.stack([-x * 0.2 * g, z0, -0.008 * g], 1))
    g = _gauss(x, y, -0.045, 0.03, 0.018) + _gauss(x, y, 0.045, 0.03, 0.018)
    out.append(np.stack([sx * 0.004 * g, z0, -0.006 * g], 1))          # cheek puff
    for side in (-1, 1):                                                # eye close
        g = _gauss(x, y, side * 0.031, -0.031, 0.012, 0.007)
        out.append(np.stack([z0, 0.005 * g, z0], 1))
    g = _gauss(x, y, 0.0, 0.052, 0.022, 0.012)                          # mouth stretch
    out.append(np.stack([sx * 0.006 * g * np.minimum(np.abs(x) / 0.02, 1.0), 0.002 * g, z0], 1))
    return out


def _grid(n_vertices: int, aspect: float = 1.05):
    cols = max(2, int(round(np.sqrt(n_vertices / aspect))))
    rows = n_vertices // cols
    if rows < 2:
        raise ValueError("need at least 4 vertices")
    rem = n_vertices - rows * cols
    idx = np.arange(n_vertices)
    r, c = idx // cols, idx % cols
    total_rows = rows + (1 if rem else 0)
    t = -1.0 + 2.0 * r / (total_rows - 1)
    s = -1.0 + 2.0 * c / (cols - 1)
    tris = []

    def vid(rr, cc):
        i = rr * cols + cc
        return i if (cc < cols and i < n_vertices) else None

    for rr in range(total_rows - 1):
        for cc in range(cols - 1):
            a, b = vid(rr, cc), vid(rr, cc + 1)
            d, e = vid(rr + 1, cc), vid(rr + 1, cc + 1)
            # counter-clockwise seen from the camera (-z side); see raster culling
            for tri in ((a, d, b), (b, d, e)):
                if None not in tri:
                    tris.append(tri)
    return s, t, np.array(tris, dtype=np.int64)


def _base_face(s, t):
    phi = s * 1.25
    width = 0.078 * (1.0 - 0.16 * t ** 2 - 0.14 * np.maximum(t, 0.0) ** 2)
    x = width * np.sin(phi)
    y = 0.112 * t
    z = -0.09 * np.cos(phi) * (1.0 - 0.22 * t ** 2)
    nose = 0.021 * np.exp(-0.5 * (x / 0.011) ** 2) * _gauss(0 * x, y, 0.0, 0.012, 1.0, 0.026)
    eyes = 0.008 * (_gauss(x, y, -0.031, -0.025, 0.012) + _gauss(x, y, 0.031, -0.025, 0.012))
    brow = 0.006 * _gauss(x, y, 0.0, -0.043, 0.05, 0.008)
    mouth = 0.005 * _gauss(x, y, 0.0, 0.052, 0.02, 0.012)
    chin = 0.008 * _gauss(x, y, 0.0, 0.088, 0.016, 0.012)
    z = z - nose + eyes - brow - mouth - chin
    return np.stack([x, y, z], axis=1)


def _albedo(xy, rng):
    x, y = xy[:, 0], xy[:, 1]
    skin = np.array([0.86, 0.66, 0.56])
    # low-frequency mottling so pixel-difference probes see structure everywhere
    tex = np.zeros(len(x))
    for _ in range(8):
        c = rng.uniform([-0.08, -0.1], [0.08, 0.11])
        tex += rng.normal(0, 0.05) * _gauss(x, y, c[0], c[1], rng.uniform(0.008, 0.02))
    col = skin[None, :] * (1.0 + tex[:, None])

    def paint(weight, rgb):
        nonlocal col
        w = np.clip(weight, 0, 1)[:, None]
        col = col * (1 - w) + np.asarray(rgb)[None, :] * w

    for side in (-1, 1):
        paint(1.6 * _gauss(x, y, side * 0.031, -0.025, 0.011, 0.006), [0.18, 0.16, 0.2])
        paint(1.4 * _gauss(x, y, side * 0.033, -0.046, 0.016, 0.004), [0.25, 0.17, 0.12])
        paint(1.2 * _gauss(x, y, side * 0.011, 0.028, 0.005, 0.004), [0.35, 0.22, 0.2])
    paint(1.3 * _gauss(x, y, 0.0, 0.052, 0.024, 0.007), [0.72, 0.32, 0.32])
    paint(0.5 * _gauss(x, y, 0.0, 0.09, 0.02, 0.01), [0.75, 0.55, 0.48])
    return np.clip(col, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class SyntheticRig:
    core: ReducedCoreTensor
    topology: MeshTopology
    meshes: np.ndarray              # (N_id, N_e, N_v, 3), meshes[i, j] = C_r[:, i, j]
    albedo: np.ndarray              # (N_v, 3) in [0, 1]
    uv: np.ndarray                  # (N_v, 2) surface parameters in [-1, 1]
    landmark_names: tuple = ()

    def blendshapes(self, w_id) -> BlendshapeSet:
        return build_blendshapes(self.core, w_id, self.topology)

    def random_identity(self, rng, scale: float = 1.0) -> np.ndarray:
        """Mean identity plus Gaussian coefficients on the deviation modes."""
        w = np.zeros(self.core.n_id)
        w[0] = 1.0
        w[1:] = rng.normal(0.0, scale, self.core.n_id - 1)
        return w


def gen_rig(n_vertices: int = 600, n_id: int = 8, n_exp: int = 12, n_landmarks: int = 16,
            seed: int = 0, id_rms: float = 0.004) -> SyntheticRig:
    """Procedural face rig.

    Identity mode 0 is the mean face; modes 1.. are smooth displacement
    fields of RMS ``id_rms`` meters, orthogonal to each other and to
    rigid/scale motion of the mean face. Expression modes are localized
    displacement fields. The core tensor is assembled from the stored
    meshes, so one-hot contraction returns them exactly.
    """
    if n_id < 1 or n_exp < 1:
        raise ValueError("need at least one identity and one expression mode")
    rng = np.random.default_rng(seed)
    s, t, tris = _grid(n_vertices)
    base = _base_face(s, t)
    xy = base[:, :2]

    fields = _expression_fields(xy)
    while len(fields) < n_exp - 1:
        c = rng.uniform([-0.06, -0.07], [0.06, 0.09])
        d = rng.normal(0.0, 0.004, 3)
        g = _gauss(xy[:, 0], xy[:, 1], c[0], c[1], rng.uniform(0.01, 0.025))
        fields.append(g[:, None] * d[None, :])
    exp_fields = np.stack(fields[:n_exp - 1]) if n_exp > 1 else np.zeros((0, n_vertices, 3))

    # constraint directions: translations, infinitesimal rotations, scale
    cons = [np.tile(np.eye(3)[k], (n_vertices, 1)).ravel() for k in range(3)]
    cons += [np.cross(np.eye(3)[k], base).ravel() for k in range(3)]
    cons.append(base.ravel())
    basis = list(np.linalg.qr(np.stack(cons, 1))[0].T)
    id_fields = []
    for _ in range(n_id - 1):
        f = np.zeros((n_vertices, 3))
        for _ in range(6):
            c = rng.uniform(-0.9, 0.9, 2)
            sig = rng.uniform(0.3, 0.6)
            g = np.exp(-0.5 * ((s - c[0]) ** 2 + (t - c[1]) ** 2) / sig ** 2)
            f += g[:, None] * rng.normal(0.0, 1.0, 3)[None, :]
        f = f.ravel()
        for b in basis:
            f -= (f @ b) * b
        f /= np.linalg.norm(f)
        basis.append(f)
        id_fields.append(f.reshape(n_vertices, 3) * id_rms * np.sqrt(n_vertices))

    kappa = rng.normal(0.0, 0.1, (n_id, n_exp))
    meshes = np.zeros((n_id, n_exp, n_vertices, 3))
    meshes[0, 0] = base
    for j in range(1, n_exp):
        meshes[0, j] = base + exp_fields[j - 1]
    for i in range(1, n_id):
        meshes[i, 0] = id_fields[i - 1]
        for j in range(1, n_exp):
            meshes[i, j] = id_fields[i - 1] + kappa[i, j] * exp_fields[j - 1]

    data = meshes.transpose(2, 3, 0, 1).reshape(3 * n_vertices, n_id, n_exp)
    mean = np.zeros(n_id)
    mean[0] = 1.0
    core = ReducedCoreTensor(data, np.eye(n_exp), mean)

    landmarks, names = _pick_landmarks(base, n_landmarks)
    topology = MeshTopology(tris, landmarks, n_vertices)
    meshes.setflags(write=False)
    albedo = _albedo(xy, rng)
    albedo.setflags(write=False)
    return SyntheticRig(core, topology, meshes, albedo, np.stack([s, t], 1), tuple(names))


def _pick_landmarks(base, n_landmarks):
    xy = base[:, :2]
    front = np.nonzero(base[:, 2] < -0.03)[0]
    chosen, names = [], []
    for name, x, y in LANDMARKS_16[:n_landmarks]:
        d = np.hypot(xy[front, 0] - x, xy[front, 1] - y)
        d[np.isin(front, chosen)] = np.inf
        chosen.append(int(front[np.argmin(d)]))
        names.append(name)
    # extra landmarks by farthest-point sampling over the frontal region
    while len(chosen) < n_landmarks:
        d = np.min(np.linalg.norm(base[front][:, None, :] - base[chosen][None], axis=2), axis=1)
        chosen.append(int(front[np.argmax(d)]))
        names.append(f"aux_{len(chosen) - 1}")
    return np.array(chosen), names


# ---------------------------------------------------------------------------
# Noise and rendering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseModel:
    """Axial sigma(z) = axial_coeff * z^2 and quantization step
    quant_coeff * z^2, both in mm for z in meters."""
    axial_coeff: float = 1.425
    quant_coeff: float = 1.0
    lateral_sigma: float = 0.3          # pixels
    dropout_max: float = 0.6            # probability at 90 degrees incidence
    dropout_start_deg: float = 70.0

    def sigma(self, z):
        """Axial standard deviation in meters."""
        return self.axial_coeff * 1e-3 * np.asarray(z, dtype=np.float64) ** 2

    def quant_step(self, z):
        return self.quant_coeff * 1e-3 * np.asarray(z, dtype=np.float64) ** 2


@dataclass(frozen=True)
class Lighting:
    to_light: tuple = (-0.3, -0.4, -1.0)
    ambient: float = 0.35
    diffuse: float = 0.65


def apply_depth_noise(depth, noise: NoiseModel, rng, normals=None, K: CameraIntrinsics | None = None):
    """Lateral jitter, axial Gaussian, quantization, grazing-angle dropout."""
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    z = depth.copy()
    if noise.lateral_sigma > 0:
        dv = np.rint(rng.normal(0.0, noise.lateral_sigma, (H, W))).astype(np.int64)
        du = np.rint(rng.normal(0.0, noise.lateral_sigma, (H, W))).astype(np.int64)
        rr = np.clip(np.arange(H)[:, None] + dv, 0, H - 1)
        cc = np.clip(np.arange(W)[None, :] + du, 0, W - 1)
        z = depth[rr, cc]
    valid = z > 0
    z = z + rng.standard_normal((H, W)) * noise.sigma(z)
    q = noise.quant_step(z)
    if noise.quant_coeff > 0:
        z = np.where(valid, np.rint(z / np.where(q > 0, q, 1.0)) * q, 0.0)
    drop_u = rng.random((H, W))
    if normals is not None and K is not None and noise.dropout_max > 0:
        v, u = np.mgrid[0:H, 0:W]
        ray = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones((H, W))], axis=2)
        ray /= np.linalg.norm(ray, axis=2, keepdims=True)
        cosang = np.abs(np.einsum("ijk,ijk->ij", ray, normals))
        ang = np.degrees(np.arccos(np.clip(cosang, 0.0, 1.0)))
        p = noise.dropout_max * np.clip((ang - noise.dropout_start_deg)
                                        / (90.0 - noise.dropout_start_deg), 0.0, 1.0)
        has_n = np.linalg.norm(normals, axis=2) > 0
        valid &= ~(has_n & (drop_u < p))
    return np.where(valid & (z > 0), z, 0.0)


@dataclass
class RenderedFrame:
    frame: ObservedFrame
    landmarks: np.ndarray           # (N_l, 2) ground-truth projections
    clean_depth: np.ndarray         # (H, W) meters
    face_mask: np.ndarray           # (H, W) bool
    vertices: np.ndarray            # (N_v, 3) camera-frame truth mesh


def detail_field(rig: SyntheticRig, amplitude: float, seed: int) -> np.ndarray:
    """Smooth per-vertex offset along the mean-face normal that no
    blendshape combination reproduces; RMS ``amplitude`` meters."""
    if amplitude <= 0:
        return np.zeros((rig.core.n_vertices, 3))
    rng = np.random.default_rng(seed)
    s, t = rig.uv[:, 0], rig.uv[:, 1]
    h = np.zeros(len(s))
    for _ in range(40):
        c = rng.uniform(-1, 1, 2)
        h += rng.normal() * np.exp(-0.5 * ((s - c[0]) ** 2 + (t - c[1]) ** 2) / 0.15 ** 2)
    h *= amplitude / np.sqrt(np.mean(h ** 2))
    n = vertex_normals(rig.meshes[0, 0], rig.topology.triangles)
    return h[:, None] * n


def render_rgbd(rig: SyntheticRig, w_id, params: ShapeParams, K: CameraIntrinsics,
                lighting: Lighting | None = None, noise: NoiseModel | None = None,
                rng=None, detail=None, background_depth: float | None = None) -> RenderedFrame:
    """Render color and depth of the rig subject ``w_id`` at ``params``.

    Color uses Gouraud-shaded Lambertian lighting on the per-vertex albedo.
    ``background_depth`` adds a fronto-parallel textured wall.
    """
    lighting = lighting or Lighting()
    shapes = rig.blendshapes(w_id)
    V = _blend_unchecked(shapes, params.expr)
    if detail is not None:
        V = V + detail
    S = V @ params.pose.matrix.T + params.pose.translation
    tri = rig.topology.triangles
    ras = rasterize(S, tri, K)
    H, W = K.size
    n = vertex_normals(S, tri)
    L = np.asarray(lighting.to_light, dtype=np.float64)
    L = L / np.linalg.norm(L)
    shade = lighting.ambient + lighting.diffuse * np.clip(n @ L, 0.0, None)
    color = ras.interpolate(rig.albedo * shade[:, None], tri)
    pix_normals = ras.interpolate(n, tri)
    depth = ras.depth.copy()
    mask = ras.mask
    if background_depth is not None:
        v, u = np.mgrid[0:H, 0:W]
        wall = 0.45 + 0.08 * np.sin(u / 11.0) * np.cos(v / 17.0) + 0.05 * np.sin((u + v) / 29.0)
        color[~mask] = wall[~mask, None] * np.array([0.9, 0.95, 1.0])
        depth[~mask] = background_depth
        pix_normals[~mask] = (0.0, 0.0, -1.0)
    rgb = np.clip(np.rint(color * 255.0), 0, 255).astype(np.uint8)
    clean = depth.copy()
    if noise is not None:
        rng = rng if rng is not None else np.random.default_rng(0)
        depth = apply_depth_noise(depth, noise, rng, pix_normals, K)
    lms = project(K, S[rig.topology.landmark_vertices])
    return RenderedFrame(ObservedFrame(rgb, depth, K), lms, clean, mask, S)


# ---------------------------------------------------------------------------
# Sequences
# ---------------------------------------------------------------------------

def euler_rotvec(yaw, pitch, roll) -> np.ndarray:
    """Rotation vector of Ry(yaw) Rx(pitch) Rz(roll)."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    Rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return rotvec_from_matrix(Ry @ Rx @ Rz)


@dataclass(frozen=True)
class SequenceSpec:
    frames: int = 100
    distance: float = 1.5
    noise: NoiseModel | None = field(default_factory=NoiseModel)
    seed: int = 0
    rig_seed: int = 0
    identity_scale: float = 1.0
    yaw_deg: float = 30.0
    pitch_deg: float = 15.0
    roll_deg: float = 5.0
    translation_amp: float = 0.02
    expression_amp: float = 0.8
    detail_rms: float = 0.0015
    background_offset: float | None = 0.8


def trajectory(spec: SequenceSpec, n_expr: int) -> list[ShapeParams]:
    """Smooth sinusoidal pose and expression curves, one ShapeParams per frame."""
    rng = np.random.default_rng([spec.seed, 1])
    f = np.arange(spec.frames, dtype=np.float64)
    ph = rng.uniform(0, 2 * np.pi, 6)
    per = rng.uniform(70, 130, 6)
    yaw = np.radians(spec.yaw_deg) * np.sin(2 * np.pi * f / per[0] + ph[0])
    pitch = np.radians(spec.pitch_deg) * np.sin(2 * np.pi * f / per[1] + ph[1])
    roll = np.radians(spec.roll_deg) * np.sin(2 * np.pi * f / per[2] + ph[2])
    tx = spec.translation_amp * np.sin(2 * np.pi * f / per[3] + ph[3])
    ty = spec.translation_amp * np.sin(2 * np.pi * f / per[4] + ph[4])
    tz = spec.distance + spec.translation_amp * np.sin(2 * np.pi * f / per[5] + ph[5])
    eph = rng.uniform(0, 2 * np.pi, n_expr)
    eper = rng.uniform(30, 80, n_expr)
    eamp = spec.expression_amp * rng.uniform(0.3, 1.0, n_expr) * (rng.random(n_expr) < 0.6)
    e = np.clip(eamp[None, :] * np.sin(2 * np.pi * f[:, None] / eper[None, :] + eph[None, :]),
                0.0, 1.0)
    return [ShapeParams(RigidPose(euler_rotvec(yaw[k], pitch[k], roll[k]),
                                  [tx[k], ty[k], tz[k]]), e[k], np.zeros((0, 2)))
            for k in range(spec.frames)]


def sequence_identity(rig: SyntheticRig, spec: SequenceSpec) -> np.ndarray:
    return rig.random_identity(np.random.default_rng([spec.seed, 2]), spec.identity_scale)


def render_sequence(rig: SyntheticRig, spec: SequenceSpec, K: CameraIntrinsics | None = None):
    """Yield (truth params, RenderedFrame) per frame; deterministic per seed."""
    K = K or CameraIntrinsics()
    w_id = sequence_identity(rig, spec)
    detail = detail_field(rig, spec.detail_rms, spec.seed)
    bg = None if spec.background_offset is None else spec.distance + spec.background_offset
    for k, p in enumerate(trajectory(spec, rig.core.n_exp - 1)):
        rng = np.random.default_rng([spec.seed, 3, k])
        yield p, render_rgbd(rig, w_id, p, K, noise=spec.noise, rng=rng, detail=detail,
                             background_depth=bg)


@dataclass
class AnnotatedImage:
    image: np.ndarray
    landmarks: np.ndarray
    subject_id: str
    params: ShapeParams             # truth with D = 0
    w_id: np.ndarray


def annotated_images(rig: SyntheticRig, n_subjects: int, per_subject: int,
                     K: CameraIntrinsics | None = None, seed: int = 0,
                     z_range=(1.2, 2.2), yaw_deg=35.0, pitch_deg=20.0, roll_deg=10.0,
                     identity_scale: float = 1.0) -> list:
    """Color images of random subjects in random poses and expressions with
    their exact landmark projections; stands in for a labeled face corpus."""
    K = K or CameraIntrinsics()
    rng = np.random.default_rng([seed, 7])
    n_e = rig.core.n_exp - 1
    n_l = rig.topology.n_landmarks
    out = []
    for s in range(n_subjects):
        w_id = rig.random_identity(rng, identity_scale)
        for _ in range(per_subject):
            z = rng.uniform(*z_range)
            ang = np.radians([yaw_deg, pitch_deg, roll_deg]) * rng.uniform(-1, 1, 3)
            half_w = 0.25 * z * K.width / K.fx
            half_h = 0.25 * z * K.height / K.fy
            T = np.array([rng.uniform(-half_w, half_w), rng.uniform(-half_h, half_h), z])
            e = rng.uniform(0, 1, n_e) * (rng.random(n_e) < 0.4)
            p = ShapeParams(RigidPose(euler_rotvec(*ang), T), e, np.zeros((n_l, 2)))
            lighting = Lighting(to_light=(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.2), -1.0))
            fr = render_rgbd(rig, w_id, p, K, lighting=lighting, background_depth=z + 0.8)
            out.append(AnnotatedImage(fr.frame.color, fr.landmarks, f"subject{s:03d}", p, w_id))
    return out


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def frame_rmse(pred, truth) -> np.ndarray:
    """Per-frame landmark RMSE in pixels for (F, N_l, 2) or (N_l, 2) inputs."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth shapes differ")
    if pred.ndim == 2:
        pred, truth = pred[None], truth[None]
    return np.sqrt(np.mean(np.sum((pred - truth) ** 2, axis=2), axis=1))


def eval_rmse(pred, truth) -> float:
    """Landmark RMSE per frame, averaged over frames."""
    return float(np.mean(frame_rmse(pred, truth)))


def eval_lost_fraction(rmse, empty=None, tau: float = 10.0) -> float:
    rmse = np.asarray(rmse, dtype=np.float64)
    empty = np.zeros(len(rmse), dtype=bool) if empty is None else np.asarray(empty, dtype=bool)
    if len(rmse) == 0:
        return 0.0
    lost = empty | ~(rmse <= tau)
    return float(np.mean(lost))


def eval_mae(depth, truth, mask=None) -> float:
    """Mean absolute depth error in millimeters over ``mask``."""
    depth = np.asarray(depth, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    mask = np.ones(depth.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    return float(np.mean(np.abs(depth[mask] - truth[mask])) * 1000.0)
