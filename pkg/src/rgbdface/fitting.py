"""Ground-truth parameter recovery from 2D-landmark-annotated images and
guess-truth pair generation for regressor training.

Three fits are provided, all damped Gauss-Newton on 2D reprojection error:
``fit_sample`` (pose, identity and expression of one image),
``joint_identity_refinement`` (one identity shared by a subject's images)
and ``fit_expression_displacement`` (pose and bounded expression weights on
fixed blendshapes, leaving the residual displacements D).

The identity vector is kept on the affine plane through the tensor's mean
identity orthogonal to it; scaling identity and depth together is
invisible in 2D, and this pins that gauge.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import (BlendshapeSet, CameraIntrinsics, MeshTopology, ReducedCoreTensor,
                    RigidPose, ShapeParams, project, projection_jacobian, rotated_point_jacobian,
                    rotation_matrix)
from .optim import levenberg_marquardt

_BAD = 1e6      # residual used when a trial point lands behind the camera


@dataclass
class TrainingSample:
    image: np.ndarray | None
    landmarks: np.ndarray
    subject_id: str = ""

    def __post_init__(self):
        self.landmarks = np.asarray(self.landmarks, dtype=np.float64).reshape(-1, 2)

    def out_of_bounds(self, K: CameraIntrinsics) -> np.ndarray:
        u, v = self.landmarks[:, 0], self.landmarks[:, 1]
        return (u < 0) | (v < 0) | (u > K.width - 1) | (v > K.height - 1)


@dataclass
class GuessTruthPair:
    image: np.ndarray
    p_guess: ShapeParams
    p_truth: ShapeParams
    shapes: BlendshapeSet | None = None


@dataclass(frozen=True)
class PerturbConfig:
    sigma_rot: float = 0.05
    sigma_trans: tuple = (0.01, 0.01, 0.05)
    sigma_expr: float = 0.1
    sigma_disp: float = 2.0
    pairs_per_sample: int = 8
    seed: int = 0

    def __post_init__(self):
        if min(self.sigma_rot, self.sigma_expr, self.sigma_disp, *self.sigma_trans) < 0:
            raise ValueError("perturbation sigmas must be non-negative")
        if self.pairs_per_sample < 1:
            raise ValueError("pairs_per_sample must be >= 1")


@dataclass
class SampleFit:
    pose: RigidPose
    w_id: np.ndarray
    e: np.ndarray                   # expression coordinates, w_exp = gamma(e)
    w_exp: np.ndarray
    cost: float
    rmse: float
    converged: bool
    iterations: int
    rank_deficient: bool = False
    first_step: float = 0.0


@dataclass
class JointFit:
    w_id: np.ndarray
    fits: list
    objective: list = field(default_factory=list)


@dataclass
class ExpressionFit:
    params: ShapeParams
    rmse: float
    converged: bool
    iterations: int
    rank_deficient: bool = False


# ---------------------------------------------------------------------------
# residual helpers
# ---------------------------------------------------------------------------

def _reprojection(K, rotvec, T, V, dV, landmarks):
    """Residual project(R V + T) - l, flattened, with Jacobian columns for
    (rotvec, T) followed by the shape columns ``dV`` (N, 3, m)."""
    R = rotation_matrix(rotvec)
    RV = V @ R.T
    P = RV + T
    n = len(V)
    m = 0 if dV is None else dV.shape[2]
    if np.any(P[:, 2] <= 1e-6):
        return np.full(2 * n, _BAD), np.zeros((2 * n, 6 + m))
    r = (project(K, P) - landmarks).ravel()
    Jp = projection_jacobian(K, P)
    blocks = [Jp @ rotated_point_jacobian(rotvec, RV), Jp]
    if m:
        blocks.append(Jp @ np.einsum("ab,nbm->nam", R, dV))
    return r, np.concatenate(blocks, axis=2).reshape(2 * n, 6 + m)


def _complement(w0):
    """Orthonormal basis (N_id, N_id - 1) of the complement of w0."""
    w0 = np.asarray(w0, dtype=np.float64)
    Q, _ = np.linalg.qr(np.column_stack([w0, np.eye(len(w0))]))
    return Q[:, 1:len(w0)]


def _degenerate(landmarks) -> bool:
    c = landmarks - landmarks.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    return bool(s[-1] <= 1e-6 * max(s[0], 1e-300))


def _rank_deficient(J) -> bool:
    if J is None or J.size == 0:
        return False
    s = np.linalg.svd(J, compute_uv=False)
    return bool(s[-1] <= 1e-10 * max(s[0], 1e-300))


def initial_pose(K: CameraIntrinsics, model_landmarks, landmarks) -> RigidPose:
    """Frontal pose whose projected landmark spread matches the observation."""
    V = np.asarray(model_landmarks, dtype=np.float64)
    l = np.asarray(landmarks, dtype=np.float64)
    spread3 = np.sqrt(np.mean(np.sum((V[:, :2] - V[:, :2].mean(0)) ** 2, axis=1)))
    spread2 = np.sqrt(np.mean(np.sum((l - l.mean(0)) ** 2, axis=1)))
    f = 0.5 * (K.fx + K.fy)
    z = f * spread3 / max(spread2, 1e-9)
    cu, cv = l.mean(0)
    vc = V.mean(0)
    T = np.array([(cu - K.cx) * z / K.fx - vc[0], (cv - K.cy) * z / K.fy - vc[1], z - vc[2]])
    return RigidPose(np.zeros(3), T)


def _check_landmarks(sample, topology):
    if len(sample.landmarks) != topology.n_landmarks:
        raise ValueError(f"sample has {len(sample.landmarks)} landmarks, topology {topology.n_landmarks}")
    if topology.n_landmarks < 6:
        raise ValueError("at least 6 landmarks are needed")


# ---------------------------------------------------------------------------
# Single-sample fit
# ---------------------------------------------------------------------------

def fit_sample(sample: TrainingSample, tensor: ReducedCoreTensor, K: CameraIntrinsics,
               topology: MeshTopology, init: ShapeParams | None = None, init_id=None,
               max_iter: int = 200) -> SampleFit:
    """min over (R, T, w_id, w_exp) of sum_i ||project(R V_i + T) - l_i||^2."""
    _check_landmarks(sample, topology)
    C = tensor.vertex_rows(topology.landmark_vertices)          # (N_l, 3, N_id, N_e)
    u = tensor.exp_basis
    dexp = (u[1:] - u[0]).T                                     # (N_e, N_e - 1)
    w0 = tensor.id_mean if init_id is None else np.asarray(init_id, dtype=np.float64)
    N = _complement(w0)
    n_id = N.shape[1]
    l = sample.landmarks

    def unpack(x):
        w_id = w0 + N @ x[6:6 + n_id]
        e = x[6 + n_id:]
        return w_id, e, u[0] + e @ (u[1:] - u[0])

    def fun(x):
        w_id, e, w_exp = unpack(x)
        A = C @ w_exp                                           # (N_l, 3, N_id)
        Bm = np.einsum("vcij,i->vcj", C, w_id)                  # (N_l, 3, N_e)
        V = A @ w_id
        dV = np.concatenate([A @ N, Bm @ dexp], axis=2)
        return _reprojection(K, x[:3], x[3:6], V, dV, l)

    if init is None:
        V0 = (C @ u[0]) @ w0
        pose0, e0 = initial_pose(K, V0, l), np.zeros(tensor.n_exp - 1)
    else:
        pose0, e0 = init.pose, init.expr
    x0 = np.concatenate([pose0.rotation, pose0.translation, np.zeros(n_id), e0])
    res = levenberg_marquardt(fun, x0, max_iter=max_iter)
    w_id, e, w_exp = unpack(res.x)
    nres = max(len(l), 1)
    return SampleFit(RigidPose(res.x[:3], res.x[3:6]), w_id, e, w_exp, res.cost,
                     float(np.sqrt(res.cost / nres)), res.converged, res.iterations,
                     _degenerate(l) or _rank_deficient(res.jacobian), res.first_step)


def _refit_pose_expression(sample, C, tensor, K, w_id, fit: SampleFit, max_iter=200) -> SampleFit:
    u = tensor.exp_basis
    Bm = np.einsum("vcij,i->vcj", C, w_id) @ u.T                # rows: C x_2 w_id x_3 u_j
    l = sample.landmarks

    def fun(x):
        e = x[6:]
        V = Bm[:, :, 0] + np.einsum("vcj,j->vc", Bm[:, :, 1:] - Bm[:, :, :1], e)
        return _reprojection(K, x[:3], x[3:6], V, Bm[:, :, 1:] - Bm[:, :, :1], l)

    x0 = np.concatenate([fit.pose.rotation, fit.pose.translation, fit.e])
    res = levenberg_marquardt(fun, x0, max_iter=max_iter)
    e = res.x[6:]
    return SampleFit(RigidPose(res.x[:3], res.x[3:6]), np.array(w_id), e, u[0] + e @ (u[1:] - u[0]),
                     res.cost, float(np.sqrt(res.cost / len(l))), res.converged, res.iterations,
                     _degenerate(l) or _rank_deficient(res.jacobian), res.first_step)


def _objective(samples, C, K, w_id, fits) -> float:
    total = 0.0
    for s, f in zip(samples, fits):
        V = (C @ f.w_exp) @ w_id
        r, _ = _reprojection(K, f.pose.rotation, f.pose.translation, V, None, s.landmarks)
        total += float(r @ r)
    return total


def joint_identity_refinement(samples: list, tensor: ReducedCoreTensor, K: CameraIntrinsics,
                              topology: MeshTopology, iterations: int = 3,
                              max_iter: int = 200) -> JointFit:
    """Alternate a shared-identity solve over all samples of one subject with
    per-sample (R, T, w_exp) refits. The objective history starts at the
    shared initialization and has one entry per outer iteration."""
    if not samples:
        raise ValueError("need at least one sample")
    subjects = {s.subject_id for s in samples}
    if len(subjects) > 1:
        raise ValueError("samples must belong to one subject")
    C = tensor.vertex_rows(topology.landmark_vertices)
    fits = [fit_sample(s, tensor, K, topology, max_iter=max_iter) for s in samples]
    w0 = tensor.id_mean
    N = _complement(w0)
    w_id = np.mean([f.w_id for f in fits], axis=0)
    fits = [_refit_pose_expression(s, C, tensor, K, w_id, f, max_iter) for s, f in zip(samples, fits)]
    history = [_objective(samples, C, K, w_id, fits)]

    for _ in range(iterations):
        y0 = N.T @ (w_id - w0)

        def fun(y, fits=fits):
            w = w0 + N @ y
            rs, Js = [], []
            for s, f in zip(samples, fits):
                A = C @ f.w_exp
                r, J = _reprojection(K, f.pose.rotation, f.pose.translation, A @ w, A @ N, s.landmarks)
                rs.append(r)
                Js.append(J[:, 6:])
            return np.concatenate(rs), np.vstack(Js)

        res = levenberg_marquardt(fun, y0, max_iter=max_iter)
        w_id = w0 + N @ res.x
        fits = [_refit_pose_expression(s, C, tensor, K, w_id, f, max_iter)
                for s, f in zip(samples, fits)]
        history.append(_objective(samples, C, K, w_id, fits))
    return JointFit(w_id, fits, history)


# ---------------------------------------------------------------------------
# Expression weights and displacements on fixed blendshapes
# ---------------------------------------------------------------------------

def fit_expression_displacement(sample: TrainingSample, shapes: BlendshapeSet, K: CameraIntrinsics,
                                init: ShapeParams | None = None, topology: MeshTopology | None = None,
                                max_iter: int = 200) -> ExpressionFit:
    """min over (R, T, e in [0,1]) of sum_i ||D_i||^2 with D_i = project(S_i) - l_i."""
    topology = topology or shapes.topology
    _check_landmarks(sample, topology)
    lv = topology.landmark_vertices
    B0 = shapes.shapes[0][lv]
    dB = np.transpose(shapes.deltas[:, lv, :], (1, 2, 0))       # (N_l, 3, N_e - 1)
    l = sample.landmarks

    def fun(x):
        V = B0 + dB @ x[6:]
        return _reprojection(K, x[:3], x[3:6], V, dB, l)

    if init is None:
        pose0, e0 = initial_pose(K, B0, l), np.zeros(shapes.n_exp - 1)
    else:
        pose0, e0 = init.pose, init.expr
    x0 = np.concatenate([pose0.rotation, pose0.translation, np.asarray(e0, dtype=np.float64)])
    n = len(x0)
    lo = np.r_[np.full(6, -np.inf), np.zeros(n - 6)]
    hi = np.r_[np.full(6, np.inf), np.ones(n - 6)]
    res = levenberg_marquardt(fun, x0, lower=lo, upper=hi, max_iter=max_iter)
    x = res.x
    V = B0 + dB @ x[6:]
    S = V @ rotation_matrix(x[:3]).T + x[3:6]
    D = project(K, S) - l
    params = ShapeParams(RigidPose(x[:3], x[3:6]), np.clip(x[6:], 0.0, 1.0), D)
    return ExpressionFit(params, float(np.sqrt(res.cost / len(l))), res.converged, res.iterations,
                         _degenerate(l) or _rank_deficient(res.jacobian))


# ---------------------------------------------------------------------------
# Guess-truth pairs
# ---------------------------------------------------------------------------

def make_training_pairs(truths, cfg: PerturbConfig = PerturbConfig()) -> list:
    """Perturb each truth ``(image, ShapeParams[, shapes])`` into
    ``cfg.pairs_per_sample`` guesses; deterministic given ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    sig_t = np.broadcast_to(np.asarray(cfg.sigma_trans, dtype=np.float64), (3,))
    pairs = []
    for item in truths:
        image, truth = item[0], item[1]
        shapes = item[2] if len(item) > 2 else None
        for _ in range(cfg.pairs_per_sample):
            rot = truth.pose.rotation + rng.normal(0.0, 1.0, 3) * cfg.sigma_rot
            trans = truth.pose.translation + rng.normal(0.0, 1.0, 3) * sig_t
            e = np.clip(truth.expr + rng.normal(0.0, 1.0, truth.expr.shape) * cfg.sigma_expr, 0.0, 1.0)
            d = truth.displacements + rng.normal(0.0, 1.0, truth.displacements.shape) * cfg.sigma_disp
            pairs.append(GuessTruthPair(image, ShapeParams(RigidPose(rot, trans), e, d), truth, shapes))
    return pairs


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def write_manifest(path, entries) -> None:
    """``entries``: iterable of (image_path, subject_id, landmarks (N_l, 2))."""
    lines = []
    for img, subject, lms in entries:
        vals = " ".join(repr(float(v)) for v in np.asarray(lms, dtype=np.float64).ravel())
        lines.append(f"{img} {subject} {vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list:
    out = []
    base = Path(path).parent
    for ln in Path(path).read_text().splitlines():
        parts = ln.split()
        if not parts or parts[0].startswith("#"):
            continue
        img = Path(parts[0])
        if not img.is_absolute():
            img = base / img
        out.append((img, parts[1], np.array([float(v) for v in parts[2:]]).reshape(-1, 2)))
    return out


_PAIR_MAGIC = b"BTGP"


def _pack_params(p: ShapeParams) -> bytes:
    vec = p.to_vector()
    return struct.pack("<2I", len(p.expr), len(p.displacements)) + vec.astype("<f8").tobytes()


def _unpack_params(raw, off):
    ne, nl = struct.unpack_from("<2I", raw, off)
    off += 8
    n = 6 + ne + 2 * nl
    vec = np.frombuffer(raw, "<f8", n, off)
    return ShapeParams.from_vector(vec, ne, clamp=False), off + 8 * n


def save_pairs(path, records) -> None:
    """``records``: iterable of (image_path, p_guess, p_truth)."""
    records = list(records)
    buf = [_PAIR_MAGIC, struct.pack("<2I", 1, len(records))]
    for img, pg, pt in records:
        name = str(img).encode("utf-8")
        buf += [struct.pack("<I", len(name)), name, _pack_params(pg), _pack_params(pt)]
    Path(path).write_bytes(b"".join(buf))


def load_pairs(path) -> list:
    raw = Path(path).read_bytes()
    if raw[:4] != _PAIR_MAGIC:
        raise ValueError(f"{path}: not a pair store")
    _, n = struct.unpack_from("<2I", raw, 4)
    off, out = 12, []
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + ln].decode("utf-8")
        off += ln
        pg, off = _unpack_params(raw, off)
        pt, off = _unpack_params(raw, off)
        out.append((name, pg, pt))
    return out
