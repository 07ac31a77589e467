"""Joint 2D + 3D refinement of the regressed parameters against the observed
point cloud, and on-line adaptation of the subject's identity vector.

Refinement alternates a rigid block (R, T) and an expression block e. Each
block minimizes

    E_2D + w3 * E_3D + E_reg

where E_2D is the mean squared pixel distance to the landmarks frozen from
the regressor output, E_3D the mean squared point-to-plane distance to ICP
correspondences and E_reg a fidelity term towards the regressor output plus
a second-difference smoothness term over the last two frames.

Inside the solver 3D lengths are measured in millimeters (``unit_scale``)
so that squared pixel and squared depth errors have comparable magnitude.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import ObservedFrame, PointCloud
from .model import (BlendshapeSet, CameraIntrinsics, MeshTopology, ReducedCoreTensor,
                    ShapeParams, build_blendshapes, landmark_positions_2d, project,
                    projection_jacobian, rotated_point_jacobian, rotation_matrix,
                    vertex_normals, _blend_unchecked)
from .optim import levenberg_marquardt
from .raster import rasterize


@dataclass(frozen=True)
class RefinementConfig:
    rigid_omega: float = 2.0
    alpha_R: float = 100.0
    beta_R: float = 1e4
    alpha_T: float = 0.1
    beta_T: float = 10.0
    expr_omega: float = 0.5
    alpha_e: float = 0.0
    beta_e: float = 0.0
    identity_omega: float = 0.5
    alternations: int = 3
    rel_tol: float = 1e-5
    inner_iterations: int = 20
    icp_iterations: int = 10            # correspondence updates per rigid block
    icp_tol: float = 1e-5               # rad / m pose change that ends the loop
    max_correspondences: int = 1000
    max_distance: float = 0.05          # meters
    max_angle_deg: float = 60.0
    occlusion_tol: float = 0.005        # meters behind the model's own z-buffer
    max_view_angle_deg: float = 70.0    # model normal vs line of sight
    unit_scale: float = 1000.0          # solver length unit per meter
    reg_translation_scale: float = 1.0  # translation unit per meter inside E_reg
    identity_tol: float = 1e-3
    identity_max_frames: int = 10
    identity_ridge: float = 0.0
    identity_step: float = 0.5          # initial bracket half-width per coordinate
    identity_xtol: float = 1e-4

    def __post_init__(self):
        weights = (self.rigid_omega, self.alpha_R, self.beta_R, self.alpha_T, self.beta_T,
                   self.expr_omega, self.alpha_e, self.beta_e, self.identity_omega,
                   self.identity_ridge)
        if min(weights) < 0:
            raise ValueError("refinement weights must be non-negative")
        if (self.alternations < 1 or self.icp_iterations < 1 or self.unit_scale <= 0
                or self.reg_translation_scale <= 0):
            raise ValueError("bad refinement schedule")

    def reg_weights(self, n_expr: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-entry (alpha, beta) over theta = (R, T, e)."""
        alpha = np.r_[np.full(3, self.alpha_R), np.full(3, self.alpha_T), np.full(n_expr, self.alpha_e)]
        beta = np.r_[np.full(3, self.beta_R), np.full(3, self.beta_T), np.full(n_expr, self.beta_e)]
        return alpha, beta


@dataclass(eq=False)
class TrackerState:
    tensor: ReducedCoreTensor
    topology: MeshTopology
    w_id: np.ndarray
    blendshapes: BlendshapeSet = None
    theta_prev: np.ndarray | None = None
    theta_prev2: np.ndarray | None = None
    identity_frames: int = 0
    identity_locked: bool = False
    identity_steps: list = field(default_factory=list)

    def __post_init__(self):
        self.w_id = np.asarray(self.w_id, dtype=np.float64)
        if self.w_id.shape != (self.tensor.n_id,):
            raise ValueError("identity vector does not match the tensor")
        if self.blendshapes is None:
            self.blendshapes = build_blendshapes(self.tensor, self.w_id, self.topology)

    @classmethod
    def initial(cls, tensor, topology, w_id=None) -> "TrackerState":
        w = tensor.id_mean if w_id is None else w_id
        return cls(tensor, topology, np.array(w, dtype=np.float64))

    def push(self, theta) -> None:
        self.theta_prev2 = self.theta_prev
        self.theta_prev = np.array(theta, dtype=np.float64)

    def set_identity(self, w_id) -> None:
        self.w_id = np.asarray(w_id, dtype=np.float64)
        self.blendshapes = build_blendshapes(self.tensor, self.w_id, self.topology)

    def reset(self) -> None:
        """Forget motion history and reopen identity adaptation."""
        self.theta_prev = self.theta_prev2 = None
        self.identity_frames = 0
        self.identity_locked = False


@dataclass
class CorrespondenceSet:
    vertices: np.ndarray            # model vertex indices
    points: np.ndarray              # cloud point indices
    weights: np.ndarray
    two_d_only: bool = False

    def __len__(self):
        return len(self.vertices)


# ---------------------------------------------------------------------------
# Correspondences
# ---------------------------------------------------------------------------

def sample_vertices(n_vertices: int, max_count: int) -> np.ndarray:
    stride = max(1, -(-n_vertices // max(max_count, 1)))
    return np.arange(0, n_vertices, stride)


def find_correspondences(S, cloud: PointCloud, cfg: RefinementConfig = RefinementConfig(),
                         triangles=None, model_normals=None, frame: ObservedFrame | None = None
                         ) -> CorrespondenceSet:
    """Nearest usable cloud point for a uniform-stride subset of model
    vertices, gated by distance and by normal angle when model normals are
    available (given directly or computed from ``triangles``). With both
    ``triangles`` and the observed ``frame`` (for its camera), vertices
    hidden behind the model's own surface are skipped."""
    S = np.asarray(S, dtype=np.float64)
    idx = sample_vertices(len(S), cfg.max_correspondences)
    if frame is not None and triangles is not None and len(idx):
        idx = idx[_self_visible(S, idx, triangles, frame, cfg.occlusion_tol)]
    empty = CorrespondenceSet(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), True)
    if len(cloud.usable) == 0 or len(idx) == 0:
        return empty
    dist, nn = cloud.kdtree.query(S[idx], distance_upper_bound=cfg.max_distance)
    ok = np.isfinite(dist) & (dist <= cfg.max_distance)
    nn = np.where(ok, nn, 0)
    pts = cloud.usable[nn]
    if model_normals is None and triangles is not None:
        model_normals = vertex_normals(S, triangles)
    if model_normals is not None:
        nm = model_normals[idx]
        cosang = np.einsum("ij,ij->i", nm, cloud.normals[pts])
        ok &= cosang >= np.cos(np.radians(cfg.max_angle_deg))
        ray = S[idx] / np.linalg.norm(S[idx], axis=1, keepdims=True)
        ok &= -np.einsum("ij,ij->i", nm, ray) >= np.cos(np.radians(cfg.max_view_angle_deg))
    if not ok.any():
        return empty
    return CorrespondenceSet(idx[ok], pts[ok], np.ones(int(ok.sum())), False)


def _self_visible(S, idx, triangles, frame: ObservedFrame, tol: float) -> np.ndarray:
    K = frame.K
    zbuf = rasterize(S, triangles, K, frame.depth.shape).depth
    H, W = zbuf.shape
    P = S[idx]
    ok = P[:, 2] > 0
    z = np.where(ok, P[:, 2], 1.0)
    c = np.rint(K.cx + K.fx * P[:, 0] / z).astype(np.int64)
    r = np.rint(K.cy + K.fy * P[:, 1] / z).astype(np.int64)
    ok &= (c >= 0) & (c < W) & (r >= 0) & (r < H)
    zb = np.zeros(len(P))
    zb[ok] = zbuf[r[ok], c[ok]]
    return ok & (zb > 0) & (P[:, 2] - zb <= tol)


# ---------------------------------------------------------------------------
# Energies (public, meters unless ``scale`` says otherwise)
# ---------------------------------------------------------------------------

def _split(theta, n_expr):
    theta = np.asarray(theta, dtype=np.float64)
    return theta[:3], theta[3:6], theta[6:6 + n_expr]


def _shape_jac(shapes: BlendshapeSet, rotvec, e, vertices):
    """Posed vertices and d S / d theta, (n, 3, 6 + N_e - 1)."""
    R = rotation_matrix(rotvec)
    V = _blend_unchecked(shapes, e)[vertices]
    RV = V @ R.T
    dB = np.transpose(shapes.deltas[:, vertices, :], (1, 2, 0))
    J = np.concatenate([rotated_point_jacobian(rotvec, RV),
                        np.broadcast_to(np.eye(3), (len(V), 3, 3)),
                        np.einsum("ab,nbm->nam", R, dB)], axis=2)
    return RV, J


def energy_e2d(theta, landmarks, shapes: BlendshapeSet, K: CameraIntrinsics,
               topology: MeshTopology | None = None):
    """(1/N_l) sum ||project(S_i) - l_i||^2 and its gradient over theta.
    Landmarks at or behind the camera plane are dropped."""
    topology = topology or shapes.topology
    rot, T, e = _split(theta, shapes.n_exp - 1)
    RV, J = _shape_jac(shapes, rot, e, topology.landmark_vertices)
    P = RV + T
    ok = P[:, 2] > 0
    n = len(P)
    g = np.zeros(len(theta))
    if not ok.any():
        return 0.0, g
    r = project(K, P[ok]) - np.asarray(landmarks, dtype=np.float64)[ok]
    Jr = projection_jacobian(K, P[ok]) @ J[ok]
    val = float(np.sum(r ** 2)) / n
    g = 2.0 * np.einsum("na,nam->m", r, Jr) / n
    return val, g


def energy_e3d_point_plane(theta, corr: CorrespondenceSet, cloud: PointCloud,
                           shapes: BlendshapeSet, scale: float = 1.0):
    """(1/N_d) sum ((S_k - d_k) . n_k)^2, lengths multiplied by ``scale``."""
    g = np.zeros(len(theta))
    if len(corr) == 0:
        return 0.0, g
    rot, T, e = _split(theta, shapes.n_exp - 1)
    RV, J = _shape_jac(shapes, rot, e, corr.vertices)
    n = cloud.normals[corr.points]
    r = scale * np.einsum("ij,ij->i", RV + T - cloud.points[corr.points], n)
    Jr = scale * np.einsum("ia,iam->im", n, J)
    w = corr.weights
    m = len(corr)
    return float(np.sum(w * r ** 2)) / m, 2.0 * (w * r) @ Jr / m


def energy_ereg(theta, theta_star, state: TrackerState | None, alpha, beta, scale: float = 1.0):
    """alpha ||theta - theta*||^2 + beta ||theta - 2 theta' + theta''||^2.

    ``alpha``/``beta`` may be scalars or per-entry arrays; translation
    entries are multiplied by ``scale``. The smoothness term is skipped
    until two previous frames exist."""
    theta = np.asarray(theta, dtype=np.float64)
    u = np.ones(len(theta))
    u[3:6] = scale
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), theta.shape)
    beta = np.broadcast_to(np.asarray(beta, dtype=np.float64), theta.shape)
    d = u * (theta - np.asarray(theta_star, dtype=np.float64))
    val = float(np.sum(alpha * d ** 2))
    g = 2.0 * alpha * d * u
    if state is not None and state.theta_prev is not None and state.theta_prev2 is not None:
        s = u * (theta - 2.0 * state.theta_prev + state.theta_prev2)
        val += float(np.sum(beta * s ** 2))
        g = g + 2.0 * beta * s * u
    return val, g


# ---------------------------------------------------------------------------
# Refinement
# ---------------------------------------------------------------------------

@dataclass
class RefineResult:
    params: ShapeParams
    landmarks: np.ndarray           # frozen 2D landmarks used by E_2D
    e2d: float
    e3d: float
    ereg: float
    total: float
    total_raw: float
    two_d_only: bool
    iterations: int
    correspondences: CorrespondenceSet | None = None
    fell_back: bool = False


class _Problem:
    """Stacked residuals of one refinement block with fixed correspondences."""

    def __init__(self, shapes, K, landmarks, cloud, cfg, theta_star, state, n_expr):
        self.shapes, self.K, self.l, self.cloud = shapes, K, landmarks, cloud
        self.cfg, self.theta_star, self.n_expr = cfg, theta_star, n_expr
        self.lv = shapes.topology.landmark_vertices
        self.hist = None
        if state is not None and state.theta_prev is not None and state.theta_prev2 is not None:
            self.hist = (state.theta_prev, state.theta_prev2)
        self.u = np.ones(6 + n_expr)
        self.u[3:6] = cfg.reg_translation_scale

    def residuals(self, theta, active, corr, omega, alpha, beta):
        """r and dr/dtheta[active] for block weights (omega, alpha, beta)."""
        rot, T, e = _split(theta, self.n_expr)
        verts = self.lv if len(corr) == 0 else np.concatenate([self.lv, corr.vertices])
        RV, J = _shape_jac(self.shapes, rot, e, verts)
        P = RV + T
        n_l = len(self.lv)
        blocks_r, blocks_J = [], []
        PL, JL = P[:n_l], J[:n_l][:, :, active]
        if np.any(PL[:, 2] <= 1e-6):
            return None
        c = 1.0 / np.sqrt(n_l)
        blocks_r.append(c * (project(self.K, PL) - self.l).ravel())
        blocks_J.append(c * (projection_jacobian(self.K, PL) @ JL).reshape(2 * n_l, -1))
        if len(corr) and omega > 0:
            n = self.cloud.normals[corr.points]
            c = np.sqrt(omega * corr.weights / len(corr)) * self.cfg.unit_scale
            d = P[n_l:] - self.cloud.points[corr.points]
            blocks_r.append(c * np.einsum("ij,ij->i", d, n))
            blocks_J.append(c[:, None] * np.einsum("ia,iam->im", n, J[n_l:][:, :, active]))
        u = self.u[active]
        a = np.sqrt(alpha[active])
        if np.any(a > 0):
            blocks_r.append(a * u * (theta - self.theta_star)[active])
            blocks_J.append(np.diag(a * u))
        if self.hist is not None:
            b = np.sqrt(beta[active])
            if np.any(b > 0):
                s = theta - 2.0 * self.hist[0] + self.hist[1]
                blocks_r.append(b * u * s[active])
                blocks_J.append(np.diag(b * u))
        return np.concatenate(blocks_r), np.vstack(blocks_J)

    def solve(self, theta, active, corr, omega, alpha, beta, lower=None, upper=None, max_iter=20):
        theta = np.array(theta, dtype=np.float64)
        m = int(np.sum(active))

        def fun(x):
            full = theta.copy()
            full[active] = x
            out = self.residuals(full, active, corr, omega, alpha, beta)
            if out is None:
                size = 2 * len(self.lv)
                return np.full(size, 1e6), np.zeros((size, m))
            return out

        res = levenberg_marquardt(fun, theta[active], lower=lower, upper=upper, max_iter=max_iter)
        theta[active] = res.x
        return theta


def _posed(shapes, theta, n_expr):
    rot, T, e = _split(theta, n_expr)
    return _blend_unchecked(shapes, e) @ rotation_matrix(rot).T + T


def refine(theta_raw: ShapeParams, frame: ObservedFrame, state: TrackerState,
           cfg: RefinementConfig = RefinementConfig(), theta_start: ShapeParams | None = None,
           rigid_omega: float | None = None, expr_omega: float | None = None) -> RefineResult:
    """Refine (R, T, e) of the regressor output against the frame.

    ``theta_start`` optionally starts the iterations away from the regressor
    output while ``theta_raw`` still provides the landmarks and the fidelity
    target. ``rigid_omega``/``expr_omega`` override the 3D weights (0 gives
    the 2D-only ablation)."""
    shapes = state.blendshapes
    K = frame.K
    n_e = shapes.n_exp - 1
    w_rigid = cfg.rigid_omega if rigid_omega is None else rigid_omega
    w_expr = cfg.expr_omega if expr_omega is None else expr_omega
    landmarks = landmark_positions_2d(shapes, theta_raw, K)
    cloud = frame.cloud
    tri = shapes.topology.triangles
    alpha, beta = cfg.reg_weights(n_e)
    alpha_e = np.r_[np.zeros(6), np.full(n_e, cfg.alpha_e)]
    beta_e = np.r_[np.zeros(6), np.full(n_e, cfg.beta_e)]
    alpha_r = np.r_[alpha[:6], np.zeros(n_e)]
    beta_r = np.r_[beta[:6], np.zeros(n_e)]
    theta_star = theta_raw.theta
    prob = _Problem(shapes, K, landmarks, cloud, cfg, theta_star, state, n_e)
    rigid = np.r_[np.ones(6, bool), np.zeros(n_e, bool)]

    def corr_at(theta):
        S = _posed(shapes, theta, n_e)
        return find_correspondences(S, cloud, cfg, triangles=tri, frame=frame)

    def total(theta, corr=None):
        corr = corr_at(theta) if corr is None else corr
        r = prob.residuals(theta, np.ones(len(theta), bool), corr, w_rigid, alpha_r + alpha_e,
                           beta_r + beta_e)
        return np.inf if r is None else float(r[0] @ r[0])

    theta = (theta_raw if theta_start is None else theta_start).theta.copy()
    total_raw = total(theta_star)
    prev = total(theta)
    two_d_only = False
    it = 0
    for it in range(1, cfg.alternations + 1):
        for _ in range(cfg.icp_iterations):
            corr = corr_at(theta)
            two_d_only |= corr.two_d_only
            step = prob.solve(theta, rigid, corr, w_rigid, alpha_r, beta_r, max_iter=cfg.inner_iterations)
            moved = np.max(np.abs(step[:6] - theta[:6]))
            theta = step
            if moved <= cfg.icp_tol or corr.two_d_only:
                break
        corr = corr_at(theta)
        two_d_only |= corr.two_d_only
        if n_e:
            theta = prob.solve(theta, ~rigid, corr, w_expr, alpha_e, beta_e,
                               lower=np.zeros(n_e), upper=np.ones(n_e), max_iter=cfg.inner_iterations)
        cur = total(theta)
        done = abs(prev - cur) <= cfg.rel_tol * max(abs(prev), 1e-300)
        prev = cur
        if done:
            break
    fell_back = False
    if not prev <= total_raw:
        theta, prev, fell_back = theta_star.copy(), total_raw, True
    theta[6:] = np.clip(theta[6:], 0.0, 1.0)
    corr = corr_at(theta)
    e2d, _ = energy_e2d(theta, landmarks, shapes, K)
    e3d, _ = energy_e3d_point_plane(theta, corr, cloud, shapes)
    ereg, _ = energy_ereg(theta, theta_star, state, np.r_[alpha[:6], alpha_e[6:]],
                          np.r_[beta[:6], beta_e[6:]], cfg.reg_translation_scale)
    params = ShapeParams.from_theta(theta, theta_raw.displacements)
    return RefineResult(params, landmarks, e2d, e3d, ereg, prev, total_raw, two_d_only, it,
                        corr, fell_back)


# ---------------------------------------------------------------------------
# Identity adaptation
# ---------------------------------------------------------------------------

_GOLD = 0.5 * (np.sqrt(5.0) - 1.0)


def golden_section(f, a, b, xtol=1e-6, max_iter=200):
    """Minimize a unimodal f on [a, b]; returns (x, f(x))."""
    c = b - _GOLD * (b - a)
    d = a + _GOLD * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) <= xtol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLD * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLD * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def bracket_minimum(f, x0, f0, step, max_expand=40):
    """Interval around x0 that contains a local minimum of f."""
    fr = f(x0 + step)
    if fr < f0:
        lo, mid, fmid, h = x0, x0 + step, fr, step
    else:
        fl = f(x0 - step)
        if fl >= f0:
            return x0 - step, x0 + step
        lo, mid, fmid, h = x0, x0 - step, fl, -step
    for _ in range(max_expand):
        h *= 2.0
        nxt = mid + h
        fn = f(nxt)
        if fn >= fmid:
            return (lo, nxt) if lo < nxt else (nxt, lo)
        lo, mid, fmid = mid, nxt, fn
    return (lo, mid) if lo < mid else (mid, lo)


class IdentityObjective:
    """E'_2D + omega E'_3D (point-to-point, in solver units) as a function of
    w_id with pose and expression fixed."""

    def __init__(self, state: TrackerState, frame: ObservedFrame, params: ShapeParams,
                 landmarks, cfg: RefinementConfig):
        tensor = state.tensor
        gamma = tensor.gamma(params.expr)
        self.M = (tensor.data @ gamma).reshape(tensor.n_vertices, 3, tensor.n_id)
        self.R = params.pose.matrix
        self.T = params.pose.translation
        self.K = frame.K
        self.l = np.asarray(landmarks, dtype=np.float64)
        self.lv = state.topology.landmark_vertices
        self.cfg = cfg
        self.w_ref = tensor.id_mean
        S = (self.M @ state.w_id) @ self.R.T + self.T
        self.corr = find_correspondences(S, frame.cloud, cfg, triangles=state.topology.triangles,
                                         frame=frame)
        self.d = frame.cloud.points[self.corr.points]
        rows = np.concatenate([self.lv, self.corr.vertices])
        self.Mr = self.M[rows]
        self.n_l = len(self.lv)

    def __call__(self, w) -> float:
        S = (self.Mr @ w) @ self.R.T + self.T
        SL = S[:self.n_l]
        if np.any(SL[:, 2] <= 0):
            return np.inf
        val = float(np.sum((project(self.K, SL) - self.l) ** 2)) / self.n_l
        if len(self.corr):
            diff = (S[self.n_l:] - self.d) * self.cfg.unit_scale
            val += self.cfg.identity_omega * float(np.sum(diff ** 2)) / len(self.corr)
        if self.cfg.identity_ridge > 0:
            val += self.cfg.identity_ridge * float(np.sum((w - self.w_ref) ** 2))
        return val


def update_identity(state: TrackerState, frame: ObservedFrame, params: ShapeParams, landmarks,
                    cfg: RefinementConfig = RefinementConfig()) -> np.ndarray:
    """One coordinate-descent sweep over w_id (golden-section per entry,
    fixed index order), then rebuild the blendshapes and update the lock."""
    if state.identity_locked:
        return state.w_id
    obj = IdentityObjective(state, frame, params, landmarks, cfg)
    w = state.w_id.copy()
    fw = obj(w)
    for i in range(len(w)):
        def f(t, i=i):
            trial = w.copy()
            trial[i] = t
            return obj(trial)
        a, b = bracket_minimum(f, w[i], fw, cfg.identity_step)
        t, ft = golden_section(f, a, b, xtol=cfg.identity_xtol)
        if ft <= fw:
            w[i], fw = t, ft
    step = float(np.linalg.norm(w - state.w_id))
    state.set_identity(w)
    state.identity_frames += 1
    state.identity_steps.append(step)
    if step < cfg.identity_tol or state.identity_frames >= cfg.identity_max_frames:
        state.identity_locked = True
    return state.w_id


# ---------------------------------------------------------------------------
# Per-frame records
# ---------------------------------------------------------------------------

@dataclass
class FrameRecord:
    index: int
    rotation: np.ndarray
    translation: np.ndarray
    expr: np.ndarray
    landmarks: np.ndarray
    e2d: float = 0.0
    e3d: float = 0.0
    ereg: float = 0.0
    two_d_only: bool = False
    identity_locked: bool = False
    empty: bool = False


def write_records_csv(path, records) -> None:
    records = list(records)
    if not records:
        Path(path).write_text("")
        return
    ne, nl = len(records[0].expr), len(records[0].landmarks)
    header = (["frame", "rx", "ry", "rz", "tx", "ty", "tz"] + [f"e{j}" for j in range(1, ne + 1)]
              + [f"{c}{i}" for i in range(nl) for c in ("u", "v")]
              + ["e2d", "e3d", "ereg", "two_d_only", "identity_locked", "empty"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in records:
            w.writerow([r.index] + [repr(float(x)) for x in np.concatenate(
                [r.rotation, r.translation, r.expr, np.asarray(r.landmarks).ravel(),
                 [r.e2d, r.e3d, r.ereg]])] + [int(r.two_d_only), int(r.identity_locked), int(r.empty)])


def read_records_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return []
    header = rows[0]
    ne = sum(1 for h in header if h.startswith("e") and h[1:].isdigit())
    nl = sum(1 for h in header if h.startswith("u") and h[1:].isdigit())
    out = []
    for row in rows[1:]:
        v = np.array([float(x) for x in row[1:-3]])
        out.append(FrameRecord(int(row[0]), v[:3], v[3:6], v[6:6 + ne],
                               v[6 + ne:6 + ne + 2 * nl].reshape(nl, 2),
                               *v[6 + ne + 2 * nl:], *(bool(int(x)) for x in row[-3:])))
    return out


_REC_MAGIC = b"BTFR"


def write_records_binary(path, records) -> None:
    records = list(records)
    ne = len(records[0].expr) if records else 0
    nl = len(records[0].landmarks) if records else 0
    buf = [_REC_MAGIC, struct.pack("<4I", 1, len(records), ne, nl)]
    for r in records:
        vec = np.concatenate([r.rotation, r.translation, r.expr, np.asarray(r.landmarks).ravel(),
                              [r.e2d, r.e3d, r.ereg]])
        flags = int(r.two_d_only) | int(r.identity_locked) << 1 | int(r.empty) << 2
        buf += [struct.pack("<II", r.index, flags), vec.astype("<f8").tobytes()]
    Path(path).write_bytes(b"".join(buf))


def read_records_binary(path) -> list:
    raw = Path(path).read_bytes()
    if raw[:4] != _REC_MAGIC:
        raise ValueError(f"{path}: not a frame record file")
    _, n, ne, nl = struct.unpack_from("<4I", raw, 4)
    off, out = 20, []
    size = 6 + ne + 2 * nl + 3
    for _ in range(n):
        idx, flags = struct.unpack_from("<II", raw, off)
        v = np.frombuffer(raw, "<f8", size, off + 8)
        off += 8 + 8 * size
        out.append(FrameRecord(idx, v[:3].copy(), v[3:6].copy(), v[6:6 + ne].copy(),
                               v[6 + ne:6 + ne + 2 * nl].reshape(nl, 2).copy(), *v[-3:],
                               bool(flags & 1), bool(flags & 2), bool(flags & 4)))
    return out
