"""Cascaded shape regression with local binary features.

Each stage holds one random forest per landmark. Trees split on
pixel-intensity differences probed around the landmark's current image
position; the reached leaves of all trees form a sparse binary vector Phi,
and a ridge-regressed matrix W maps Phi to an additive update of the full
parameter vector P = (R, T, e, D).

Probe offsets are defined in pixels at a reference depth ``z_ref`` and are
scaled by ``z_ref / T_z`` at run time, so the probe pattern follows the
face's apparent size.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.linalg import cho_factor, cho_solve

from .cloud import to_gray
from .model import BlendshapeSet, CameraIntrinsics, ShapeParams, project, rotation_matrix

Z_REF = 0.7


@dataclass(frozen=True)
class RegressorConfig:
    n_stages: int = 5
    trees_per_landmark: int = 5
    depth: int = 4
    n_features: int = 500
    radius_start: float = 0.25          # fraction of reference_size
    radius_end: float = 0.05
    reference_size: float = 120.0       # face size in pixels at z_ref
    z_ref: float = Z_REF
    ridge_lambda: float = 1000.0
    min_pairs: int = 200
    min_leaf: int = 2
    bootstrap: bool = True
    rot_scale: float = 1.0
    trans_scale: float = 10.0
    expr_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_stages < 0 or self.trees_per_landmark < 1 or self.depth < 0:
            raise ValueError("bad forest shape")
        if self.n_features < 1:
            raise ValueError("n_features must be >= 1")
        if self.ridge_lambda < 0:
            raise ValueError("ridge_lambda must be >= 0")

    def radii(self) -> np.ndarray:
        """Per-stage probe radius in pixels at the reference depth."""
        if self.n_stages <= 1:
            return np.array([self.radius_start * self.reference_size] * self.n_stages)
        ratio = (self.radius_end / self.radius_start) ** (1.0 / (self.n_stages - 1))
        return self.reference_size * self.radius_start * ratio ** np.arange(self.n_stages)


def scale_radius(r_ref: float, T_z: float, z_ref: float = Z_REF) -> float:
    if T_z <= 0:
        raise ValueError("T_z must be positive")
    return r_ref * z_ref / T_z


# ---------------------------------------------------------------------------
# Trees
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class RegressionTree:
    """Flattened binary tree. Internal nodes have ``left``/``right`` >= 0 and
    ``leaf`` == -1; leaves have children -1 and a leaf index."""
    offsets: np.ndarray             # (n_nodes, 4): a_x, a_y, b_x, b_y at reference scale
    threshold: np.ndarray           # (n_nodes,)
    left: np.ndarray
    right: np.ndarray
    leaf: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.leaf >= 0))

    @property
    def n_nodes(self) -> int:
        return len(self.leaf)

    def route(self, sample_fn) -> np.ndarray:
        """Leaf index per sample; ``sample_fn(offsets (4,), rows)`` returns the
        feature values of the given sample rows."""
        n = sample_fn.n
        node = np.zeros(n, dtype=np.int64)
        active = self.leaf[node] < 0
        while active.any():
            rows = np.nonzero(active)[0]
            for k in np.unique(node[rows]):
                sel = rows[node[rows] == k]
                val = sample_fn(self.offsets[k], sel)
                node[sel] = np.where(val < self.threshold[k], self.left[k], self.right[k])
            active = self.leaf[node] < 0
        return self.leaf[node].astype(np.int64)


@dataclass(eq=False)
class Forest:
    trees: list
    landmark_index: int

    @property
    def n_leaves(self) -> int:
        return sum(t.n_leaves for t in self.trees)


@dataclass(eq=False)
class StageModel:
    forests: list
    W: np.ndarray                   # (dim P, total leaves) float32, de-normalized

    @property
    def n_leaves(self) -> int:
        return sum(f.n_leaves for f in self.forests)


@dataclass(eq=False)
class RegressorModel:
    stages: list
    radii: np.ndarray               # (N_t, N_l) pixels at the reference depth
    n_expr: int
    n_landmarks: int
    reference_size: float = 120.0
    z_ref: float = Z_REF
    normalization: np.ndarray = field(default_factory=lambda: np.ones(4))
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def dim(self) -> int:
        return 6 + self.n_expr + 2 * self.n_landmarks


class _Probe:
    """Feature values for samples around one landmark. Sample k reads gray
    image ``images[image_idx[k]]`` around ``centers[k]`` with offsets scaled
    by ``scales[k]``."""

    def __init__(self, images, image_idx, centers, scales):
        self.images = images                                    # (n_img, H, W)
        self.image_idx = np.asarray(image_idx, dtype=np.int64)
        self.centers = np.asarray(centers, dtype=np.float64)
        self.scales = np.asarray(scales, dtype=np.float64)
        self.n = len(self.centers)

    def _intensity(self, rows, off):
        """off: (..., 2) broadcast against rows -> intensities (len(rows), ...)."""
        extra = off.ndim - 1
        shape = (len(rows),) + (1,) * extra
        pos = (self.centers[rows].reshape(shape + (2,))
               + off[None] * self.scales[rows].reshape(shape + (1,)))
        _, H, W = self.images.shape
        c = np.rint(pos[..., 0]).astype(np.int64)
        r = np.rint(pos[..., 1]).astype(np.int64)
        np.clip(c, 0, W - 1, out=c)
        np.clip(r, 0, H - 1, out=r)
        return self.images[self.image_idx[rows].reshape(shape), r, c]

    def __call__(self, off, rows):
        return _quantize(self._intensity(rows, off[:2]), self._intensity(rows, off[2:]))

    def pool(self, offsets, rows) -> np.ndarray:
        """(len(rows), F) feature matrix for a pool of offsets."""
        return _quantize(self._intensity(rows, offsets[:, :2]), self._intensity(rows, offsets[:, 2:]))


def _quantize(a, b) -> np.ndarray:
    """Intensity difference in thirds of a gray level. Gray levels of 8-bit
    color are multiples of 1/3, so this is exact for such images, and the
    small integer range lets the split search use radix sorting."""
    d = np.rint(3.0 * (a.astype(np.float64) - b))
    return np.clip(d, -32767, 32767).astype(np.int16)


def _sample_offsets(rng, radius, n):
    """n pairs of points uniform in a disk of ``radius``."""
    ang = rng.uniform(0.0, 2 * np.pi, (n, 2))
    rad = radius * np.sqrt(rng.uniform(0.0, 1.0, (n, 2)))
    return np.stack([rad[:, 0] * np.cos(ang[:, 0]), rad[:, 0] * np.sin(ang[:, 0]),
                     rad[:, 1] * np.cos(ang[:, 1]), rad[:, 1] * np.sin(ang[:, 1])], axis=1)


def _best_split(X, Y, min_leaf):
    """Exhaustive variance-reduction split over the columns of X for 2D
    targets Y. Returns (gain, feature, threshold) or None."""
    n = len(Y)
    if n < 2 * min_leaf:
        return None
    Xt = np.ascontiguousarray(X.T)                              # (F, n)
    order = np.argsort(Xt, axis=1, kind="stable")
    Xs = np.take_along_axis(Xt, order, axis=1)
    total = Y.sum(axis=0)
    lo, hi = min_leaf - 1, n - min_leaf                         # split after sorted index k
    cx = np.cumsum(Y[:, 0][order], axis=1)[:, lo:hi]
    cy = np.cumsum(Y[:, 1][order], axis=1)[:, lo:hi]
    nl = np.arange(lo + 1, hi + 1, dtype=np.float64)
    score = (cx ** 2 + cy ** 2) / nl + ((total[0] - cx) ** 2 + (total[1] - cy) ** 2) / (n - nl)
    score[Xs[:, lo + 1:hi + 1] <= Xs[:, lo:hi]] = -np.inf
    if score.size == 0:
        return None
    flat = int(np.argmax(score))
    f, k = divmod(flat, score.shape[1])
    if not np.isfinite(score[f, k]):
        return None
    k += lo
    gain = score[f, k - lo] - float(total @ total) / n
    return gain, f, 0.5 * (float(Xs[f, k]) + float(Xs[f, k + 1]))


def _fit_tree(X, Y, offsets, depth, min_leaf, tol=1e-12) -> RegressionTree:
    offs, thr, left, right, leaf = [], [], [], [], []
    sse0 = float(np.sum((Y - Y.mean(0)) ** 2)) if len(Y) else 0.0

    def grow(rows, d) -> int:
        k = len(leaf)
        offs.append(np.zeros(4))
        thr.append(0.0)
        left.append(-1)
        right.append(-1)
        leaf.append(-2)
        split = _best_split(X[rows], Y[rows], min_leaf) if d < depth else None
        if split is None or split[0] <= tol * max(sse0, 1e-300):
            return k
        _, f, t = split
        offs[k], thr[k], leaf[k] = offsets[f], t, -1
        go_left = X[rows, f] < t
        left[k] = grow(rows[go_left], d + 1)
        right[k] = grow(rows[~go_left], d + 1)
        return k

    grow(np.arange(len(Y)), 0)
    leaf_arr = np.asarray(leaf, dtype=np.int32)
    is_leaf = leaf_arr == -2
    leaf_arr[is_leaf] = np.arange(int(is_leaf.sum()), dtype=np.int32)
    return RegressionTree(np.asarray(offs, dtype=np.float64).reshape(-1, 4),
                          np.asarray(thr, dtype=np.float64), np.asarray(left, dtype=np.int32),
                          np.asarray(right, dtype=np.int32), leaf_arr)


def _grow_forest(probe: _Probe, targets, radius, cfg: RegressorConfig, rng, landmark_index) -> Forest:
    trees = []
    n = probe.n
    for _ in range(cfg.trees_per_landmark):
        rows = rng.integers(0, n, n) if cfg.bootstrap else np.arange(n)
        offsets = _sample_offsets(rng, radius, cfg.n_features)
        X = probe.pool(offsets, rows)
        trees.append(_fit_tree(X, targets[rows], offsets, cfg.depth, cfg.min_leaf))
    return Forest(trees, landmark_index)


# ---------------------------------------------------------------------------
# Parameter vectors and landmark positions
# ---------------------------------------------------------------------------

def _landmark_rows(shapes: BlendshapeSet) -> np.ndarray:
    if shapes.topology is None:
        raise ValueError("blendshapes need a topology to locate landmarks")
    return shapes.shapes[:, shapes.topology.landmark_vertices]


def _landmarks(vec, BL, K: CameraIntrinsics) -> np.ndarray:
    """l = project(R V + T) - D for an unclamped parameter vector."""
    ne = BL.shape[0] - 1
    V = BL[0] + np.tensordot(vec[6:6 + ne], BL[1:] - BL[0], axes=1)
    S = V @ rotation_matrix(vec[:3]).T + vec[3:6]
    return project(K, S) - vec[6 + ne:].reshape(-1, 2)


def _norm_vector(model_or_cfg, n_expr, n_landmarks) -> np.ndarray:
    rot, trans, expr, ref = model_or_cfg
    return np.concatenate([np.full(3, rot), np.full(3, trans), np.full(n_expr, expr),
                           np.full(2 * n_landmarks, 1.0 / ref)])


def _stage_columns(stage: StageModel, probes) -> np.ndarray:
    """(N, total trees) global leaf columns reached by each sample."""
    cols, base = [], 0
    for forest, probe in zip(stage.forests, probes):
        for tree in forest.trees:
            cols.append(base + tree.route(probe))
            base += tree.n_leaves
    return np.stack(cols, axis=1) if cols else np.zeros((0, 0), dtype=np.int64)


def _apply_W(W, cols) -> np.ndarray:
    """sum of the W columns selected per sample, as float64."""
    W64 = W.astype(np.float64)
    return W64[:, cols].sum(axis=2).T if cols.size else np.zeros((len(cols), W.shape[0]))


def _probes(grays, img_idx, landmarks, T_z, z_ref):
    scale = z_ref / np.asarray(T_z, dtype=np.float64)
    if np.any(~np.isfinite(scale)) or np.any(scale <= 0):
        raise ValueError("T_z must be positive")
    return [_Probe(grays, img_idx, landmarks[:, i], scale) for i in range(landmarks.shape[1])]


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def train_forest(pairs, landmark_index: int, cfg: RegressorConfig = RegressorConfig(),
                 K: CameraIntrinsics | None = None, radius: float | None = None, seed=None) -> Forest:
    """One forest on the local residual of one landmark between the truth
    and the current guess of each pair."""
    if len(pairs) < 2:
        raise ValueError("need at least 2 pairs")
    K = K or CameraIntrinsics()
    grays, img_idx = _gray_table(pairs)
    cur = np.stack([_landmarks(p.p_guess.to_vector(), _landmark_rows(p.shapes), K)[landmark_index]
                    for p in pairs])
    tru = np.stack([_landmarks(p.p_truth.to_vector(), _landmark_rows(p.shapes), K)[landmark_index]
                    for p in pairs])
    Tz = np.array([p.p_guess.pose.translation[2] for p in pairs])
    probe = _probes(grays, img_idx, cur[:, None], Tz, cfg.z_ref)[0]
    targets = (tru - cur) * (Tz / cfg.z_ref)[:, None]
    radius = cfg.radii()[0] if radius is None else radius
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    return _grow_forest(probe, targets, radius, cfg, rng, landmark_index)


def encode_binary(image, params: ShapeParams, stage: StageModel, K: CameraIntrinsics,
                  shapes: BlendshapeSet, z_ref: float = Z_REF) -> np.ndarray:
    """Global binary vector Phi: one active leaf per tree, concatenated over
    landmarks."""
    return _encode_vec(to_gray(image), params.to_vector(), stage, K, _landmark_rows(shapes), z_ref)


def _encode_vec(gray, vec, stage, K, BL, z_ref) -> np.ndarray:
    lms = _landmarks(vec, BL, K)[None]
    probes = _probes(gray[None], [0], lms, [vec[5]], z_ref)
    cols = _stage_columns(stage, probes)[0]
    phi = np.zeros(stage.n_leaves)
    phi[cols] = 1.0
    return phi


def _gray_table(pairs):
    grays, index, idx = [], {}, []
    for p in pairs:
        key = id(p.image)
        if key not in index:
            index[key] = len(grays)
            grays.append(to_gray(p.image).astype(np.float32))
        idx.append(index[key])
    return np.stack(grays), np.asarray(idx)


def _rms(diff) -> float:
    return float(np.sqrt(np.mean(np.sum(diff ** 2, axis=1))))


def train(pairs, cfg: RegressorConfig = RegressorConfig(), K: CameraIntrinsics | None = None,
          log=None) -> RegressorModel:
    """Cascade training. Each stage grows per-landmark forests on the local
    landmark residual, encodes every pair, ridge-regresses the normalized
    parameter residual on Phi and applies the update to every guess."""
    if len(pairs) < cfg.min_pairs:
        raise ValueError(f"need at least {cfg.min_pairs} pairs, got {len(pairs)}")
    if any(p.shapes is None for p in pairs):
        raise ValueError("every pair needs its subject's blendshapes")
    K = K or CameraIntrinsics()
    n_expr = len(pairs[0].p_truth.expr)
    n_l = len(pairs[0].p_truth.displacements)
    grays, img_idx = _gray_table(pairs)
    BLs = [_landmark_rows(p.shapes) for p in pairs]
    P = np.stack([p.p_guess.to_vector() for p in pairs])
    Pg = np.stack([p.p_truth.to_vector() for p in pairs])
    lg = np.stack([_landmarks(v, BL, K) for v, BL in zip(Pg, BLs)])
    norm_blocks = np.array([cfg.rot_scale, cfg.trans_scale, cfg.expr_scale, cfg.reference_size])
    scale = _norm_vector(norm_blocks, n_expr, n_l)
    radii = cfg.radii()
    residuals = [_rms((Pg - P) * scale)]
    stages = []
    for t in range(cfg.n_stages):
        lc = np.stack([_landmarks(v, BL, K) for v, BL in zip(P, BLs)])
        Tz = P[:, 5]
        probes = _probes(grays, img_idx, lc, Tz, cfg.z_ref)
        forests = []
        for i in range(n_l):
            targets = (lg[:, i] - lc[:, i]) * (Tz / cfg.z_ref)[:, None]
            rng = np.random.default_rng([cfg.seed, t, i])
            forests.append(_grow_forest(probes[i], targets, radii[t], cfg, rng, i))
        stage = StageModel(forests, np.zeros((len(scale), 0), dtype=np.float32))
        cols = _stage_columns(stage, probes)
        L = stage.n_leaves
        Phi = sparse.csr_matrix((np.ones(cols.size), cols.ravel(),
                                 np.arange(0, cols.size + 1, cols.shape[1])), shape=(len(P), L))
        Y = (Pg - P) * scale
        A = (Phi.T @ Phi).toarray() + cfg.ridge_lambda * np.eye(L)
        try:
            Wn = cho_solve(cho_factor(A), Phi.T @ Y)              # (L, dim)
        except np.linalg.LinAlgError as exc:
            raise ValueError("singular normal equations; use ridge_lambda > 0") from exc
        stage.W = (Wn.T / scale[:, None]).astype(np.float32)
        P = P + _apply_W(stage.W, cols)
        stages.append(stage)
        residuals.append(_rms((Pg - P) * scale))
        if log is not None:
            log(f"stage {t + 1}/{cfg.n_stages}: leaves {L}, mean residual {residuals[-1]:.6f}")
    return RegressorModel(stages, np.repeat(radii[:, None], n_l, axis=1), n_expr, n_l,
                          cfg.reference_size, cfg.z_ref, norm_blocks, np.asarray(residuals))


def predict(model: RegressorModel, image, p_in: ShapeParams, K: CameraIntrinsics,
            shapes: BlendshapeSet) -> ShapeParams:
    """P <- P + W^t Phi^t(I, P) for every stage; e is clamped at the end."""
    gray = to_gray(image)
    BL = _landmark_rows(shapes)
    vec = p_in.to_vector()
    for stage in model.stages:
        lms = _landmarks(vec, BL, K)[None]
        cols = _stage_columns(stage, _probes(gray[None], [0], lms, [vec[5]], model.z_ref))
        vec = vec + _apply_W(stage.W, cols)[0]
    return ShapeParams.from_vector(vec, model.n_expr, clamp=True)


# ---------------------------------------------------------------------------
# Model file
# ---------------------------------------------------------------------------

_MAGIC = b"BTRM"
_VERSION = 1


def save_model(path, model: RegressorModel) -> None:
    out = [_MAGIC, struct.pack("<5I", _VERSION, len(model.stages), model.n_landmarks,
                               model.n_expr, len(model.residuals)),
           struct.pack("<2d", model.reference_size, model.z_ref),
           np.asarray(model.normalization, "<f8").tobytes(),
           np.asarray(model.radii, "<f8").tobytes(),
           np.asarray(model.residuals, "<f8").tobytes()]
    for stage in model.stages:
        for forest in stage.forests:
            out.append(struct.pack("<2I", forest.landmark_index, len(forest.trees)))
            for t in forest.trees:
                out += [struct.pack("<I", t.n_nodes), np.asarray(t.offsets, "<f8").tobytes(),
                        np.asarray(t.threshold, "<f8").tobytes(),
                        np.asarray(t.left, "<i4").tobytes(), np.asarray(t.right, "<i4").tobytes(),
                        np.asarray(t.leaf, "<i4").tobytes()]
        rows, cols = stage.W.shape
        out += [struct.pack("<2I", rows, cols), np.ascontiguousarray(stage.W, "<f4").tobytes()]
    Path(path).write_bytes(b"".join(out))


def load_model(path) -> RegressorModel:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a regressor model")
    off = 4
    version, n_st, n_l, n_e, n_res = struct.unpack_from("<5I", raw, off)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    off += 20
    ref, zref = struct.unpack_from("<2d", raw, off)
    off += 16

    def take(dtype, count):
        nonlocal off
        a = np.frombuffer(raw, dtype, count, off).copy()
        off += a.nbytes
        return a

    norm = take("<f8", 4)
    radii = take("<f8", n_st * n_l).reshape(n_st, n_l)
    residuals = take("<f8", n_res)
    stages = []
    for _ in range(n_st):
        forests = []
        for _ in range(n_l):
            li, nt = struct.unpack_from("<2I", raw, off)
            off += 8
            trees = []
            for _ in range(nt):
                (nn,) = struct.unpack_from("<I", raw, off)
                off += 4
                trees.append(RegressionTree(take("<f8", 4 * nn).reshape(nn, 4), take("<f8", nn),
                                            take("<i4", nn), take("<i4", nn), take("<i4", nn)))
            forests.append(Forest(trees, li))
        rows, cols = struct.unpack_from("<2I", raw, off)
        off += 8
        stages.append(StageModel(forests, take("<f4", rows * cols).reshape(rows, cols)))
    return RegressorModel(stages, radii, n_e, n_l, ref, zref, norm, residuals)
