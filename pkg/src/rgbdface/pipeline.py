"""Per-frame tracking loop, depth recovery over a tracked sequence, and the
on-disk layout of sequences and results.

Sequence directory::

    spec.toml               generator settings
    intrinsics.cfg          camera
    tensor.btct             face model
    topology.txt            triangles + landmark vertices
    truth.csv               per-frame truth theta and landmark projections
    frame_00000.ppm         color
    frame_00000.pgm16       depth, millimeters
    clean_00000.btdf        noiseless depth, float32 meters
    mask_00000.pgm16        face pixels (1) of the noiseless render
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .cloud import ObservedFrame
from .depthfilter import FilterConfig, recover, render_prior_depth
from .fileio import (read_depth_mm, read_depth_raw, read_pgm16, read_ppm,
                     write_config, write_depth_mm, write_depth_raw, write_pgm16, write_ppm)
from .fitting import (PerturbConfig, TrainingSample, fit_expression_displacement,
                      joint_identity_refinement, make_training_pairs)
from .model import (BehindCameraError, CameraIntrinsics, ShapeParams, RigidPose, build_blendshapes,
                    landmark_positions_2d, load_core_tensor, load_intrinsics, load_topology,
                    project, save_core_tensor, save_intrinsics, save_topology, transform,
                    _blend_unchecked)
from .regressor import RegressorConfig, predict, train
from .synth import (NoiseModel, SequenceSpec, SyntheticRig, annotated_images, eval_lost_fraction,
                    eval_mae, frame_rmse, gen_rig, render_sequence)
from .tracking import (FrameRecord, RefinementConfig, TrackerState, refine, update_identity)


class PipelineError(Exception):
    """Failure with a machine-readable category."""

    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

def dataclass_from_dict(cls, d: dict | None, **overrides):
    d = dict(d or {})
    d.update(overrides)
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise PipelineError("config", f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
    return cls(**kw)


def spec_from_config(cfg: dict) -> SequenceSpec:
    cfg = dict(cfg)
    noise = cfg.pop("noise", {})
    if cfg.pop("noiseless", False):
        nm = None
    else:
        nm = dataclass_from_dict(NoiseModel, noise)
    cfg.pop("rig", None)
    return dataclass_from_dict(SequenceSpec, cfg, noise=nm)


def spec_to_config(spec: SequenceSpec, rig_cfg: dict) -> dict:
    out = {f.name: getattr(spec, f.name) for f in fields(spec) if f.name != "noise"}
    if out["background_offset"] is None:
        del out["background_offset"]
    out["noiseless"] = spec.noise is None
    if spec.noise is not None:
        out["noise"] = {f.name: getattr(spec.noise, f.name) for f in fields(spec.noise)}
    out["rig"] = rig_cfg
    return out


def rig_from_config(cfg: dict) -> SyntheticRig:
    return gen_rig(**{k: v for k, v in (cfg or {}).items()})


@dataclass
class PipelineConfig:
    refinement: RefinementConfig = field(default_factory=RefinementConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    identity_adaptation: bool = True
    depth_recovery: bool = True
    use_3d: bool = True
    reset_at: tuple = ()
    carry_displacements: str = "zero"   # "zero": next input is the refined model itself; "raw": keep D_raw

    @classmethod
    def from_dict(cls, d: dict | None) -> "PipelineConfig":
        d = dict(d or {})
        ref = dataclass_from_dict(RefinementConfig, d.pop("refinement", None))
        flt = dataclass_from_dict(FilterConfig, d.pop("filter", None))
        return dataclass_from_dict(cls, d, refinement=ref, filter=flt)


# ---------------------------------------------------------------------------
# Sequence directories
# ---------------------------------------------------------------------------

def _truth_header(n_expr, n_l):
    return (["frame", "rx", "ry", "rz", "tx", "ty", "tz"] + [f"e{j}" for j in range(1, n_expr + 1)]
            + [f"{c}{i}" for i in range(n_l) for c in ("u", "v")])


def write_sequence(out_dir, rig: SyntheticRig, spec: SequenceSpec, K: CameraIntrinsics,
                   rig_cfg: dict | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "spec.toml", spec_to_config(spec, rig_cfg or {}))
    save_intrinsics(out / "intrinsics.cfg", K)
    save_core_tensor(out / "tensor.btct", rig.core)
    save_topology(out / "topology.txt", rig.topology)
    n_e, n_l = rig.core.n_exp - 1, rig.topology.n_landmarks
    rows = []
    for k, (p, fr) in enumerate(render_sequence(rig, spec, K)):
        write_ppm(out / f"frame_{k:05d}.ppm", fr.frame.color)
        write_depth_mm(out / f"frame_{k:05d}.pgm16", fr.frame.depth)
        write_depth_raw(out / f"clean_{k:05d}.btdf", fr.clean_depth)
        write_pgm16(out / f"mask_{k:05d}.pgm16", fr.face_mask.astype(np.uint16))
        rows.append([k] + [repr(float(x)) for x in np.concatenate([p.theta, fr.landmarks.ravel()])])
    with open(out / "truth.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_truth_header(n_e, n_l))
        w.writerows(rows)
    sigma = spec.noise.sigma(spec.distance) * 1000.0 if spec.noise is not None else 0.0
    return {"frames": spec.frames, "distance": spec.distance, "sigma_mm": sigma}


@dataclass
class SequenceTruth:
    theta: np.ndarray               # (F, 6 + N_e - 1)
    landmarks: np.ndarray           # (F, N_l, 2)


def read_truth(path, n_expr: int) -> SequenceTruth:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    a = np.array([[float(x) for x in r[1:]] for r in rows]).reshape(len(rows), -1)
    n = 6 + n_expr
    return SequenceTruth(a[:, :n], a[:, n:].reshape(len(rows), -1, 2))


@dataclass
class Sequence:
    root: Path
    K: CameraIntrinsics
    tensor: object
    topology: object
    truth: SequenceTruth | None

    @classmethod
    def open(cls, root) -> "Sequence":
        root = Path(root)
        if not root.is_dir():
            raise PipelineError("missing-input", f"sequence directory {root} not found")
        try:
            K = load_intrinsics(root / "intrinsics.cfg")
            tensor = load_core_tensor(root / "tensor.btct")
            topology = load_topology(root / "topology.txt")
        except FileNotFoundError as exc:
            raise PipelineError("missing-input", str(exc)) from exc
        truth = None
        if (root / "truth.csv").exists():
            truth = read_truth(root / "truth.csv", tensor.n_exp - 1)
        return cls(root, K, tensor, topology, truth)

    def frame_count(self) -> int:
        return len(sorted(self.root.glob("frame_*.ppm")))

    def frame(self, k: int) -> ObservedFrame:
        color = read_ppm(self.root / f"frame_{k:05d}.ppm")
        depth = read_depth_mm(self.root / f"frame_{k:05d}.pgm16")
        return ObservedFrame(color, depth, self.K)

    def has_frame(self, k: int) -> bool:
        return ((self.root / f"frame_{k:05d}.ppm").exists()
                and (self.root / f"frame_{k:05d}.pgm16").exists())

    def clean_depth(self, k: int) -> np.ndarray:
        return read_depth_raw(self.root / f"clean_{k:05d}.btdf").astype(np.float64)

    def face_mask(self, k: int) -> np.ndarray:
        return read_pgm16(self.root / f"mask_{k:05d}.pgm16") > 0


# ---------------------------------------------------------------------------
# Tracking
# ---------------------------------------------------------------------------

@dataclass
class TrackResult:
    records: list
    identities: list                # w_id used for each frame's output
    final_w_id: np.ndarray
    identity_steps: list
    truncated: bool = False


def initial_params(shapes, theta0, landmarks0, K) -> ShapeParams:
    """First-frame input: given pose and expression, displacements that
    reproduce the given landmarks with the current blendshapes."""
    p = ShapeParams.from_theta(theta0, np.zeros((len(landmarks0), 2)))
    proj = landmark_positions_2d(shapes, p, K)
    return p.replace(displacements=proj - np.asarray(landmarks0, dtype=np.float64))


def model_landmarks(shapes, params: ShapeParams, K) -> np.ndarray:
    """Projected landmark vertices of the refined model (no displacements)."""
    V = _blend_unchecked(shapes, params.expr)[shapes.topology.landmark_vertices]
    return project(K, transform(V, params.pose))


def track_frames(frames, model, tensor, topology, theta0, landmarks0,
                 cfg: PipelineConfig = PipelineConfig(), w_id0=None, on_frame=None) -> TrackResult:
    """Regress, refine, adapt identity for each ``ObservedFrame`` in order.

    The first frame's regressor input comes from ``theta0``/``landmarks0``;
    later frames start from the previous refined (R, T, e) with the
    previous regressed displacements. A frame whose regression or
    refinement fails is recorded as empty and the next frame restarts from
    the last good input."""
    state = TrackerState.initial(tensor, topology, w_id0)
    rcfg = cfg.refinement
    records, identities = [], []
    p_in = None
    for k, frame in enumerate(frames):
        if frame is None:
            return TrackResult(records, identities, state.w_id, state.identity_steps, True)
        if k in cfg.reset_at:
            state.reset()
        K = frame.K
        if p_in is None:
            p_in = initial_params(state.blendshapes, theta0, landmarks0, K)
        try:
            p_raw = predict(model, frame.color, p_in, K, state.blendshapes)
            res = refine(p_raw, frame, state, rcfg, rigid_omega=None if cfg.use_3d else 0.0,
                         expr_omega=None if cfg.use_3d else 0.0)
        except (BehindCameraError, ValueError, np.linalg.LinAlgError):
            n_l = topology.n_landmarks
            records.append(FrameRecord(k, np.zeros(3), np.zeros(3), np.zeros(tensor.n_exp - 1),
                                       np.zeros((n_l, 2)), empty=True))
            identities.append(state.w_id.copy())
            continue
        shapes_used = state.blendshapes
        identities.append(state.w_id.copy())
        lms = model_landmarks(shapes_used, res.params, K)
        if cfg.identity_adaptation and not state.identity_locked:
            frame_cloud = frame if cfg.use_3d else _without_depth(frame)
            update_identity(state, frame_cloud, res.params, res.landmarks, rcfg)
        records.append(FrameRecord(k, res.params.pose.rotation, res.params.pose.translation,
                                   res.params.expr, lms, res.e2d, res.e3d, res.ereg,
                                   res.two_d_only, state.identity_locked))
        state.push(res.params.theta)
        carry = p_raw.displacements if cfg.carry_displacements == "raw" else np.zeros_like(p_raw.displacements)
        p_in = res.params.replace(displacements=carry)
        if on_frame is not None:
            on_frame(k, records[-1])
    return TrackResult(records, identities, state.w_id, state.identity_steps)


def _without_depth(frame: ObservedFrame) -> ObservedFrame:
    return ObservedFrame(frame.color, np.zeros_like(frame.depth), frame.K)


def track_sequence(seq: Sequence, model, cfg: PipelineConfig = PipelineConfig(), theta0=None,
                   landmarks0=None, on_frame=None) -> TrackResult:
    if theta0 is None:
        if seq.truth is None:
            raise PipelineError("missing-input", "no truth.csv and no explicit initialization")
        theta0, landmarks0 = seq.truth.theta[0], seq.truth.landmarks[0]
    n = seq.frame_count()
    if seq.truth is not None:
        n = max(n, len(seq.truth.theta))

    def frames():
        for k in range(n):
            yield seq.frame(k) if seq.has_frame(k) else None

    return track_frames(frames(), model, seq.tensor, seq.topology, theta0, landmarks0, cfg,
                        on_frame=on_frame)


def tracking_metrics(records, truth_landmarks, tau: float = 10.0) -> dict:
    n = min(len(records), len(truth_landmarks))
    pred = np.stack([r.landmarks for r in records[:n]])
    empty = np.array([r.empty for r in records[:n]])
    rmse = frame_rmse(pred, truth_landmarks[:n])
    ok = ~empty
    return {"frames": n, "rmse": float(np.mean(rmse[ok])) if ok.any() else float("nan"),
            "lost_fraction": eval_lost_fraction(rmse, empty, tau),
            "max_rmse": float(np.max(rmse[ok])) if ok.any() else float("nan"),
            "per_frame": rmse}


def draw_landmarks(color, points, rgb, arm: int = 2) -> np.ndarray:
    """Copy of ``color`` with a small cross at each (u, v)."""
    img = np.array(color, dtype=np.uint8, copy=True)
    H, W = img.shape[:2]
    for u, v in np.rint(np.asarray(points, dtype=np.float64)).astype(np.int64):
        for d in range(-arm, arm + 1):
            if 0 <= v < H and 0 <= u + d < W:
                img[v, u + d] = rgb
            if 0 <= v + d < H and 0 <= u < W:
                img[v + d, u] = rgb
    return img


def write_identities(path, identities) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for k, wid in enumerate(identities):
            w.writerow([k] + [repr(float(x)) for x in wid])


def read_identities(path) -> list:
    with open(path, newline="") as fh:
        return [np.array([float(x) for x in row[1:]]) for row in csv.reader(fh)]


# ---------------------------------------------------------------------------
# Depth recovery
# ---------------------------------------------------------------------------

@dataclass
class DepthResult:
    recovered: np.ndarray
    prior: np.ndarray
    mae_raw: float
    mae_prior: float
    mae_recovered: float
    empty: bool


def recover_frame(frame: ObservedFrame, record: FrameRecord, tensor, topology, w_id,
                  cfg: FilterConfig = FilterConfig(), clean=None, mask=None,
                  mask_erosion: int = 2) -> DepthResult:
    """Render the tracked model as the prior V, filter the raw depth and
    score raw / prior / recovered against ``clean`` over ``mask``.

    The mask is eroded by ``mask_erosion`` pixels first: along the face
    silhouette lateral sensor jitter swaps face and background samples, and
    those pixels measure the jitter rather than the face surface."""
    shapes = build_blendshapes(tensor, w_id, topology)
    H, W = frame.depth.shape
    if record.empty:
        V = np.zeros((H, W))
    else:
        params = ShapeParams(RigidPose(record.rotation, record.translation),
                             np.clip(record.expr, 0, 1), np.zeros((topology.n_landmarks, 2)))
        S = transform(_blend_unchecked(shapes, params.expr), params.pose)
        V = render_prior_depth(S, topology, frame.K, (H, W))
    res = recover(frame.depth, V, frame.color, cfg)
    nan = float("nan")
    mr = mp = mx = nan
    if clean is not None:
        m = np.ones((H, W), bool) if mask is None else np.asarray(mask, bool)
        if mask is not None and mask_erosion > 0:
            m = ndimage.binary_erosion(m, iterations=mask_erosion)
        mr = eval_mae(frame.depth, clean, m & (frame.depth > 0))
        mp = eval_mae(V, clean, m & (V > 0))
        mx = eval_mae(res.depth, clean, m & (res.depth > 0))
    return DepthResult(res.depth, V, mr, mp, mx, res.empty)


# ---------------------------------------------------------------------------
# Regressor training from annotated images
# ---------------------------------------------------------------------------

def fit_training_truths(samples, tensor, topology, K, log=None) -> list:
    """Ground-truth ShapeParams and blendshapes per sample: shared identity
    per subject, then expression weights and displacements per sample."""
    by_subject: dict = {}
    for i, s in enumerate(samples):
        by_subject.setdefault(s.subject_id, []).append(i)
    truths = [None] * len(samples)
    for subject in sorted(by_subject):
        idx = by_subject[subject]
        jf = joint_identity_refinement([samples[i] for i in idx], tensor, K, topology)
        shapes = build_blendshapes(tensor, jf.w_id, topology)
        for i, f in zip(idx, jf.fits):
            init = ShapeParams(f.pose, np.clip(f.e, 0, 1), np.zeros((topology.n_landmarks, 2)))
            ef = fit_expression_displacement(samples[i], shapes, K, init=init, topology=topology)
            truths[i] = (samples[i].image, ef.params, shapes)
        if log is not None:
            log(f"{subject}: {len(idx)} samples, identity objective {jf.objective[-1]:.3g}")
    return truths


def synthetic_training_set(rig: SyntheticRig, K, n_subjects: int, per_subject: int, seed: int):
    imgs = annotated_images(rig, n_subjects, per_subject, K, seed=seed)
    return [TrainingSample(a.image, a.landmarks, a.subject_id) for a in imgs]


def train_from_samples(samples, tensor, topology, K, reg_cfg: RegressorConfig,
                       perturb: PerturbConfig, log=None):
    truths = fit_training_truths(samples, tensor, topology, K, log)
    pairs = make_training_pairs(truths, perturb)
    return train(pairs, reg_cfg, K, log=log)
