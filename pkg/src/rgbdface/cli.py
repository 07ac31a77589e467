"""Command-line entry point: ``rgbdface {synth,train,track,depth,eval}``.

Every command takes ``--seed`` and ``--threads``. On failure the process
prints one JSON object ``{"error": category, "message": ...}`` to stderr
and exits with the category's code.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

EXIT_CODES = {
    "usage": 2,
    "config": 3,
    "missing-input": 4,
    "format": 5,
    "numeric": 6,
    "internal": 1,
}

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override every random seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    common.add_argument("--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="rgbdface", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic RGBD sequence")
    s.add_argument("--config", type=Path, help="sequence spec (key = value text)")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--frames", type=int)
    s.add_argument("--distance", type=float)
    s.add_argument("--noiseless", action="store_true")

    t = sub.add_parser("train", parents=[common], help="fit training data and train the regressor")
    t.add_argument("--out", type=Path, required=True, help="model file to write")
    t.add_argument("--manifest", type=Path, help="annotated images: 'image subject u0 v0 ...' lines")
    t.add_argument("--tensor", type=Path, help="core tensor (manifest mode)")
    t.add_argument("--topology", type=Path, help="topology file (manifest mode)")
    t.add_argument("--intrinsics", type=Path, help="camera config (manifest mode)")
    t.add_argument("--config", type=Path, help="[rig], [training], [regressor], [perturb] sections")
    t.add_argument("--subjects", type=int)
    t.add_argument("--per-subject", type=int)

    k = sub.add_parser("track", parents=[common], help="track a sequence directory")
    k.add_argument("sequence", type=Path)
    k.add_argument("--model", type=Path, required=True)
    k.add_argument("--out", type=Path, required=True)
    k.add_argument("--config", type=Path, help="pipeline config with [refinement] section")
    k.add_argument("--no-3d", action="store_true", help="2D-only ablation (omega_3D = 0)")
    k.add_argument("--no-identity", action="store_true", help="keep the initial identity")
    k.add_argument("--reset-at", default="", help="comma-separated frames that reset the tracker")
    k.add_argument("--init", type=Path, help="truth-style CSV whose first row initializes frame 0")
    k.add_argument("--overlays", action="store_true", help="write PPM landmark overlays")

    d = sub.add_parser("depth", parents=[common], help="face-prior depth recovery over tracked frames")
    d.add_argument("sequence", type=Path)
    d.add_argument("--tracking", type=Path, required=True, help="output directory of 'track'")
    d.add_argument("--out", type=Path, required=True)
    d.add_argument("--config", type=Path, help="pipeline config with [filter] section")
    d.add_argument("--iterations", type=int)

    e = sub.add_parser("eval", parents=[common], help="score tracking (and depth) outputs")
    e.add_argument("sequence", type=Path)
    e.add_argument("--tracking", type=Path, required=True)
    e.add_argument("--depth", type=Path, help="output directory of 'depth'")
    e.add_argument("--tau", type=float, default=10.0, help="lost-frame RMSE threshold in px")
    return p


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _read_cfg(path):
    from .fileio import read_config
    if path is None:
        return {}
    if not path.exists():
        raise CliError("missing-input", f"config {path} not found")
    try:
        return read_config(path)
    except ValueError as exc:
        raise CliError("config", f"{path}: {exc}") from exc


def cmd_synth(args, log) -> dict:
    from .model import CameraIntrinsics
    from .pipeline import rig_from_config, spec_from_config, write_sequence

    cfg = _read_cfg(args.config)
    rig_cfg = dict(cfg.get("rig", {}))
    if args.frames is not None:
        cfg["frames"] = args.frames
    if args.distance is not None:
        cfg["distance"] = args.distance
    if args.noiseless:
        cfg["noiseless"] = True
    if args.seed is not None:
        cfg["seed"] = args.seed
    spec = spec_from_config(cfg)
    rig_cfg.setdefault("seed", spec.rig_seed)
    rig = rig_from_config(rig_cfg)
    summary = write_sequence(args.out, rig, spec, CameraIntrinsics(), rig_cfg)
    log(f"frames={summary['frames']} distance={summary['distance']:g} m "
        f"sigma={summary['sigma_mm']:.2f} mm -> {args.out}")
    return summary


def cmd_train(args, log) -> dict:
    from .fitting import PerturbConfig, TrainingSample, read_manifest
    from .fileio import read_ppm
    from .model import CameraIntrinsics, load_core_tensor, load_intrinsics, load_topology
    from .pipeline import (dataclass_from_dict, rig_from_config, synthetic_training_set,
                           train_from_samples)
    from .regressor import RegressorConfig, save_model

    cfg = _read_cfg(args.config)
    reg_d = dict(cfg.get("regressor", {}))
    per_d = dict(cfg.get("perturb", {}))
    if args.seed is not None:
        reg_d["seed"] = args.seed
        per_d["seed"] = args.seed
    reg_cfg = dataclass_from_dict(RegressorConfig, reg_d)
    perturb = dataclass_from_dict(PerturbConfig, per_d)

    if args.manifest is not None:
        if not (args.tensor and args.topology):
            raise CliError("usage", "--manifest needs --tensor and --topology")
        for p in (args.manifest, args.tensor, args.topology):
            if not p.exists():
                raise CliError("missing-input", f"{p} not found")
        tensor = load_core_tensor(args.tensor)
        topology = load_topology(args.topology)
        K = load_intrinsics(args.intrinsics) if args.intrinsics else CameraIntrinsics()
        samples = []
        for image_path, subject, lms in read_manifest(args.manifest):
            if not Path(image_path).exists():
                raise CliError("missing-input", f"image {image_path} not found")
            samples.append(TrainingSample(read_ppm(image_path), lms, subject))
    else:
        tr = dict(cfg.get("training", {}))
        rig_cfg = dict(cfg.get("rig", {}))
        rig = rig_from_config(rig_cfg)
        tensor, topology, K = rig.core, rig.topology, CameraIntrinsics()
        n_sub = args.subjects or tr.get("subjects", 30)
        per = args.per_subject or tr.get("per_subject", 10)
        seed = args.seed if args.seed is not None else tr.get("seed", 0)
        log(f"rendering {n_sub} x {per} annotated images")
        samples = synthetic_training_set(rig, K, n_sub, per, seed)
    if not samples:
        raise CliError("missing-input", "no training samples")
    model = train_from_samples(samples, tensor, topology, K, reg_cfg, perturb, log=log)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_model(args.out, model)
    log("stage residuals: " + " ".join(f"{r:.4f}" for r in model.residuals))
    return {"samples": len(samples), "residuals": [float(r) for r in model.residuals]}


def _pipeline_config(path, **toggles):
    from .pipeline import PipelineConfig, PipelineError
    try:
        cfg = PipelineConfig.from_dict(_read_cfg(path))
    except (TypeError, ValueError) as exc:
        raise CliError("config", str(exc)) from exc
    except PipelineError as exc:
        raise CliError(exc.category, str(exc)) from exc
    from dataclasses import replace
    return replace(cfg, **{k: v for k, v in toggles.items() if v is not None})


def cmd_track(args, log) -> dict:
    from .fileio import write_ppm
    from .pipeline import (Sequence, draw_landmarks, read_truth, track_sequence,
                           tracking_metrics, write_identities)
    from .regressor import load_model
    from .tracking import write_records_binary, write_records_csv

    reset = tuple(int(x) for x in args.reset_at.split(",") if x.strip())
    cfg = _pipeline_config(args.config, use_3d=False if args.no_3d else None,
                           identity_adaptation=False if args.no_identity else None,
                           reset_at=reset or None)
    seq = Sequence.open(args.sequence)
    if not args.model.exists():
        raise CliError("missing-input", f"model {args.model} not found")
    model = load_model(args.model)
    if model.n_landmarks != seq.topology.n_landmarks or model.n_expr != seq.tensor.n_exp - 1:
        raise CliError("config", "model and sequence disagree on landmark or expression count")
    theta0 = landmarks0 = None
    if args.init is not None:
        if not args.init.exists():
            raise CliError("missing-input", f"{args.init} not found")
        init = read_truth(args.init, seq.tensor.n_exp - 1)
        theta0, landmarks0 = init.theta[0], init.landmarks[0]
    out = args.out
    out.mkdir(parents=True, exist_ok=True)

    def on_frame(k, rec):
        if args.overlays:
            img = seq.frame(k).color
            if seq.truth is not None and k < len(seq.truth.landmarks):
                img = draw_landmarks(img, seq.truth.landmarks[k], (0, 255, 0))
            if not rec.empty:
                img = draw_landmarks(img, rec.landmarks, (255, 0, 0))
            write_ppm(out / f"overlay_{k:05d}.ppm", img)
        if k % 10 == 0:
            log(f"frame {k}: E2D {rec.e2d:.3f} E3D {rec.e3d:.3g} "
                f"{'locked' if rec.identity_locked else 'adapting'}")

    res = track_sequence(seq, model, cfg, theta0, landmarks0, on_frame=on_frame)
    write_records_csv(out / "records.csv", res.records)
    write_records_binary(out / "records.btfr", res.records)
    write_identities(out / "identities.csv", res.identities)
    metrics = {"frames": len(res.records), "truncated": res.truncated}
    if seq.truth is not None and res.records:
        m = tracking_metrics(res.records, seq.truth.landmarks)
        metrics.update(rmse=m["rmse"], lost_fraction=m["lost_fraction"], max_rmse=m["max_rmse"])
    _write_metrics(out / "metrics.txt", metrics)
    log(" ".join(f"{k}={v}" for k, v in metrics.items()))
    if res.truncated:
        raise CliError("missing-input", f"sequence ends early at frame {len(res.records)}; "
                                        "partial results written")
    return metrics


def cmd_depth(args, log) -> dict:
    from concurrent.futures import ThreadPoolExecutor
    from dataclasses import replace
    from .fileio import write_depth_mm, write_depth_raw
    from .pipeline import Sequence, read_identities, recover_frame
    from .tracking import read_records_binary

    cfg = _pipeline_config(args.config)
    fcfg = cfg.filter if args.iterations is None else replace(cfg.filter, iterations=args.iterations)
    seq = Sequence.open(args.sequence)
    rec_path = args.tracking / "records.btfr"
    id_path = args.tracking / "identities.csv"
    for p in (rec_path, id_path):
        if not p.exists():
            raise CliError("missing-input", f"{p} not found")
    records = read_records_binary(rec_path)
    identities = read_identities(id_path)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)

    def one(k):
        frame = seq.frame(k)
        clean = mask = None
        if (seq.root / f"clean_{k:05d}.btdf").exists():
            clean, mask = seq.clean_depth(k), seq.face_mask(k)
        r = recover_frame(frame, records[k], seq.tensor, seq.topology, identities[k], fcfg,
                          clean, mask)
        write_depth_raw(out / f"recovered_{k:05d}.btdf", r.recovered)
        write_depth_mm(out / f"recovered_{k:05d}.pgm16", r.recovered)
        return k, r

    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        results = sorted(pool.map(one, range(len(records))))
    rows = [(k, r.mae_raw, r.mae_prior, r.mae_recovered) for k, r in results]
    with open(out / "mae.csv", "w") as fh:
        fh.write("frame,mae_raw_mm,mae_prior_mm,mae_recovered_mm\n")
        for k, a, b, c in rows:
            fh.write(f"{k},{a:.6f},{b:.6f},{c:.6f}\n")
    summary = _mae_summary(rows)
    _write_metrics(out / "metrics.txt", summary)
    log(" ".join(f"{k}={v:.4f}" for k, v in summary.items()))
    return summary


def _mae_summary(rows) -> dict:
    import numpy as np
    a = np.array([r[1:] for r in rows], dtype=float).reshape(-1, 3)
    with np.errstate(all="ignore"):
        m = np.nanmean(a, axis=0) if len(a) else np.full(3, np.nan)
    return {"mae_raw_mm": float(m[0]), "mae_prior_mm": float(m[1]), "mae_recovered_mm": float(m[2])}


def cmd_eval(args, log) -> dict:
    from .pipeline import Sequence, tracking_metrics
    from .tracking import read_records_binary

    seq = Sequence.open(args.sequence)
    if seq.truth is None:
        raise CliError("missing-input", "sequence has no truth.csv")
    rec_path = args.tracking / "records.btfr"
    if not rec_path.exists():
        raise CliError("missing-input", f"{rec_path} not found")
    m = tracking_metrics(read_records_binary(rec_path), seq.truth.landmarks, args.tau)
    out = {"frames": m["frames"], "rmse": m["rmse"], "lost_fraction": m["lost_fraction"],
           "max_rmse": m["max_rmse"]}
    if args.depth is not None:
        path = args.depth / "mae.csv"
        if not path.exists():
            raise CliError("missing-input", f"{path} not found")
        rows = [tuple(float(x) for x in ln.split(","))
                for ln in path.read_text().splitlines()[1:] if ln.strip()]
        out.update(_mae_summary(rows))
    print(json.dumps(out, sort_keys=True))
    return out


def _write_metrics(path, metrics: dict) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in metrics.items()))


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "track": cmd_track,
            "depth": cmd_depth, "eval": cmd_eval}


def _fail(category: str, message: str) -> int:
    print(json.dumps({"error": category, "message": message}), file=sys.stderr)
    return EXIT_CODES.get(category, 1)


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        return _fail("usage", "invalid command line")
    if args.threads < 1:
        return _fail("usage", "--threads must be >= 1")
    for var in _THREAD_VARS:
        os.environ.setdefault(var, str(args.threads))

    def log(msg):
        if not args.quiet:
            print(f"[{time.strftime('%H:%M:%S')}] {msg}", flush=True)

    from .pipeline import PipelineError
    from .model import BehindCameraError
    try:
        COMMANDS[args.command](args, log)
    except CliError as exc:
        return _fail(exc.category, str(exc))
    except PipelineError as exc:
        return _fail(exc.category, str(exc))
    except FileNotFoundError as exc:
        return _fail("missing-input", str(exc))
    except BehindCameraError as exc:
        return _fail("numeric", str(exc))
    except ValueError as exc:
        return _fail("format", str(exc))
    except Exception as exc:  # noqa: BLE001 - top-level guard keeps the error contract
        return _fail("internal", f"{type(exc).__name__}: {exc}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
