"""Command-line front end.

Exit codes:
    0  success
    2  configuration error (missing or malformed scenario, robot, dataset or argument)
    3  dataset generation failure
    4  optimization failure
    5  every evaluated frame lacked a pose estimate
    6  schema mismatch between inputs (detections vs dataset, dataset vs scenario)
    7  calibration pose could not be estimated

Only the one-line summary goes to stdout; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import DatasetFormatError, GenerationError, generate_dataset, generate_sequence, load_dataset, save_dataset
from .detector import (DetectionSchemaError, detect_dataset, detections_to_arrays, fit_detector,
                       load_external_detections, write_detections)
from .geometry import NonProjectableError, RigidTransform, project
from .kinematics import end_effector_position
from .metrics import (PCK_GRID_2D, PCK_GRID_3D, ee_3d_error, iou, pck, render_mask, reprojection_error_ee,
                      write_pck_csv)
from .optimizer import EvaluationError, QuotaError, evaluate_performance, optimize
from .pnp import Correspondence, PnPError, solve_pnp
from .scenario import ScenarioError, file_digest, load_scenario
from .tracker import correction_transform, run_tracking

EXIT_CONFIG, EXIT_GENERATION, EXIT_OPTIMIZATION, EXIT_NO_POSE, EXIT_SCHEMA, EXIT_CALIBRATION = 2, 3, 4, 5, 6, 7


class CommandError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _err(msg):
    print(msg, file=sys.stderr)


def _dump_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


def _write_manifest(out, command, scenario, seed, extra_inputs=(), args=None):
    inputs = dict(scenario.inputs)
    for p in extra_inputs:
        if p is not None:
            inputs[Path(p).name] = file_digest(p)
    _dump_json(out / "manifest.json", {"command": command, "version": __version__, "seed": seed,
                                       "inputs": dict(sorted(inputs.items())), "args": args or {}})


def _scenario(args):
    try:
        return load_scenario(args.scenario)
    except ScenarioError as exc:
        raise CommandError(EXIT_CONFIG, str(exc)) from exc


def _seed(args, scenario):
    return scenario.seed if args.seed is None else args.seed


def _dataset(path, scenario):
    if path is None or not Path(path).is_file():
        raise CommandError(EXIT_CONFIG, f"dataset not found: {path}")
    try:
        ds = load_dataset(path)
    except DatasetFormatError as exc:
        raise CommandError(EXIT_SCHEMA, f"{path}: {exc}") from exc
    if ds.chain.digest() != scenario.chain.digest():
        raise CommandError(EXIT_SCHEMA, f"{path}: dataset robot does not match the scenario robot")
    return ds


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _keypoint_set(args, scenario):
    if getattr(args, "keypoints", None):
        try:
            ids = tuple(int(x) for x in args.keypoints.split(","))
        except ValueError as exc:
            raise CommandError(EXIT_CONFIG, f"bad keypoint list {args.keypoints!r}") from exc
    elif getattr(args, "result", None):
        try:
            ids = tuple(json.loads(Path(args.result).read_text())["best_set"])
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise CommandError(EXIT_CONFIG, f"cannot read keypoint set from {args.result}: {exc}") from exc
    elif "keypoints" in scenario.tracker:
        ids = tuple(scenario.tracker["keypoints"])
    else:
        raise CommandError(EXIT_CONFIG, "no keypoint set given (use --keypoints or --result)")
    unknown = [i for i in ids if i not in scenario.keypoints]
    if unknown:
        raise CommandError(EXIT_CONFIG, f"keypoints {unknown} are not candidates of {scenario.name}")
    return ids


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    sc = _scenario(args)
    seed = _seed(args, sc)
    out = _out(args)
    rng = np.random.default_rng(seed)
    try:
        if args.sequence:
            T_true = sc.randomization.camera_pose @ sc.lumped_error()
            ds = generate_sequence(sc.chain, sc.camera, sc.candidates, T_true, args.sequence, rng, sc.randomization)
        else:
            m_train = args.train or int(sc.dataset.get("train", 2000))
            m_test = args.test or int(sc.dataset.get("test", 500))
            ds = generate_dataset(sc.chain, sc.camera, sc.candidates, sc.randomization, m_train, m_test, rng)
    except GenerationError as exc:
        raise CommandError(EXIT_GENERATION, str(exc)) from exc
    except ValueError as exc:
        raise CommandError(EXIT_CONFIG, str(exc)) from exc
    save_dataset(ds, out / "dataset.jsonl")
    rates = ds.visibility_rates()
    with open(out / "visibility.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["keypoint_id", "visibility_rate"])
        for k, r in rates.items():
            wr.writerow([k, repr(r)])
    _write_manifest(out, "gen-data", sc, seed, args={"train": len(ds.train_ids), "test": len(ds.test_ids),
                                                        "sequence": args.sequence})
    vis = " ".join(f"{k}:{r:.2f}" for k, r in rates.items())
    return f"gen-data: {len(ds.train_ids)} train, {len(ds.test_ids)} test samples; visibility {vis}"


def cmd_optimize(args):
    sc = _scenario(args)
    seed = _seed(args, sc)
    ds = _dataset(args.dataset, sc)
    out = _out(args)
    try:
        cfg = sc.optimization_config(K=args.K, T=args.T, gamma=args.gamma, lam=args.lam, constraint=args.constraint,
                                     seed=seed, threads=args.threads)
    except (TypeError, ValueError) as exc:
        raise CommandError(EXIT_CONFIG, f"invalid optimizer settings: {exc}") from exc
    try:
        res = optimize(sc.candidates, sc.chain, sc.camera, sc.profile, ds, cfg, log=_err if args.verbose else None)
    except (EvaluationError, QuotaError, ValueError, KeyError) as exc:
        raise CommandError(EXIT_OPTIMIZATION, f"optimization failed: {exc}") from exc
    res.save(out / "result.json")
    res.write_convergence_csv(out / "convergence.csv")
    _write_manifest(out, "optimize", sc, seed, [args.dataset],
                    {"K": cfg.K, "T": cfg.T, "gamma": cfg.gamma, "lambda": cfg.lam, "constraint": cfg.constraint})
    return f"optimize: best set {list(res.best_set)} error {res.best_error:.4f} after {cfg.T} iterations"


def _external_detections(path, ds, ids, keypoint_ids):
    try:
        recs = load_external_detections(path, ds)
    except DetectionSchemaError as exc:
        raise CommandError(EXIT_SCHEMA, f"{path}: {exc}") from exc
    except OSError as exc:
        raise CommandError(EXIT_CONFIG, f"cannot read detections: {exc}") from exc
    return detections_to_arrays(recs, ids, keypoint_ids)


def cmd_evaluate(args):
    sc = _scenario(args)
    seed = _seed(args, sc)
    ds = _dataset(args.dataset, sc)
    out = _out(args)
    kset = _keypoint_set(args, sc)
    lam = sc.optimization_config().lam if args.lam is None else args.lam
    rng = np.random.default_rng(seed)
    ids = ds.test_ids
    det = None
    if args.detections:
        det = _external_detections(args.detections, ds, ids, kset)
    try:
        model = None if det is not None else fit_detector(sc.profile, kset, ds)
        ev = evaluate_performance(kset, model, ds, lam, rng, detections=det, threads=args.threads, compute_pose=True)
    except EvaluationError as exc:
        raise CommandError(EXIT_NO_POSE, str(exc)) from exc
    except (KeyError, ValueError) as exc:
        raise CommandError(EXIT_CONFIG, str(exc)) from exc
    arr = ds.arrays(ids)
    cols = [ds.index_of[k] for k in kset]
    truth = arr.pixels[:, cols]
    d = ev.detections
    ok2d = d.detected & np.all(np.isfinite(truth), axis=2)
    kp_err = np.linalg.norm(np.where(ok2d[..., None], d.uv - truth, 0.0), axis=2)
    frames = []
    ee_err_mm, ee_re = [], []
    for row, sid in enumerate(ids):
        s = ds.sample(sid)
        rec = {"sample_id": sid, "n_detected": int(ok2d[row].sum()), "pnp_ok": bool(ev.pnp_ok[row]),
               "ee_error_m": None, "ee_reprojection_px": None}
        if ev.pnp_ok[row]:
            T_est = RigidTransform.from_rt(ev.R[row], ev.t[row])
            x_b = end_effector_position(ds.chain, s.q)
            x_c = s.T_cb.apply(x_b)
            rec["ee_error_m"] = ee_3d_error(T_est, x_b, x_c)
            ee_err_mm.append(rec["ee_error_m"] * 1000.0)
            try:
                rec["ee_reprojection_px"] = reprojection_error_ee(T_est, x_b, project(ds.camera, x_c), ds.camera)
                ee_re.append(rec["ee_reprojection_px"])
            except NonProjectableError:
                pass
        frames.append(rec)
    curves = {"keypoint_2d_px": pck(kp_err[ok2d], PCK_GRID_2D)} if ok2d.any() else {}
    if ee_err_mm:
        curves["ee_3d_mm"] = pck(ee_err_mm, PCK_GRID_3D)
    if ee_re:
        curves["ee_reprojection_px"] = pck(ee_re, PCK_GRID_2D)
    write_pck_csv(out / "pck.csv", curves)
    with open(out / "frames.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["sample_id", "n_detected", "pnp_ok", "ee_error_m", "ee_reprojection_px"])
        for r in frames:
            wr.writerow([r["sample_id"], r["n_detected"], int(r["pnp_ok"]),
                         "" if r["ee_error_m"] is None else repr(r["ee_error_m"]),
                         "" if r["ee_reprojection_px"] is None else repr(r["ee_reprojection_px"])])
    report = {"keypoints": list(kset), "lambda": lam, "mean_loss_total": ev.mean_error,
              "loss_2d": ev.loss_2d.tolist(), "loss_3d": ev.loss_3d.tolist(), "loss_total": ev.loss_total.tolist(),
              "frames": len(ids), "pnp_skipped": ev.n_pnp_skipped,
              "auc": {k: c.auc for k, c in curves.items()},
              "pck": {k: {"thresholds": c.thresholds.tolist(), "values": c.values.tolist()} for k, c in curves.items()}}
    _dump_json(out / "report.json", report)
    _write_manifest(out, "evaluate", sc, seed, [args.dataset, args.detections], {"keypoints": list(kset), "lambda": lam})
    auc = " ".join(f"{k}={c.auc:.3f}" for k, c in curves.items())
    return f"evaluate: {len(ids)} frames, {ev.n_pnp_skipped} without pose, mean loss {ev.mean_error:.4f}, AUC {auc}"


def _read_correspondences(path):
    corrs = []
    try:
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                if line.strip():
                    r = json.loads(line)
                    corrs.append(Correspondence((float(r["u"]), float(r["v"])),
                                                (float(r["x"]), float(r["y"]), float(r["z"])),
                                                float(r.get("weight", 1.0))))
    except OSError as exc:
        raise CommandError(EXIT_CONFIG, f"cannot read correspondences: {exc}") from exc
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CommandError(EXIT_SCHEMA, f"{path} line {lineno}: bad correspondence record ({exc})") from exc
    return corrs


def cmd_calibrate(args):
    sc = _scenario(args)
    out = _out(args)
    corrs = _read_correspondences(args.correspondences)
    try:
        est = solve_pnp(corrs, sc.camera)
    except PnPError as exc:
        raise CommandError(EXIT_CALIBRATION, f"pose estimation failed: {exc}") from exc
    _dump_json(out / "calibration.json", {"camera_from_base": est.T.to_dict(),
                                         "reprojection_rmse_px": est.reprojection_rmse, "n_points": len(corrs)})
    _write_manifest(out, "calibrate", sc, None, [args.correspondences])
    return f"calibrate: {len(corrs)} correspondences, reprojection RMSE {est.reprojection_rmse:.4f} px"


def cmd_track(args):
    sc = _scenario(args)
    seed = _seed(args, sc)
    ds = _dataset(args.dataset, sc)
    out = _out(args)
    kset = _keypoint_set(args, sc)
    try:
        cfg = sc.tracker_config(n_particles=args.particles, alpha=args.alpha)
    except (TypeError, ValueError) as exc:
        raise CommandError(EXIT_CONFIG, f"invalid tracker settings: {exc}") from exc
    ids = tuple(s.sample_id for s in ds.samples)
    rng = np.random.default_rng(seed)
    det, det_path = None, None
    if args.detections:
        det = _external_detections(args.detections, ds, ids, kset)
        det_path = args.detections
    elif ids:
        model = fit_detector(sc.profile, kset, ds, ids=ids)
        det = detect_dataset(model, ds, ids, np.random.default_rng([seed, 1]))
        write_detections(out / "detections.jsonl", det)
    frames = [ds.sample(i) for i in ids]
    per_frame = [det.for_sample(r) for r in range(len(ids))] if ids else []
    keypoints = [sc.keypoints[k] for k in kset]
    _, results = run_tracking(sc.chain, cfg, frames, per_frame, keypoints, rng)
    ious = []
    with open(out / "trajectory.jsonl", "w") as f:
        for frame, res in zip(frames, results):
            f.write(json.dumps(res.to_dict(), sort_keys=True) + "\n")
    every = max(1, args.iou_every)
    with open(out / "iou.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["t", "iou"])
        for n, (frame, res) in enumerate(zip(frames, results)):
            if n % every:
                continue
            T_est = cfg.T_cb_init @ correction_transform(res.omega, res.b)
            v = iou(render_mask(sc.chain, frame.q, frame.T_cb, sc.camera), render_mask(sc.chain, frame.q, T_est, sc.camera))
            ious.append(v)
            wr.writerow([res.t, repr(v)])
    _write_manifest(out, "track", sc, seed, [args.dataset, det_path],
                    {"keypoints": list(kset), "particles": cfg.n_particles, "alpha": cfg.alpha})
    if not results:
        return "track: 0 frames"
    last = results[-1]
    return (f"track: {len(results)} frames, final reprojection RMSE {last.reproj_rmse:.3f} px, "
            f"end-effector error {last.ee_error * 1000:.2f} mm, median IoU {float(np.median(ious)):.3f}")


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    p = argparse.ArgumentParser(prog="kpopt", description="Keypoint subset selection and pose tools.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True):
        sp.add_argument("--scenario", required=True)
        if dataset:
            sp.add_argument("--dataset")
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--verbose", action="store_true")

    g = sub.add_parser("gen-data", help="generate a randomized dataset or a tracking sequence")
    common(g, dataset=False)
    g.add_argument("--train", type=int)
    g.add_argument("--test", type=int)
    g.add_argument("--sequence", type=int, default=0, help="frames of a tracking sequence instead of a dataset")
    g.set_defaults(func=cmd_gen_data)

    o = sub.add_parser("optimize", help="search for the best keypoint subset")
    common(o)
    o.add_argument("--K", type=int)
    o.add_argument("--T", type=int)
    o.add_argument("--gamma", type=float)
    o.add_argument("--lambda", dest="lam", type=float)
    o.add_argument("--constraint", choices=("per-group", "global"))
    o.set_defaults(func=cmd_optimize)

    e = sub.add_parser("evaluate", help="score a keypoint subset on the test split")
    common(e)
    e.add_argument("--keypoints", help="comma-separated keypoint ids")
    e.add_argument("--result", help="take the keypoint set from an optimize result")
    e.add_argument("--detections", help="external detections JSONL instead of the simulated detector")
    e.add_argument("--lambda", dest="lam", type=float)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("calibrate", help="camera-from-base pose from 2D-3D correspondences")
    common(c, dataset=False)
    c.add_argument("--correspondences", required=True)
    c.set_defaults(func=cmd_calibrate)

    t = sub.add_parser("track", help="track the base-frame correction over a sequence")
    common(t)
    t.add_argument("--detections")
    t.add_argument("--keypoints")
    t.add_argument("--result")
    t.add_argument("--particles", type=int)
    t.add_argument("--alpha", type=float)
    t.add_argument("--iou-every", type=int, default=1)
    t.set_defaults(func=cmd_track)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        summary = args.func(args)
    except CommandError as exc:
        _err(f"kpopt {args.command}: {exc}")
        return exc.code
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
