"""Command-line orchestration: simulate, slam, eval, export-ply.

Exit codes: 0 when the requested run completed (a tracking failure is a
completed run whose report records the failure), 2 on configuration or
validation errors, 3 on I/O errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .assoc import write_assignment_csv
from .config import ConfigBundle, load_config
from .core import ParseError, ValidationError, load_detection_sequence
from .exports import (
    load_landmarks_csv,
    load_trajectory_csv,
    write_landmarks_csv,
    write_trajectory_csv,
)
from .metrics import RunReport, ate_rmse, landmark_pr, max_distance_mapped
from .pipeline import run_slam
from .postprocess import densify, dedupe, read_ply, variance_filter, write_ply
from .sim import load_ground_truth, write_simulation

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3

DEFAULT_MATCH_RADIUS_M = 0.01


def _atomic_write_json(obj, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _write_manifest(out_dir: str, command: str, config: ConfigBundle,
                    inputs: dict, outputs: dict, seed: int | None,
                    timings: dict) -> None:
    manifest = {
        "version": __version__,
        "command": command,
        "config": config.to_dict(),
        "inputs": inputs,
        "outputs": outputs,
        "seed": seed,
        "timings_s": {k: round(v, 4) for k, v in timings.items()},
    }
    _atomic_write_json(manifest, os.path.join(out_dir, "manifest.json"))


def _load_bundle(args) -> ConfigBundle:
    if getattr(args, "config", None):
        bundle = load_config(args.config)
    else:
        bundle = ConfigBundle()
    if getattr(args, "seed", None) is not None:
        bundle = replace(bundle, sim=replace(bundle.sim, rng_seed=args.seed))
    return bundle


def cmd_simulate(args) -> int:
    bundle = _load_bundle(args)
    os.makedirs(args.out, exist_ok=True)
    det_path = os.path.join(args.out, "detections.jsonl")
    gt_path = os.path.join(args.out, "ground_truth.json")
    t0 = time.perf_counter()
    write_simulation(bundle.sim, det_path, gt_path)
    _write_manifest(args.out, "simulate", bundle,
                    inputs={"config": args.config},
                    outputs={"detections": det_path, "ground_truth": gt_path},
                    seed=bundle.sim.rng_seed,
                    timings={"simulate": time.perf_counter() - t0})
    print(f"wrote {det_path} ({bundle.sim.n_frames} frames)")
    return EXIT_OK


def cmd_slam(args) -> int:
    bundle = _load_bundle(args)
    rig = bundle.rig
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    frames = load_detection_sequence(args.detections, rig=rig)
    timings["load"] = time.perf_counter() - t0

    gt = None
    gt_path = args.ground_truth
    if gt_path is None:
        candidate = os.path.join(os.path.dirname(os.path.abspath(args.detections)),
                                 "ground_truth.json")
        gt_path = candidate if os.path.exists(candidate) else None
    if gt_path is not None:
        gt = load_ground_truth(gt_path)

    t0 = time.perf_counter()
    result = run_slam(frames, rig, bundle.pipeline,
                      optimize_stride=args.optimize_stride)
    timings["slam"] = time.perf_counter() - t0

    os.makedirs(args.out, exist_ok=True)
    t0 = time.perf_counter()
    processed = set(result.trajectory.frame_indices)
    dens = densify([f for f in frames if f.frame_index in processed],
                   result.stereo_assignments, result.trajectory, rig,
                   bundle.pipeline.post)
    cloud = dedupe(dens.cloud, bundle.pipeline.post)
    cloud = variance_filter(cloud, bundle.pipeline.post)
    timings["postprocess"] = time.perf_counter() - t0

    traj_path = os.path.join(args.out, "trajectory.csv")
    lm_path = os.path.join(args.out, "landmarks.csv")
    ply_path = os.path.join(args.out, "map.ply")
    report_path = os.path.join(args.out, "report.json")
    write_trajectory_csv(result.trajectory, traj_path)
    n_obs = {lm_id: len(track.observations)
             for lm_id, track in result.graph.tracks.items()}
    write_landmarks_csv(result.landmarks, n_obs, lm_path)
    write_ply(cloud, ply_path)
    if args.dump_assignments:
        dump_path = os.path.join(args.out, "assignments.csv")
        with open(dump_path, "w", encoding="utf-8") as fh:
            fh.write("frame,kind,u_index,v_index,cost\n")
            for idx in sorted(result.stereo_assignments):
                write_assignment_csv(fh, result.stereo_assignments[idx], idx, "stereo")
            for idx in sorted(result.temporal_assignments):
                write_assignment_csv(fh, result.temporal_assignments[idx], idx, "temporal")

    report = _build_report(result, cloud, gt, bundle,
                           match_radius=args.match_radius)
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")

    _write_manifest(args.out, "slam", bundle,
                    inputs={"detections": os.path.abspath(args.detections),
                            "ground_truth": gt_path and os.path.abspath(gt_path),
                            "config": args.config},
                    outputs={"trajectory": traj_path, "landmarks": lm_path,
                             "map": ply_path, "report": report_path},
                    seed=args.seed, timings=timings)
    status = (f"failure={report.failure_reason} at frame {report.failure_frame}"
              if report.failure_reason != "none" else "completed")
    print(f"slam: {len(result.trajectory)} frames, "
          f"{len(result.landmarks)} landmarks, {status}, "
          f"mapped {report.max_distance_mapped_m:.2f} m "
          f"({100 * report.fraction_mapped:.0f}%)")
    return EXIT_OK


def _build_report(result, cloud, gt, bundle: ConfigBundle,
                  match_radius: float = DEFAULT_MATCH_RADIUS_M) -> RunReport:
    traj = result.trajectory
    if gt is not None:
        total = max_distance_mapped(traj, None, gt)
        mapped = (max_distance_mapped(traj, result.failure_frame, gt)
                  if result.failure_frame is not None else total)
        ate = ate_rmse(traj, gt) if len(traj) else None
        precision, recall = landmark_pr(cloud, gt, match_radius)
        range_len = gt.config.range_length_m
    else:
        total = max_distance_mapped(traj, None) if len(traj) else 0.0
        mapped = (max_distance_mapped(traj, result.failure_frame)
                  if result.failure_frame is not None else total)
        ate = None
        precision = recall = None
        range_len = bundle.sim.range_length_m
    return RunReport(
        max_distance_mapped_m=mapped,
        range_length_m=range_len,
        fraction_mapped=(mapped / total if total > 0 else
                         (1.0 if result.failure_frame is None else 0.0)),
        ate_rmse_m=ate,
        landmark_precision=precision,
        landmark_recall=recall,
        failure_reason=result.failure_reason,
        failure_frame=result.failure_frame,
        n_frames=len(traj),
        map_point_count=len(cloud.points),
        per_frame_match_counts=result.per_frame_match_counts,
    )


def cmd_eval(args) -> int:
    rows = []
    os.makedirs(args.out, exist_ok=True)
    for run_dir in args.run:
        report_path = os.path.join(run_dir, "report.json")
        traj_path = os.path.join(run_dir, "trajectory.csv")
        ply_path = os.path.join(run_dir, "map.ply")
        for p in (report_path, traj_path, ply_path):
            if not os.path.exists(p):
                raise FileNotFoundError(f"missing run artifact: {p}")
        with open(report_path, "r", encoding="utf-8") as fh:
            base = RunReport.from_json(fh.read())
        traj = load_trajectory_csv(traj_path)
        cloud = read_ply(ply_path)

        gt = None
        gt_path = args.ground_truth
        if gt_path is None:
            manifest_path = os.path.join(run_dir, "manifest.json")
            if os.path.exists(manifest_path):
                with open(manifest_path, "r", encoding="utf-8") as fh:
                    recorded = json.load(fh).get("inputs", {}).get("ground_truth")
                if recorded and os.path.exists(recorded):
                    gt_path = recorded
        if gt_path is not None:
            gt = load_ground_truth(gt_path)

        if gt is not None and len(traj):
            total = max_distance_mapped(traj, None, gt)
            mapped = (max_distance_mapped(traj, base.failure_frame, gt)
                      if base.failure_frame is not None else total)
            ate = ate_rmse(traj, gt)
            precision, recall = landmark_pr(cloud, gt, args.match_radius)
            report = replace_report(base, mapped, total, ate, precision, recall)
        else:
            report = base
        out_path = os.path.join(args.out, f"eval_{os.path.basename(os.path.normpath(run_dir))}.json")
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
            fh.write("\n")
        rows.append((run_dir, report))

    csv_path = os.path.join(args.out, "summary.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("run,range_length_m,max_distance_mapped_m,fraction_mapped,"
                 "ate_rmse_m,landmark_precision,landmark_recall,failure_reason\n")
        for run_dir, rep in rows:
            fh.write(f"{run_dir},{rep.range_length_m:.3f},"
                     f"{rep.max_distance_mapped_m:.3f},{rep.fraction_mapped:.4f},"
                     f"{'' if rep.ate_rmse_m is None else f'{rep.ate_rmse_m:.6f}'},"
                     f"{'' if rep.landmark_precision is None else f'{rep.landmark_precision:.4f}'},"
                     f"{'' if rep.landmark_recall is None else f'{rep.landmark_recall:.4f}'},"
                     f"{rep.failure_reason}\n")
        mean_fraction = float(np.mean([r.fraction_mapped for _, r in rows])) if rows else 0.0
        fh.write(f"mean,,,{mean_fraction:.4f},,,,\n")
    print(f"evaluated {len(rows)} runs -> {csv_path} "
          f"(mean fraction mapped {mean_fraction:.3f})")
    return EXIT_OK


def replace_report(base: RunReport, mapped: float, total: float,
                   ate: float | None, precision: float | None,
                   recall: float | None) -> RunReport:
    return RunReport(
        max_distance_mapped_m=mapped,
        range_length_m=base.range_length_m,
        fraction_mapped=mapped / total if total > 0 else base.fraction_mapped,
        ate_rmse_m=ate,
        landmark_precision=precision,
        landmark_recall=recall,
        failure_reason=base.failure_reason,
        failure_frame=base.failure_frame,
        n_frames=base.n_frames,
        map_point_count=base.map_point_count,
        per_frame_match_counts=base.per_frame_match_counts,
    )


def cmd_export_ply(args) -> int:
    landmarks = load_landmarks_csv(args.landmarks)
    from .core import PointCloud3D

    pts = (np.stack([landmarks[i] for i in sorted(landmarks)])
           if landmarks else np.zeros((0, 3)))
    write_ply(PointCloud3D(pts, frame="world"), args.out)
    print(f"wrote {args.out} ({len(pts)} points)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rowslam",
        description="Object-level stereo SLAM for row-structured fields")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate a synthetic range")
    p_sim.add_argument("--config", help="pipeline config JSON")
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.add_argument("--seed", type=int, default=None, help="simulator RNG seed")
    p_sim.set_defaults(func=cmd_simulate)

    p_slam = sub.add_parser("slam", help="run the SLAM pipeline")
    p_slam.add_argument("detections", help="detection JSONL file")
    p_slam.add_argument("--config", help="pipeline config JSON")
    p_slam.add_argument("--out", required=True, help="output directory")
    p_slam.add_argument("--seed", type=int, default=None)
    p_slam.add_argument("--ground-truth", help="ground-truth sidecar JSON")
    p_slam.add_argument("--optimize-stride", type=int, default=1,
                        help="batch-optimize every k-th frame")
    p_slam.add_argument("--dump-assignments", action="store_true",
                        help="write per-frame assignment CSV")
    p_slam.add_argument("--match-radius", type=float,
                        default=DEFAULT_MATCH_RADIUS_M,
                        help="landmark PR match radius in meters")
    p_slam.set_defaults(func=cmd_slam)

    p_eval = sub.add_parser("eval", help="score one or more runs")
    p_eval.add_argument("run", nargs="+", help="run output directories")
    p_eval.add_argument("--ground-truth", help="ground-truth sidecar JSON")
    p_eval.add_argument("--out", required=True, help="output directory")
    p_eval.add_argument("--match-radius", type=float,
                        default=DEFAULT_MATCH_RADIUS_M)
    p_eval.set_defaults(func=cmd_eval)

    p_ply = sub.add_parser("export-ply", help="landmark CSV to PLY")
    p_ply.add_argument("landmarks", help="landmarks.csv from a run")
    p_ply.add_argument("--out", required=True, help="output PLY path")
    p_ply.set_defaults(func=cmd_export_ply)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FileNotFoundError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
