"""CSV export/import of trajectories and landmark maps."""

from __future__ import annotations

import csv

import numpy as np
from scipy.spatial.transform import Rotation

from .core import PoseSE3, TrajectoryEstimate, ValidationError


def write_trajectory_csv(traj: TrajectoryEstimate, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "tx", "ty", "tz", "qx", "qy", "qz", "qw"])
        for idx, pose in zip(traj.frame_indices, traj.poses):
            q = Rotation.from_matrix(pose.rotation).as_quat()  # x, y, z, w
            t = pose.translation
            writer.writerow([idx, f"{t[0]:.9f}", f"{t[1]:.9f}", f"{t[2]:.9f}",
                             f"{q[0]:.9f}", f"{q[1]:.9f}", f"{q[2]:.9f}",
                             f"{q[3]:.9f}"])


def load_trajectory_csv(path) -> TrajectoryEstimate:
    traj = TrajectoryEstimate()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            try:
                idx = int(row["frame"])
                t = [float(row["tx"]), float(row["ty"]), float(row["tz"])]
                q = [float(row["qx"]), float(row["qy"]), float(row["qz"]),
                     float(row["qw"])]
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{path}: malformed trajectory row: {row}") from exc
            rot = Rotation.from_quat(q).as_matrix()
            traj.frame_indices.append(idx)
            traj.poses.append(PoseSE3(rot, np.array(t)))
    return traj


def write_landmarks_csv(landmarks: dict[int, np.ndarray],
                        n_observations: dict[int, int], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "x", "y", "z", "n_observations"])
        for lm_id in sorted(landmarks):
            p = landmarks[lm_id]
            writer.writerow([lm_id, f"{p[0]:.9f}", f"{p[1]:.9f}", f"{p[2]:.9f}",
                             n_observations.get(lm_id, 0)])


def load_landmarks_csv(path) -> dict[int, np.ndarray]:
    out: dict[int, np.ndarray] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            out[int(row["id"])] = np.array(
                [float(row["x"]), float(row["y"]), float(row["z"])])
    return out
