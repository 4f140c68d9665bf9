"""Run metrics: maximum distance mapped, trajectory error, map quality.

The headline metric is the arc length of trajectory covered before the
pipeline's tracking-failure criteria fire: too few filtered temporal
matches, a per-frame translation above the sanity bound, or optimizer
divergence.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import PointCloud3D, TrajectoryEstimate, ValidationError
from .sim import GroundTruth

FAILURE_NONE = "none"
FAILURE_TOO_FEW_MATCHES = "too_few_matches"
FAILURE_TRANSLATION_BOUND = "translation_bound"
FAILURE_OPTIMIZER_DIVERGENCE = "optimizer_divergence"

_FAILURE_REASONS = (FAILURE_NONE, FAILURE_TOO_FEW_MATCHES,
                    FAILURE_TRANSLATION_BOUND, FAILURE_OPTIMIZER_DIVERGENCE)


@dataclass
class RunReport:
    max_distance_mapped_m: float = 0.0
    range_length_m: float = 0.0
    fraction_mapped: float = 0.0
    ate_rmse_m: float | None = None
    landmark_precision: float | None = None
    landmark_recall: float | None = None
    failure_reason: str = FAILURE_NONE
    failure_frame: int | None = None
    n_frames: int = 0
    map_point_count: int = 0
    per_frame_match_counts: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.failure_reason not in _FAILURE_REASONS:
            raise ValidationError(f"unknown failure reason {self.failure_reason!r}")
        if not (-1e-9 <= self.fraction_mapped <= 1.0 + 1e-9):
            raise ValidationError(f"fraction_mapped {self.fraction_mapped} outside [0,1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))


def _arc_length(positions: np.ndarray, upto: int | None = None) -> float:
    if upto is None:
        upto = len(positions) - 1
    upto = max(0, min(upto, len(positions) - 1))
    if upto == 0:
        return 0.0
    steps = np.diff(positions[:upto + 1], axis=0)
    return float(np.linalg.norm(steps, axis=1).sum())


def max_distance_mapped(trajectory: TrajectoryEstimate,
                        failure_frame: int | None,
                        gt: GroundTruth | None = None) -> float:
    """Trajectory arc length from frame 0 to the failure frame (or to the
    end when no failure occurred). Measured on the ground-truth
    trajectory when available, otherwise on the estimate."""
    if len(trajectory) == 0:
        raise ValidationError("empty trajectory")
    positions = (gt.trajectory_positions() if gt is not None
                 else trajectory.positions())
    return _arc_length(positions, failure_frame)


def ate_rmse(estimated: TrajectoryEstimate, gt: GroundTruth) -> float:
    """RMSE of camera positions against ground truth.

    The estimate is already expressed in the gauge of pose 0; no extra
    alignment is applied. Every estimated frame must exist in the ground
    truth."""
    missing = [i for i in estimated.frame_indices if i >= len(gt.poses)]
    if missing:
        raise ValidationError(f"frames missing from ground truth: {missing}")
    if len(estimated) == 0:
        raise ValidationError("empty trajectory")
    est = estimated.positions()
    ref = np.stack([gt.poses[i].translation for i in estimated.frame_indices])
    err = est - ref
    return float(np.sqrt((err**2).sum(axis=1).mean()))


def landmark_pr(cloud: PointCloud3D, gt: GroundTruth,
                match_radius_m: float,
                visible_only: bool = True) -> tuple[float, float]:
    """Greedy one-to-one matching of map points to true landmarks.

    Candidate pairs within ``match_radius_m`` are taken in ascending
    distance order; each map point and each landmark is used at most
    once. Precision is matched / map size, recall is matched / number of
    ground-truth landmarks (restricted to those visible in at least one
    frame when ``visible_only``).
    """
    if match_radius_m <= 0:
        raise ValidationError("match_radius_m must be positive")
    if visible_only:
        vis: set[int] = set()
        for ids in gt.visible_ids:
            vis.update(ids)
        gt_ids = sorted(vis)
    else:
        gt_ids = sorted(gt.landmark_positions.keys())
    map_pts = cloud.points
    if len(map_pts) == 0 or not gt_ids:
        return (0.0 if len(map_pts) else 1.0), (0.0 if gt_ids else 1.0)
    gt_pts = np.stack([gt.landmark_positions[i] for i in gt_ids])
    d = np.linalg.norm(map_pts[:, None, :] - gt_pts[None, :, :], axis=2)
    ii, jj = np.nonzero(d <= match_radius_m)
    order = np.argsort(d[ii, jj], kind="stable")
    used_map: set[int] = set()
    used_gt: set[int] = set()
    matched = 0
    for k in order:
        i, j = int(ii[k]), int(jj[k])
        if i in used_map or j in used_gt:
            continue
        used_map.add(i)
        used_gt.add(j)
        matched += 1
    return matched / len(map_pts), matched / len(gt_ids)
