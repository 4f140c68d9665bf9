"""Per-frame SLAM loop tying the stages together.

For every frame: stereo-associate the left/right keypoint sets,
unproject the matches to a camera-frame cloud, temporally associate
against the previous left image, recover the relative pose from the
corresponding cloud points, extend the factor graph, and batch-optimize.
Tracking failures stop the loop; the completed prefix and the failure
frame are reported rather than raised.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assoc import Assignment, associate
from .backend.graph import FactorGraphProblem
from .backend.solver import DivergenceError, UnderConstrainedError, optimize
from .config import PipelineConfig
from .core import (
    CameraRig,
    DetectionFrame,
    PointCloud3D,
    PoseSE3,
    TrajectoryEstimate,
    ValidationError,
    compose,
)
from .geometry import TrackingFailure, estimate_relative_pose, unproject
from .metrics import FAILURE_NONE, FAILURE_OPTIMIZER_DIVERGENCE
from .core import StereoMatch


@dataclass
class SlamResult:
    trajectory: TrajectoryEstimate
    landmarks: dict[int, np.ndarray]
    graph: FactorGraphProblem
    stereo_assignments: dict[int, Assignment]
    temporal_assignments: dict[int, Assignment]
    failure_reason: str = FAILURE_NONE
    failure_frame: int | None = None
    final_cost: float = 0.0
    per_frame_stereo: list[int] = field(default_factory=list)
    per_frame_temporal: list[int] = field(default_factory=list)
    per_frame_icp: list[int] = field(default_factory=list)

    @property
    def per_frame_match_counts(self) -> dict:
        return {
            "stereo": self.per_frame_stereo,
            "temporal": self.per_frame_temporal,
            "icp": self.per_frame_icp,
        }


def _stereo_cloud(frame: DetectionFrame, assignment: Assignment,
                  rig: CameraRig):
    """Camera-frame points of a frame's stereo matches.

    Returns (cloud, left_index -> cloud_index). Pairs with non-positive
    or unreliable disparity are silently dropped.
    """
    pts = []
    l2m: dict[int, int] = {}
    for u_idx, v_idx, cost in assignment.pairs:
        kp = frame.left[u_idx]
        u_r = frame.right[v_idx].x
        if kp.x - u_r <= 0:
            continue
        try:
            p = unproject(StereoMatch(kp, u_r, cost), rig)
        except ValueError:
            continue
        l2m[u_idx] = len(pts)
        pts.append(p)
    cloud = PointCloud3D(np.stack(pts) if pts else np.zeros((0, 3)),
                         frame="camera")
    return cloud, l2m


def run_slam(frames: list[DetectionFrame], rig: CameraRig,
             cfg: PipelineConfig, optimize_stride: int = 1) -> SlamResult:
    """Run the full pipeline over a detection sequence.

    ``optimize_stride`` batch-optimizes every k-th frame instead of every
    frame; the final processed frame is always optimized.
    """
    if not frames:
        raise ValidationError("empty detection sequence")
    if optimize_stride < 1:
        raise ValidationError("optimize_stride must be >= 1")

    graph = FactorGraphProblem(rig, cfg.backend,
                               motion_direction=cfg.icp.motion_direction)
    result = SlamResult(
        trajectory=TrajectoryEstimate(),
        landmarks={},
        graph=graph,
        stereo_assignments={},
        temporal_assignments={},
    )
    world_dir = np.asarray(cfg.icp.motion_direction, dtype=float)

    next_track_id = 0
    prev_frame: DetectionFrame | None = None
    prev_cloud: PointCloud3D | None = None
    prev_l2m: dict[int, int] = {}
    track_of_left: dict[int, int] = {}
    processed: list[int] = []
    needs_final_opt = False

    for k, frame in enumerate(frames):
        stereo = associate(frame.left, frame.right, cfg.assoc)
        cloud, l2m = _stereo_cloud(frame, stereo, rig)
        result.stereo_assignments[frame.frame_index] = stereo
        result.per_frame_stereo.append(len(l2m))

        if k == 0:
            graph.add_first_frame(PoseSE3.identity())
            track_of_left = {}
            for i in range(len(frame.left)):
                track_of_left[i] = next_track_id
                next_track_id += 1
            stereo_map = stereo.as_index_map()
            obs = [(track_of_left[i], frame.left[i].x,
                    frame.right[stereo_map[i]].x, frame.left[i].y)
                   for i in sorted(l2m)]
            graph.observe(0, obs)
            result.per_frame_temporal.append(0)
            result.per_frame_icp.append(0)
        else:
            temporal = associate(prev_frame.left, frame.left, cfg.assoc)
            result.temporal_assignments[frame.frame_index] = temporal
            result.per_frame_temporal.append(len(temporal.pairs))

            corr = [(prev_l2m[i], l2m[j]) for i, j, _ in temporal.pairs
                    if i in prev_l2m and j in l2m]
            result.per_frame_icp.append(len(corr))

            prev_pose = graph.poses[-1]
            dir_cam = prev_pose.rotation.T @ world_dir
            try:
                rel = estimate_relative_pose(prev_cloud, cloud, corr,
                                             cfg.icp, direction=dir_cam)
            except TrackingFailure as tf:
                result.failure_reason = tf.reason
                result.failure_frame = frame.frame_index
                break

            pose_t = compose(prev_pose, rel)
            new_tracks: dict[int, int] = {}
            for i, j, _ in temporal.pairs:
                new_tracks[j] = track_of_left[i]
            for j in range(len(frame.left)):
                if j not in new_tracks:
                    new_tracks[j] = next_track_id
                    next_track_id += 1
            track_of_left = new_tracks

            stereo_map = stereo.as_index_map()
            obs = [(track_of_left[i], frame.left[i].x,
                    frame.right[stereo_map[i]].x, frame.left[i].y)
                   for i in sorted(l2m)]
            graph.add_frame(pose_t, rel, obs, direction_in_cam=dir_cam)

        processed.append(frame.frame_index)
        needs_final_opt = True
        if k % optimize_stride == 0 or k == len(frames) - 1:
            try:
                opt = optimize(graph, cfg.backend)
            except (UnderConstrainedError, DivergenceError):
                result.failure_reason = FAILURE_OPTIMIZER_DIVERGENCE
                result.failure_frame = frame.frame_index
                processed.pop()
                break
            graph.apply_optimized(opt.trajectory.poses, opt.landmarks)
            result.final_cost = opt.final_cost
            needs_final_opt = False

        prev_frame = frame
        prev_cloud = cloud
        prev_l2m = l2m

    if needs_final_opt and processed:
        try:
            opt = optimize(graph, cfg.backend)
            graph.apply_optimized(opt.trajectory.poses, opt.landmarks)
            result.final_cost = opt.final_cost
        except (UnderConstrainedError, DivergenceError):
            if result.failure_reason == FAILURE_NONE:
                result.failure_reason = FAILURE_OPTIMIZER_DIVERGENCE
                result.failure_frame = processed[-1]

    result.trajectory = TrajectoryEstimate(processed,
                                           list(graph.poses[:len(processed)]))
    result.landmarks = dict(graph.landmarks)
    return result
