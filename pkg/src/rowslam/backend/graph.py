"""Factor-graph construction over camera poses and seed landmarks.

Each stereo observation of a tracked seed becomes a 3-residual projection
factor (x, u_right, y) between one pose and one landmark, robustified
with a Huber model. Consecutive poses are tied by a motion factor from
the translation-only registration, with low uncertainty on rotation and
on translation perpendicular to the row, and high uncertainty along it.
A tight prior on the first pose fixes the gauge.

A landmark enters the graph once it has been observed from two distinct
poses. Its initial value is the midpoint of the first two world-frame
unprojections; afterwards each new observation is folded into a running
average anchored on the last optimized position.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import CameraRig, PoseSE3, ValidationError, compose
from ..geometry import project, unproject
from .lie import skew


class SequencingError(RuntimeError):
    """An operation was invoked out of the required pipeline order."""


@dataclass(frozen=True)
class BackendConfig:
    huber_k: float = 3.0
    pixel_sigma: float = 1.0
    motion_sigma_rot: float = 0.01
    motion_sigma_along: float = 0.2
    motion_sigma_perp: float = 0.01
    max_iterations: int = 25
    convergence_tol: float = 1e-8
    optimizer: str = "dogleg"  # or "levenberg-marquardt"
    gauge_sigma: float = 1e-6

    def __post_init__(self):
        for name in ("pixel_sigma", "motion_sigma_rot", "motion_sigma_along",
                     "motion_sigma_perp", "gauge_sigma"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.huber_k <= 0:
            raise ValidationError("huber_k must be positive")
        if self.motion_sigma_along <= self.motion_sigma_perp:
            raise ValidationError(
                "motion_sigma_along must exceed motion_sigma_perp (motion "
                "uncertainty is high along the travel axis)"
            )
        if self.optimizer not in ("dogleg", "levenberg-marquardt"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return {
            "huber_k": self.huber_k,
            "pixel_sigma": self.pixel_sigma,
            "motion_sigma_rot": self.motion_sigma_rot,
            "motion_sigma_along": self.motion_sigma_along,
            "motion_sigma_perp": self.motion_sigma_perp,
            "max_iterations": self.max_iterations,
            "convergence_tol": self.convergence_tol,
            "optimizer": self.optimizer,
            "gauge_sigma": self.gauge_sigma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackendConfig":
        return cls(**d)


@dataclass
class LandmarkTrack:
    """One physical seed: its stereo observations and evolving estimate."""

    landmark_id: int
    observations: list[tuple[int, float, float, float]] = field(default_factory=list)
    n_poses_seen: int = 0
    current_estimate: np.ndarray | None = None
    last_optimized: np.ndarray | None = None

    def add_observation(self, pose_index: int, x: float, u_right: float,
                        y: float) -> None:
        if any(o[0] == pose_index for o in self.observations):
            raise ValidationError(
                f"landmark {self.landmark_id} already observed at pose {pose_index}"
            )
        self.observations.append((pose_index, x, u_right, y))
        self.n_poses_seen = len(self.observations)


def update_landmark_estimate(track: LandmarkTrack,
                             new_obs_world: np.ndarray) -> np.ndarray:
    """Fold a new world-frame unprojection into the track's estimate.

    With exactly one prior observation the estimate is the midpoint of
    the two unprojections. With N > 1 prior poses the optimized position
    is reweighted by N and averaged with the new unprojection.
    """
    new_obs_world = np.asarray(new_obs_world, dtype=float).reshape(3)
    if not np.all(np.isfinite(new_obs_world)):
        raise ValidationError("new observation is not finite")
    n = track.n_poses_seen
    if n < 1 or track.current_estimate is None:
        raise SequencingError(
            f"landmark {track.landmark_id} has no prior observation"
        )
    if n == 1:
        return (track.current_estimate + new_obs_world) / 2.0
    if track.last_optimized is None:
        raise SequencingError(
            f"landmark {track.landmark_id} seen from {n} poses but never "
            "optimized; run the optimizer before adding observations"
        )
    return (n * track.last_optimized + new_obs_world) / (n + 1.0)


def huber_weight(residual_norm: float, k: float) -> float:
    """IRLS weight of the Huber loss on a whitened residual norm."""
    if residual_norm <= k:
        return 1.0
    return k / residual_norm


def huber_cost(residual_norm: float, k: float) -> float:
    """Huber loss value: quadratic inside k, linear beyond."""
    if residual_norm <= k:
        return 0.5 * residual_norm**2
    return k * residual_norm - 0.5 * k**2


def transform_to_camera(pose: PoseSE3, point_world: np.ndarray) -> np.ndarray:
    return pose.rotation.T @ (np.asarray(point_world, dtype=float) - pose.translation)


def stereo_residual(pose: PoseSE3, landmark: np.ndarray,
                    measured: tuple[float, float, float],
                    rig: CameraRig) -> np.ndarray:
    """Reprojection residual (x, u_right, y) in pixels."""
    p = transform_to_camera(pose, landmark)
    px, py, pu = project(p, rig)
    return np.array([px - measured[0], pu - measured[1], py - measured[2]])


def stereo_jacobians(pose: PoseSE3, landmark: np.ndarray,
                     rig: CameraRig) -> tuple[np.ndarray, np.ndarray]:
    """Analytic Jacobians of the stereo residual.

    Returns (J_pose, J_landmark) with J_pose (3, 6) over the right
    tangent perturbation (omega, v) and J_landmark (3, 3) over the world
    point.
    """
    p = transform_to_camera(pose, landmark)
    x, y, z = p
    f, b = rig.f, rig.baseline_m
    dh_dp = np.array([
        [f / z, 0.0, -f * x / z**2],
        [f / z, 0.0, -f * (x - b) / z**2],
        [0.0, f / z, -f * y / z**2],
    ])
    j_pose = np.hstack([dh_dp @ skew(p), -dh_dp])
    j_landmark = dh_dp @ pose.rotation.T
    return j_pose, j_landmark


def _orthonormal_basis(direction: np.ndarray) -> np.ndarray:
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    helper = np.array([0.0, 1.0, 0.0]) if abs(d[0]) > 0.9 else np.array([1.0, 0.0, 0.0])
    n1 = np.cross(d, helper)
    n1 /= np.linalg.norm(n1)
    n2 = np.cross(d, n1)
    return np.column_stack([d, n1, n2])


@dataclass
class StereoFactor:
    pose_index: int
    landmark_id: int
    measured: np.ndarray  # (x, u_right, y)


@dataclass
class MotionFactor:
    pose_i: int
    pose_j: int
    measured: PoseSE3
    whitener_t: np.ndarray  # (3, 3), anisotropic translation whitening


class FactorGraphProblem:
    """Joint nonlinear least-squares problem over poses and landmarks.

    Construction is incremental through ``add_first_frame`` /
    ``add_frame``; the problem owns the landmark tracks so eligibility
    (two distinct observing poses) and estimate averaging happen in one
    place.
    """

    def __init__(self, rig: CameraRig, cfg: BackendConfig,
                 motion_direction=(1.0, 0.0, 0.0)):
        self.rig = rig
        self.cfg = cfg
        self.motion_direction = np.asarray(motion_direction, dtype=float)
        self.poses: list[PoseSE3] = []
        self.landmarks: dict[int, np.ndarray] = {}
        self.stereo_factors: list[StereoFactor] = []
        self.motion_factors: list[MotionFactor] = []
        self.gauge_prior: PoseSE3 | None = None
        self.tracks: dict[int, LandmarkTrack] = {}
        self._factor_keys: set[tuple[int, int]] = set()

    # -- construction -------------------------------------------------

    def add_first_frame(self, pose: PoseSE3 | None = None) -> None:
        if self.poses:
            raise SequencingError("first frame already added")
        pose = pose if pose is not None else PoseSE3.identity()
        self.poses.append(pose)
        self.gauge_prior = pose

    def add_frame(self, pose_estimate: PoseSE3, relative_pose: PoseSE3,
                  stereo_obs: list[tuple[int, float, float, float]],
                  direction_in_cam=None) -> None:
        """Append a pose, its motion factor, and the frame's stereo
        observations ``(landmark_id, x, u_right, y)``.

        Observations of seeds seen from fewer than two poses are parked
        on their tracks; once a second pose observes a seed, both parked
        factors enter the graph and the landmark variable is initialized
        from the unprojection midpoint.
        """
        if not self.poses:
            raise SequencingError("call add_first_frame before add_frame")
        pose_index = len(self.poses)
        self.poses.append(pose_estimate)
        direction = (self.motion_direction if direction_in_cam is None
                     else np.asarray(direction_in_cam, dtype=float))
        basis = _orthonormal_basis(direction)
        wt = np.diag([1.0 / self.cfg.motion_sigma_along,
                      1.0 / self.cfg.motion_sigma_perp,
                      1.0 / self.cfg.motion_sigma_perp]) @ basis.T
        self.motion_factors.append(
            MotionFactor(pose_index - 1, pose_index, relative_pose, wt))
        self.observe(pose_index, stereo_obs)

    def observe(self, pose_index: int,
                stereo_obs: list[tuple[int, float, float, float]]) -> None:
        """Register stereo observations against an existing pose."""
        if not (0 <= pose_index < len(self.poses)):
            raise ValidationError(f"pose index {pose_index} out of range")
        pose = self.poses[pose_index]
        for lm_id, x, u_right, y in stereo_obs:
            world = pose.apply(self._unproject_obs(x, u_right, y))
            track = self.tracks.get(lm_id)
            if track is None:
                track = LandmarkTrack(lm_id)
                self.tracks[lm_id] = track
            if track.n_poses_seen == 0:
                track.add_observation(pose_index, x, u_right, y)
                track.current_estimate = world
                continue
            estimate = self._averaged_estimate(track, world)
            track.add_observation(pose_index, x, u_right, y)
            track.current_estimate = estimate
            if lm_id in self.landmarks:
                self._add_stereo_factor(pose_index, lm_id, x, u_right, y)
                self.landmarks[lm_id] = estimate
            else:
                # second distinct pose: landmark becomes eligible
                for p_idx, ox, ou, oy in track.observations:
                    self._add_stereo_factor(p_idx, lm_id, ox, ou, oy)
                self.landmarks[lm_id] = estimate

    def _averaged_estimate(self, track: LandmarkTrack,
                           world: np.ndarray) -> np.ndarray:
        if track.n_poses_seen > 1 and track.last_optimized is None:
            # optimizer has not run since eligibility (stride > 1); average
            # against the current estimate instead of failing
            n = track.n_poses_seen
            return (n * track.current_estimate + world) / (n + 1.0)
        return update_landmark_estimate(track, world)

    def _unproject_obs(self, x: float, u_right: float, y: float) -> np.ndarray:
        from ..core import Keypoint2D, StereoMatch  # local to avoid cycle noise

        return unproject(StereoMatch(Keypoint2D(x, y), u_right), self.rig)

    def _add_stereo_factor(self, pose_index: int, lm_id: int, x: float,
                           u_right: float, y: float) -> None:
        key = (pose_index, lm_id)
        if key in self._factor_keys:
            raise ValidationError(
                f"duplicate stereo factor for pose {pose_index}, landmark {lm_id}"
            )
        self._factor_keys.add(key)
        self.stereo_factors.append(
            StereoFactor(pose_index, lm_id, np.array([x, u_right, y])))

    # -- bookkeeping --------------------------------------------------

    def validate(self) -> None:
        if self.gauge_prior is None:
            raise ValidationError("graph has no gauge prior on pose 0")
        counts: dict[int, int] = {}
        for f in self.stereo_factors:
            counts[f.landmark_id] = counts.get(f.landmark_id, 0) + 1
        for lm_id in self.landmarks:
            if counts.get(lm_id, 0) < 2:
                raise ValidationError(
                    f"landmark {lm_id} has fewer than two stereo factors"
                )
        for f in self.stereo_factors:
            if f.landmark_id not in self.landmarks:
                raise ValidationError(
                    f"stereo factor references unknown landmark {f.landmark_id}"
                )
            if not (0 <= f.pose_index < len(self.poses)):
                raise ValidationError(
                    f"stereo factor references unknown pose {f.pose_index}"
                )

    def apply_optimized(self, poses: list[PoseSE3],
                        landmarks: dict[int, np.ndarray]) -> None:
        self.poses = list(poses)
        self.landmarks = {k: np.array(v) for k, v in landmarks.items()}
        for lm_id, pos in self.landmarks.items():
            track = self.tracks.get(lm_id)
            if track is not None:
                track.last_optimized = np.array(pos)
                track.current_estimate = np.array(pos)
