"""Stereo camera geometry and the translation-only pose estimator.

The relative motion between consecutive frames is recovered from two
camera-frame point clouds with known correspondences. Because the robot
travels a row in a straight line, rotation is constrained to identity and
the closed-form translation is projected onto the known motion direction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CameraRig, PointCloud3D, PoseSE3, StereoMatch, ValidationError


class DegenerateDisparityError(ValueError):
    """Disparity is zero/negative or below the reliability floor."""


class BehindCameraError(ValueError):
    """A point with z <= 0 cannot be projected."""


class TrackingFailure(Exception):
    """The pose estimator cannot produce a trustworthy motion estimate.

    ``reason`` is one of ``"too_few_matches"`` / ``"translation_bound"``
    and feeds the maximum-distance-mapped metric.
    """

    def __init__(self, reason: str, message: str):
        super().__init__(message)
        self.reason = reason


@dataclass(frozen=True)
class IcpConfig:
    """Configuration of the translation-only registration step.

    ``motion_direction`` is the unit axis (in the frame of the input
    clouds) onto which the recovered translation is orthogonally
    projected; with the world frame anchored at the first camera pose of
    a straight-line row traversal this is the image-horizontal x axis.
    """

    motion_direction: tuple[float, float, float] = (1.0, 0.0, 0.0)
    min_correspondences: int = 5
    max_translation_m: float = 0.5

    def __post_init__(self):
        d = np.asarray(self.motion_direction, dtype=float)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValidationError(f"motion_direction not unit length: {d}")
        if self.min_correspondences < 3:
            raise ValidationError("min_correspondences must be >= 3")
        if self.max_translation_m <= 0:
            raise ValidationError("max_translation_m must be positive")

    def to_dict(self) -> dict:
        return {
            "motion_direction": list(self.motion_direction),
            "min_correspondences": self.min_correspondences,
            "max_translation_m": self.max_translation_m,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IcpConfig":
        d = dict(d)
        if "motion_direction" in d:
            d["motion_direction"] = tuple(d["motion_direction"])
        return cls(**d)


MIN_DISPARITY_PX = 0.1


def unproject(m: StereoMatch, rig: CameraRig,
              min_disparity_px: float = MIN_DISPARITY_PX) -> np.ndarray:
    """Camera-frame 3D point of a stereo match.

    Depth is baseline * focal / disparity; x and y follow from the
    pinhole model at that depth.
    """
    d = m.disparity
    if d <= 0:
        raise DegenerateDisparityError(f"disparity {d} <= 0")
    if d < min_disparity_px:
        raise DegenerateDisparityError(
            f"disparity {d:.4f} px below reliability floor {min_disparity_px}"
        )
    z = rig.baseline_m * rig.f / d
    x = (m.left.x - rig.cx) * z / rig.f
    y = (m.left.y - rig.cy) * z / rig.f
    return np.array([x, y, z])


def project(point: np.ndarray, rig: CameraRig) -> tuple[float, float, float]:
    """Project a camera-frame point to (x, y, u_right) pixels."""
    x, y, z = np.asarray(point, dtype=float).reshape(3)
    if z <= 0:
        raise BehindCameraError(f"point has z = {z} <= 0")
    px = rig.f * x / z + rig.cx
    py = rig.f * y / z + rig.cy
    pu = rig.f * (x - rig.baseline_m) / z + rig.cx
    return px, py, pu


def project_direction(direction, translation: np.ndarray) -> np.ndarray:
    """Orthogonal projection of ``translation`` onto the unit ``direction``."""
    d = np.asarray(direction, dtype=float)
    return float(translation @ d) * d


def estimate_relative_pose(prev: PointCloud3D, curr: PointCloud3D,
                           correspondences, cfg: IcpConfig,
                           direction=None) -> PoseSE3:
    """Relative pose between consecutive frames from corresponding points.

    With rotation fixed to identity the least-squares alignment of the
    current cloud onto the previous one is the mean of ``prev - curr``
    over the corresponding pairs (points shift opposite to the camera, so
    this is the camera displacement). The mean is then projected onto the
    motion direction. The returned pose right-composes:
    ``pose_t = compose(pose_{t-1}, returned)``.

    ``direction`` overrides ``cfg.motion_direction`` when the caller has
    rotated the world-frame prior into the cloud frame.
    """
    pairs = np.asarray(list(correspondences), dtype=int).reshape(-1, 2)
    if len(pairs) < cfg.min_correspondences:
        raise TrackingFailure(
            "too_few_matches",
            f"{len(pairs)} correspondences < minimum {cfg.min_correspondences}",
        )
    p = prev.points[pairs[:, 0]]
    q = curr.points[pairs[:, 1]]
    t_full = (p - q).mean(axis=0)
    if direction is None:
        direction = cfg.motion_direction
    t = project_direction(direction, t_full)
    norm = float(np.linalg.norm(t))
    if norm > cfg.max_translation_m:
        raise TrackingFailure(
            "translation_bound",
            f"translation {norm:.3f} m exceeds bound {cfg.max_translation_m} m",
        )
    return PoseSE3.from_translation(t)
