"""Shared domain types and detection-stream I/O.

Conventions used throughout the package:

- Image coordinates are subpixel floats, x to the right, y down, origin at
  the top-left corner.
- Camera frame: x right, y down, z forward (into the scene). Depth is z.
- A pose maps camera coordinates to world coordinates:
  ``p_world = R @ p_cam + t``. The world frame is anchored at the first
  camera pose of a sequence.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

ORTHONORMALITY_TOL = 1e-9


class ValidationError(ValueError):
    """Input violates a documented invariant."""


class ParseError(ValueError):
    """A detection file line could not be parsed."""


@dataclass(frozen=True)
class Keypoint2D:
    """A detected 2D object center. ``id`` is a ground-truth label when the
    point comes from the simulator, None for ingested real detections."""

    x: float
    y: float
    id: int | None = None


@dataclass
class DetectionFrame:
    """Keypoint sets for one stereo frame (left image and right image)."""

    frame_index: int
    timestamp: float
    left: list[Keypoint2D]
    right: list[Keypoint2D]


@dataclass(frozen=True)
class CameraRig:
    """Pinhole intrinsics shared by both stereo cameras, plus the baseline."""

    f: float
    cx: float
    cy: float
    baseline_m: float
    width_px: int
    height_px: int

    def __post_init__(self):
        if self.f <= 0:
            raise ValidationError(f"focal length must be positive, got {self.f}")
        if self.baseline_m <= 0:
            raise ValidationError(f"baseline must be positive, got {self.baseline_m}")
        if not (0 < self.cx < self.width_px):
            raise ValidationError(f"cx={self.cx} outside (0, {self.width_px})")
        if not (0 < self.cy < self.height_px):
            raise ValidationError(f"cy={self.cy} outside (0, {self.height_px})")

    def contains(self, x: float, y: float) -> bool:
        return 0.0 <= x < self.width_px and 0.0 <= y < self.height_px

    def to_dict(self) -> dict:
        return {
            "f": self.f,
            "cx": self.cx,
            "cy": self.cy,
            "baseline_m": self.baseline_m,
            "width_px": self.width_px,
            "height_px": self.height_px,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraRig":
        return cls(**d)


@dataclass(frozen=True)
class StereoMatch:
    """A left keypoint paired with the x coordinate of its match in the
    right image. Disparity must be positive (point in front of the rig)."""

    left: Keypoint2D
    u_right: float
    cost: float = 0.0

    def __post_init__(self):
        if self.disparity <= 0:
            raise ValidationError(
                f"non-positive disparity {self.disparity} for keypoint "
                f"({self.left.x}, {self.left.y})"
            )

    @property
    def disparity(self) -> float:
        return self.left.x - self.u_right


class PoseSE3:
    """Rigid transform, camera frame to world frame."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation: np.ndarray, translation: np.ndarray):
        rotation = np.asarray(rotation, dtype=float).reshape(3, 3)
        translation = np.asarray(translation, dtype=float).reshape(3)
        err = np.abs(rotation.T @ rotation - np.eye(3)).max()
        if err > ORTHONORMALITY_TOL:
            raise ValidationError(f"rotation not orthonormal (max error {err:.2e})")
        det = np.linalg.det(rotation)
        if abs(det - 1.0) > ORTHONORMALITY_TOL:
            raise ValidationError(f"rotation determinant {det} != 1")
        rotation.flags.writeable = False
        translation.flags.writeable = False
        self.rotation = rotation
        self.translation = translation

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, t) -> "PoseSE3":
        return cls(np.eye(3), np.asarray(t, dtype=float))

    def inverse(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform camera-frame points (..., 3) into the world frame."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __repr__(self):
        t = self.translation
        return f"PoseSE3(t=[{t[0]:.4f}, {t[1]:.4f}, {t[2]:.4f}])"


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """Chain two transforms: the result maps through ``b`` then ``a``."""
    return PoseSE3(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


@dataclass
class PointCloud3D:
    """3D points plus the coordinate frame they live in."""

    points: np.ndarray
    frame: str = "camera"  # "camera" (z forward, at one timestep) or "world"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValidationError("point cloud contains non-finite coordinates")
        if self.frame == "camera" and len(self.points) and np.any(self.points[:, 2] <= 0):
            raise ValidationError("camera-frame cloud has points with z <= 0")
        if self.frame not in ("camera", "world"):
            raise ValidationError(f"unknown frame tag {self.frame!r}")

    def __len__(self):
        return len(self.points)


@dataclass
class TrajectoryEstimate:
    """Optimized camera poses, one per processed frame."""

    frame_indices: list[int] = field(default_factory=list)
    poses: list[PoseSE3] = field(default_factory=list)

    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.stack([p.translation for p in self.poses])

    def __len__(self):
        return len(self.poses)


# --------------------------------------------------------------------------
# Detection sequence files (JSON Lines, one frame per line)
# --------------------------------------------------------------------------

MIN_KEYPOINT_SEPARATION_PX = 1.0


def _keypoint_from_obj(obj: dict, frame: int, index: int, side: str,
                       rig: CameraRig | None) -> Keypoint2D:
    try:
        x = float(obj["x"])
        y = float(obj["y"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(
            f"frame {frame}: {side} keypoint {index} malformed: {exc}"
        ) from exc
    kp_id = obj.get("id")
    if kp_id is not None:
        kp_id = int(kp_id)
    if x < 0 or y < 0:
        raise ValidationError(
            f"frame {frame}: {side} keypoint {index} has negative coordinate "
            f"({x}, {y})"
        )
    if rig is not None and not rig.contains(x, y):
        raise ValidationError(
            f"frame {frame}: {side} keypoint {index} at ({x}, {y}) outside "
            f"{rig.width_px}x{rig.height_px} image"
        )
    return Keypoint2D(x, y, kp_id)


def dedupe_keypoints(kps: list[Keypoint2D],
                     min_sep: float = MIN_KEYPOINT_SEPARATION_PX) -> list[Keypoint2D]:
    """Drop keypoints closer than ``min_sep`` pixels to an earlier one."""
    kept: list[Keypoint2D] = []
    for kp in kps:
        if all(math.hypot(kp.x - k.x, kp.y - k.y) >= min_sep for k in kept):
            kept.append(kp)
    return kept


def load_detection_sequence(path, rig: CameraRig | None = None) -> list[DetectionFrame]:
    """Read a JSON-Lines detection file.

    Frames are returned sorted by frame index. Keypoints must be
    nonnegative and, when ``rig`` is given, inside its image bounds.
    Keypoints closer than one pixel to an earlier one in the same image
    are dropped.
    """
    frames: list[DetectionFrame] = []
    seen: set[int] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: invalid JSON: {exc.msg}") from exc
            try:
                idx = int(obj["frame"])
                t = float(obj["t"])
                left_raw = obj["left"]
                right_raw = obj["right"]
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"line {lineno}: missing or malformed field: {exc}") from exc
            if idx < 0:
                raise ValidationError(f"line {lineno}: negative frame index {idx}")
            if idx in seen:
                raise ValidationError(f"duplicate frame_index {idx} (line {lineno})")
            seen.add(idx)
            left = [_keypoint_from_obj(o, idx, i, "left", rig)
                    for i, o in enumerate(left_raw)]
            right = [_keypoint_from_obj(o, idx, i, "right", rig)
                     for i, o in enumerate(right_raw)]
            frames.append(DetectionFrame(idx, t, dedupe_keypoints(left),
                                         dedupe_keypoints(right)))
    frames.sort(key=lambda f: f.frame_index)
    return frames


def _keypoint_to_obj(kp: Keypoint2D) -> dict:
    return {"x": kp.x, "y": kp.y, "id": kp.id}


def write_detection_sequence(frames: list[DetectionFrame], path) -> None:
    """Write frames in the canonical one-object-per-line format."""
    with open(path, "w", encoding="utf-8") as fh:
        for fr in sorted(frames, key=lambda f: f.frame_index):
            obj = {
                "frame": fr.frame_index,
                "t": fr.timestamp,
                "left": [_keypoint_to_obj(k) for k in fr.left],
                "right": [_keypoint_to_obj(k) for k in fr.right],
            }
            fh.write(json.dumps(obj, separators=(",", ":")))
            fh.write("\n")
