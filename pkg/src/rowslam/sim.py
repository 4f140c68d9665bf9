"""Synthetic row-crop scene generator.

Stands in for the detection network: seeds are sampled inside ellipsoidal
panicle clusters placed along a row, a side-viewing stereo camera drives
past in a straight line, and each frame is rendered to noisy keypoint
detections with false positives/negatives. Ground-truth landmark ids ride
along on the true detections so association and mapping quality can be
scored exactly.

The world frame is the first camera frame: x along the row (image
horizontal), y down, z towards the plants. The camera stands off the row
at about one meter.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    CameraRig,
    DetectionFrame,
    Keypoint2D,
    PoseSE3,
    ValidationError,
    dedupe_keypoints,
    write_detection_sequence,
)

STANDOFF_DEPTH_M = 1.0
PANICLE_Y_JITTER_M = 0.15
# visible seeds sit on the camera-facing panicle shell, so their depth
# spread is shallow relative to the lateral spread
PANICLE_Z_JITTER_M = 0.02
MIN_SEED_SPACING_M = 0.004
DEPTH_RANGE_M = (0.2, 3.0)

_DEFAULT_RIG = dict(f=1600.0, cx=1024.0, cy=750.0, baseline_m=0.11,
                    width_px=2048, height_px=1500)


def default_rig() -> CameraRig:
    return CameraRig(**_DEFAULT_RIG)


@dataclass(frozen=True)
class SimConfig:
    range_length_m: float = 4.0
    n_panicles: int = 11
    seeds_per_panicle: int = 40
    panicle_spread_m: float = 0.05
    camera_speed_mps: float = 0.4
    frame_rate_hz: float = 5.0
    rig: CameraRig = field(default_factory=default_rig)
    pixel_noise_sigma_px: float = 1.0
    false_negative_rate: float = 0.10
    false_positive_rate_per_frame: float = 5.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.range_length_m < 0:
            raise ValidationError("range_length_m must be nonnegative")
        if self.frame_rate_hz <= 0:
            raise ValidationError("frame_rate_hz must be positive")
        if self.camera_speed_mps <= 0:
            raise ValidationError("camera_speed_mps must be positive")
        if not (0 <= self.false_negative_rate <= 1):
            raise ValidationError("false_negative_rate must be in [0, 1]")
        if self.false_positive_rate_per_frame < 0:
            raise ValidationError("false_positive_rate_per_frame must be >= 0")
        if self.pixel_noise_sigma_px < 0:
            raise ValidationError("pixel_noise_sigma_px must be >= 0")

    @property
    def frame_step_m(self) -> float:
        return self.camera_speed_mps / self.frame_rate_hz

    @property
    def n_frames(self) -> int:
        return int(math.floor(self.range_length_m / self.frame_step_m)) + 1

    def to_dict(self) -> dict:
        return {
            "range_length_m": self.range_length_m,
            "n_panicles": self.n_panicles,
            "seeds_per_panicle": self.seeds_per_panicle,
            "panicle_spread_m": self.panicle_spread_m,
            "camera_speed_mps": self.camera_speed_mps,
            "frame_rate_hz": self.frame_rate_hz,
            "rig": self.rig.to_dict(),
            "pixel_noise_sigma_px": self.pixel_noise_sigma_px,
            "false_negative_rate": self.false_negative_rate,
            "false_positive_rate_per_frame": self.false_positive_rate_per_frame,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        if "rig" in d:
            d["rig"] = CameraRig.from_dict(d["rig"])
        return cls(**d)


@dataclass
class GroundTruth:
    """Oracle for evaluation: true landmarks, poses, per-frame visibility."""

    landmark_positions: dict[int, np.ndarray]
    poses: list[PoseSE3]
    visible_ids: list[list[int]]
    config: SimConfig

    def trajectory_positions(self) -> np.ndarray:
        return np.stack([p.translation for p in self.poses])


def _sample_panicle(rng: np.random.Generator, center: np.ndarray,
                    spread: float, count: int) -> np.ndarray:
    """Uniform seed samples on the camera-facing panicle face, at least
    MIN_SEED_SPACING_M apart (rejection sampling).

    Lateral semi-axes are ``spread``; the sampled seeds share the
    panicle's depth. A detector only sees the seeds on the face of the
    panicle, and depth spread inside one cluster would make the relative
    keypoint geometry disagree between the two stereo views (disparity
    varies with depth), which the association cost does not model.
    Depth structure across the scene comes from per-panicle jitter.
    """
    semi = np.array([spread, spread, 0.0])
    pts: list[np.ndarray] = []
    attempts = 0
    max_attempts = 20000 * max(count, 1)
    while len(pts) < count:
        attempts += 1
        if attempts > max_attempts:
            raise ValidationError(
                f"cannot place {count} seeds {MIN_SEED_SPACING_M} m apart in a "
                f"{spread} m panicle; lower seeds_per_panicle or raise spread"
            )
        u = rng.uniform(-1.0, 1.0, size=3)
        if u @ u > 1.0:
            continue
        p = center + semi * u
        if all(np.linalg.norm(p - q) >= MIN_SEED_SPACING_M for q in pts):
            pts.append(p)
    return np.stack(pts) if pts else np.zeros((0, 3))


def _project_all(points: np.ndarray, pose: PoseSE3,
                 rig: CameraRig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Left (x, y), right (u, y) projections and depth for world points."""
    cam = (points - pose.translation) @ pose.rotation
    z = cam[:, 2]
    zs = np.where(z > 0, z, 1.0)
    lx = rig.f * cam[:, 0] / zs + rig.cx
    ly = rig.f * cam[:, 1] / zs + rig.cy
    rx = rig.f * (cam[:, 0] - rig.baseline_m) / zs + rig.cx
    left = np.column_stack([lx, ly])
    right = np.column_stack([rx, ly])
    return left, right, z


def generate_scene(cfg: SimConfig) -> GroundTruth:
    """Place panicles along the row and sample the camera trajectory.

    Deterministic for a fixed ``cfg.rng_seed``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, 0]))
    landmarks: dict[int, np.ndarray] = {}
    next_id = 0
    length = max(cfg.range_length_m, cfg.frame_step_m)
    for k in range(cfg.n_panicles):
        cx = (k + 0.5) / max(cfg.n_panicles, 1) * length
        cx += rng.uniform(-0.25, 0.25) * length / max(cfg.n_panicles, 1)
        cy = rng.uniform(-PANICLE_Y_JITTER_M, PANICLE_Y_JITTER_M)
        cz = STANDOFF_DEPTH_M + rng.uniform(-PANICLE_Z_JITTER_M, PANICLE_Z_JITTER_M)
        seeds = _sample_panicle(rng, np.array([cx, cy, cz]),
                                cfg.panicle_spread_m, cfg.seeds_per_panicle)
        for s in seeds:
            landmarks[next_id] = s
            next_id += 1

    poses = [PoseSE3.from_translation([i * cfg.frame_step_m, 0.0, 0.0])
             for i in range(cfg.n_frames)]

    ids = sorted(landmarks.keys())
    pts = np.stack([landmarks[i] for i in ids]) if ids else np.zeros((0, 3))
    visible: list[list[int]] = []
    rig = cfg.rig
    for pose in poses:
        if not ids:
            visible.append([])
            continue
        left, right, z = _project_all(pts, pose, rig)
        ok = ((z > DEPTH_RANGE_M[0]) & (z < DEPTH_RANGE_M[1])
              & (left[:, 0] >= 0) & (left[:, 0] < rig.width_px)
              & (left[:, 1] >= 0) & (left[:, 1] < rig.height_px)
              & (right[:, 0] >= 0) & (right[:, 0] < rig.width_px)
              & (right[:, 1] >= 0) & (right[:, 1] < rig.height_px))
        visible.append([ids[i] for i in np.flatnonzero(ok)])
    return GroundTruth(landmarks, poses, visible, cfg)


def render_frame(gt: GroundTruth, frame_index: int,
                 cfg: SimConfig | None = None) -> DetectionFrame:
    """Noisy detections of one frame, with ground-truth ids attached.

    Per-frame RNG streams are derived from (rng_seed, frame_index), so
    frames can be rendered in any order or in parallel with identical
    results.
    """
    cfg = cfg if cfg is not None else gt.config
    if not (0 <= frame_index < len(gt.poses)):
        raise ValidationError(f"frame_index {frame_index} outside trajectory")
    rng = np.random.default_rng(
        np.random.SeedSequence([cfg.rng_seed, 1, frame_index]))
    pose = gt.poses[frame_index]
    rig = cfg.rig
    ids = gt.visible_ids[frame_index]

    left_kps: list[Keypoint2D] = []
    right_kps: list[Keypoint2D] = []
    if ids:
        pts = np.stack([gt.landmark_positions[i] for i in ids])
        left, right, _ = _project_all(pts, pose, rig)
        sigma = cfg.pixel_noise_sigma_px
        noise_l = rng.normal(0.0, sigma, size=left.shape) if sigma > 0 else 0.0
        noise_r = rng.normal(0.0, sigma, size=right.shape) if sigma > 0 else 0.0
        left = left + noise_l
        right = right + noise_r
        drop_l = rng.uniform(size=len(ids)) < cfg.false_negative_rate
        drop_r = rng.uniform(size=len(ids)) < cfg.false_negative_rate
        for i, lm_id in enumerate(ids):
            if not drop_l[i] and rig.contains(left[i, 0], left[i, 1]):
                left_kps.append(Keypoint2D(float(left[i, 0]), float(left[i, 1]), lm_id))
            if not drop_r[i] and rig.contains(right[i, 0], right[i, 1]):
                right_kps.append(Keypoint2D(float(right[i, 0]), float(right[i, 1]), lm_id))

    for kps in (left_kps, right_kps):
        n_fp = rng.poisson(cfg.false_positive_rate_per_frame)
        for _ in range(n_fp):
            kps.append(Keypoint2D(float(rng.uniform(0, rig.width_px)),
                                  float(rng.uniform(0, rig.height_px)), None))

    return DetectionFrame(
        frame_index=frame_index,
        timestamp=frame_index / cfg.frame_rate_hz,
        left=dedupe_keypoints(left_kps),
        right=dedupe_keypoints(right_kps),
    )


def render_sequence(gt: GroundTruth) -> list[DetectionFrame]:
    return [render_frame(gt, i) for i in range(len(gt.poses))]


def simulate(cfg: SimConfig) -> tuple[list[DetectionFrame], GroundTruth]:
    gt = generate_scene(cfg)
    return render_sequence(gt), gt


# --------------------------------------------------------------------------
# Ground-truth sidecar file
# --------------------------------------------------------------------------

def write_ground_truth(gt: GroundTruth, path) -> None:
    obj = {
        "landmarks": {str(k): list(map(float, v))
                      for k, v in sorted(gt.landmark_positions.items())},
        "poses": [
            {"frame": i, "t": list(map(float, p.translation)),
             "R": [list(map(float, row)) for row in p.rotation]}
            for i, p in enumerate(gt.poses)
        ],
        "visible": {str(i): ids for i, ids in enumerate(gt.visible_ids)},
        "config": gt.config.to_dict(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, separators=(",", ":"))
        fh.write("\n")


def load_ground_truth(path) -> GroundTruth:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    landmarks = {int(k): np.array(v, dtype=float)
                 for k, v in obj["landmarks"].items()}
    poses = [PoseSE3(np.array(p["R"], dtype=float), np.array(p["t"], dtype=float))
             for p in sorted(obj["poses"], key=lambda p: p["frame"])]
    visible = [obj["visible"][str(i)] for i in range(len(poses))]
    cfg = SimConfig.from_dict(obj["config"])
    return GroundTruth(landmarks, poses, visible, cfg)


def write_simulation(cfg: SimConfig, detections_path, ground_truth_path) -> GroundTruth:
    frames, gt = simulate(cfg)
    write_detection_sequence(frames, detections_path)
    write_ground_truth(gt, ground_truth_path)
    return gt
