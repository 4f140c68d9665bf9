"""Final map densification and cleaning.

After optimization every detected left-image center is re-projected to a
world point: stereo-matched centers through their own disparity,
filtered/unmatched centers at the depth of their nearest stereo-matched
2D neighbor. The densified cloud is then thinned to physical seed size
and scrubbed of isolated points by the variance of nearest-neighbor
distances.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .core import (
    CameraRig,
    DetectionFrame,
    PointCloud3D,
    TrajectoryEstimate,
    ValidationError,
)
from .assoc import Assignment


@dataclass(frozen=True)
class PostprocessConfig:
    dedupe_radius_m: float = 0.004          # average sorghum seed size
    variance_neighbors: int = 5
    variance_threshold_m2: float = 1e-3
    fallback_depth: str = "nearest-stereo-neighbor"

    def __post_init__(self):
        if self.dedupe_radius_m <= 0:
            raise ValidationError("dedupe_radius_m must be positive")
        if self.variance_neighbors < 2:
            raise ValidationError("variance_neighbors must be >= 2")
        if self.variance_threshold_m2 <= 0:
            raise ValidationError("variance_threshold_m2 must be positive")
        if self.fallback_depth != "nearest-stereo-neighbor":
            raise ValidationError(
                f"unknown fallback_depth strategy {self.fallback_depth!r}")

    def to_dict(self) -> dict:
        return {
            "dedupe_radius_m": self.dedupe_radius_m,
            "variance_neighbors": self.variance_neighbors,
            "variance_threshold_m2": self.variance_threshold_m2,
            "fallback_depth": self.fallback_depth,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PostprocessConfig":
        return cls(**d)


@dataclass
class DensifyResult:
    cloud: PointCloud3D
    skipped: int = 0
    skipped_per_frame: dict[int, int] = field(default_factory=dict)


def densify(frames: list[DetectionFrame], matches: dict[int, Assignment],
            poses: TrajectoryEstimate, rig: CameraRig,
            cfg: PostprocessConfig) -> DensifyResult:
    """World-frame candidate point for every left-image center.

    ``matches`` maps frame index to that frame's stereo assignment
    (left index -> right index). Matched centers unproject through their
    own disparity; unmatched centers borrow the depth of the nearest
    matched center in the same image and keep their own ray. Frames with
    no stereo matches contribute nothing and their centers are counted
    as skipped.
    """
    pose_of = dict(zip(poses.frame_indices, poses.poses))
    pts: list[np.ndarray] = []
    skipped_per_frame: dict[int, int] = {}
    for fr in frames:
        pose = pose_of.get(fr.frame_index)
        if pose is None:
            # frames past a tracking failure have no pose estimate
            skipped_per_frame[fr.frame_index] = len(fr.left)
            continue
        assignment = matches.get(fr.frame_index)
        pairs = assignment.pairs if assignment is not None else []
        matched_xy = []
        matched_depth = []
        cam_pts: dict[int, np.ndarray] = {}
        for u_idx, v_idx, _cost in pairs:
            kp = fr.left[u_idx]
            d = kp.x - fr.right[v_idx].x
            if d <= 0:
                continue
            z = rig.baseline_m * rig.f / d
            p = np.array([(kp.x - rig.cx) * z / rig.f,
                          (kp.y - rig.cy) * z / rig.f, z])
            cam_pts[u_idx] = p
            matched_xy.append((kp.x, kp.y))
            matched_depth.append(z)
        if not cam_pts:
            skipped_per_frame[fr.frame_index] = len(fr.left)
            continue
        matched_xy = np.asarray(matched_xy)
        matched_depth = np.asarray(matched_depth)
        for i, kp in enumerate(fr.left):
            p = cam_pts.get(i)
            if p is None:
                d2 = ((matched_xy[:, 0] - kp.x) ** 2
                      + (matched_xy[:, 1] - kp.y) ** 2)
                z = float(matched_depth[int(np.argmin(d2))])
                p = np.array([(kp.x - rig.cx) * z / rig.f,
                              (kp.y - rig.cy) * z / rig.f, z])
            pts.append(pose.apply(p))
    cloud = PointCloud3D(np.stack(pts) if pts else np.zeros((0, 3)), frame="world")
    return DensifyResult(cloud=cloud, skipped=sum(skipped_per_frame.values()),
                         skipped_per_frame=skipped_per_frame)


class _SpatialGrid:
    """Uniform grid for exact radius queries during greedy dedupe."""

    def __init__(self, cell: float):
        self.cell = cell
        self.cells: dict[tuple[int, int, int], list[np.ndarray]] = {}

    def _key(self, p: np.ndarray) -> tuple[int, int, int]:
        return tuple(np.floor(p / self.cell).astype(int))

    def any_within(self, p: np.ndarray, radius: float) -> bool:
        kx, ky, kz = self._key(p)
        r2 = radius * radius
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for q in self.cells.get((kx + dx, ky + dy, kz + dz), ()):
                        diff = p - q
                        if diff @ diff < r2:
                            return True
        return False

    def insert(self, p: np.ndarray) -> None:
        self.cells.setdefault(self._key(p), []).append(p)


_BRUTE_FORCE_LIMIT = 2000


def dedupe(points: PointCloud3D, cfg: PostprocessConfig) -> PointCloud3D:
    """Greedy thinning in input order: a point is kept iff no
    already-kept point lies within ``dedupe_radius_m``."""
    pts = points.points
    radius = cfg.dedupe_radius_m
    kept: list[np.ndarray] = []
    if len(pts) <= _BRUTE_FORCE_LIMIT:
        kept_arr = np.zeros((0, 3))
        for p in pts:
            if len(kept_arr) == 0 or (((kept_arr - p) ** 2).sum(axis=1).min()
                                      >= radius * radius):
                kept.append(p)
                kept_arr = np.vstack([kept_arr, p[None, :]])
    else:
        grid = _SpatialGrid(cell=2.0 * radius)
        for p in pts:
            if not grid.any_within(p, radius):
                kept.append(p)
                grid.insert(p)
    return PointCloud3D(np.stack(kept) if kept else np.zeros((0, 3)),
                        frame=points.frame)


def variance_filter(points: PointCloud3D, cfg: PostprocessConfig) -> PointCloud3D:
    """Drop points whose N nearest-neighbor distances vary too much.

    The population variance of the distances to the
    ``cfg.variance_neighbors`` nearest neighbors is computed against the
    input cloud for every point; points above
    ``cfg.variance_threshold_m2`` are removed in a single pass.
    """
    pts = points.points
    n = cfg.variance_neighbors
    if len(pts) <= n:
        warnings.warn(
            f"variance_filter: only {len(pts)} points for {n} neighbors; "
            "returning input unchanged", RuntimeWarning, stacklevel=2)
        return points
    tree = cKDTree(pts)
    dists, _ = tree.query(pts, k=n + 1)  # first neighbor is the point itself
    var = dists[:, 1:].var(axis=1)
    keep = var <= cfg.variance_threshold_m2
    return PointCloud3D(pts[keep], frame=points.frame)


def write_ply(cloud: PointCloud3D, path) -> None:
    """ASCII PLY export, coordinates in meters."""
    pts = cloud.points
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("ply\n")
        fh.write("format ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\n")
        fh.write("property float x\n")
        fh.write("property float y\n")
        fh.write("property float z\n")
        fh.write("end_header\n")
        for p in pts:
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")


def read_ply(path) -> PointCloud3D:
    """Read the ASCII PLY subset written by :func:`write_ply`."""
    with open(path, "r", encoding="utf-8") as fh:
        line = fh.readline().strip()
        if line != "ply":
            raise ValidationError(f"{path}: not a PLY file")
        n_vertex = None
        while True:
            line = fh.readline()
            if not line:
                raise ValidationError(f"{path}: unterminated PLY header")
            line = line.strip()
            if line.startswith("element vertex"):
                n_vertex = int(line.split()[-1])
            if line == "end_header":
                break
        if n_vertex is None:
            raise ValidationError(f"{path}: missing vertex element")
        pts = np.zeros((n_vertex, 3))
        for i in range(n_vertex):
            parts = fh.readline().split()
            pts[i] = [float(parts[0]), float(parts[1]), float(parts[2])]
    return PointCloud3D(pts, frame="world")
