"""Object-level stereo SLAM for row-structured agricultural scenes."""

__version__ = "0.1.0"

from .assoc import (
    AssocConfig,
    Assignment,
    NeighborSets,
    associate,
    build_neighbor_sets,
    cost_matrix,
    pair_cost,
    solve_lsap,
)
from .backend import (
    BackendConfig,
    FactorGraphProblem,
    LandmarkTrack,
    OptimizeResult,
    huber_weight,
    optimize,
    stereo_residual,
    update_landmark_estimate,
)
from .config import ConfigBundle, PipelineConfig, load_config, save_config
from .core import (
    CameraRig,
    DetectionFrame,
    Keypoint2D,
    ParseError,
    PointCloud3D,
    PoseSE3,
    StereoMatch,
    TrajectoryEstimate,
    ValidationError,
    compose,
    load_detection_sequence,
    write_detection_sequence,
)
from .geometry import (
    IcpConfig,
    TrackingFailure,
    estimate_relative_pose,
    project,
    unproject,
)
from .metrics import RunReport, ate_rmse, landmark_pr, max_distance_mapped
from .pipeline import SlamResult, run_slam
from .postprocess import (
    PostprocessConfig,
    dedupe,
    densify,
    read_ply,
    variance_filter,
    write_ply,
)
from .sim import GroundTruth, SimConfig, generate_scene, render_frame, simulate
