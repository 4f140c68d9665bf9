"""Factor-graph backend: graph construction, robust batch optimization."""

from .graph import (
    BackendConfig,
    FactorGraphProblem,
    LandmarkTrack,
    MotionFactor,
    SequencingError,
    StereoFactor,
    huber_cost,
    huber_weight,
    stereo_jacobians,
    stereo_residual,
    transform_to_camera,
    update_landmark_estimate,
)
from .solver import (
    DivergenceError,
    OptimizeResult,
    UnderConstrainedError,
    optimize,
)

__all__ = [
    "BackendConfig",
    "FactorGraphProblem",
    "LandmarkTrack",
    "MotionFactor",
    "SequencingError",
    "StereoFactor",
    "huber_cost",
    "huber_weight",
    "stereo_jacobians",
    "stereo_residual",
    "transform_to_camera",
    "update_landmark_estimate",
    "DivergenceError",
    "OptimizeResult",
    "UnderConstrainedError",
    "optimize",
]
