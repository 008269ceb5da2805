"""Prior-guided sparse mixture-of-experts point cloud registration."""

__version__ = "0.1.0"

from .config import ExperimentConfig, default_config, load_config
from .geometry import (PointCloud, RegistrationMetrics, RigidTransform,
                       apply_transform, compute_metrics, weighted_procrustes)
from .prior import (PriorConfig, PriorCorrespondences, overlap_ratio_matrix,
                    select_prior_correspondences, simulate_prior_transform)
from .registration import RegistrationResult, lgr, register_pair
from .scenes import ScenePair, SceneConfig, SuperpointSet, generate_scene, voxel_downsample

__all__ = [
    "__version__",
    "ExperimentConfig", "default_config", "load_config",
    "PointCloud", "RegistrationMetrics", "RigidTransform",
    "apply_transform", "compute_metrics", "weighted_procrustes",
    "PriorConfig", "PriorCorrespondences", "overlap_ratio_matrix",
    "select_prior_correspondences", "simulate_prior_transform",
    "RegistrationResult", "lgr", "register_pair",
    "ScenePair", "SceneConfig", "SuperpointSet", "generate_scene", "voxel_downsample",
]
