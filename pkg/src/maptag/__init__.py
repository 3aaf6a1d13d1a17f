"""Square fiducial tag localization on intensity point cloud maps."""

from .cloud import IntensityCloud, SpatialIndex, load_pcd, save_pcd
from .cluster import ObbCandidate, compute_obb, euclidean_cluster
from .decoder import (TagDictionary, builtin_dictionary, decode_image,
                      generate_dictionary)
from .errors import MapTagError
from .filtering import TagGeometry, extract_buffered, filter_candidates
from .geometry import RigidTransform
from .gradient import DownsampleParams, downsample_by_gradient
from .pipeline import PipelineConfig, run_baseline, run_pipeline
from .pose import TagDetection, assemble_detection, solve_pose_svd
from .reproject import render_intensity_image, reproject_candidate
from .synth import SceneSpec, evaluate, synth_scene

__version__ = "0.1.0"

__all__ = [
    "IntensityCloud", "SpatialIndex", "load_pcd", "save_pcd",
    "ObbCandidate", "compute_obb", "euclidean_cluster",
    "TagDictionary", "builtin_dictionary", "decode_image",
    "generate_dictionary", "MapTagError", "TagGeometry",
    "extract_buffered", "filter_candidates", "RigidTransform",
    "DownsampleParams", "downsample_by_gradient", "PipelineConfig",
    "run_baseline", "run_pipeline", "TagDetection", "assemble_detection",
    "solve_pose_svd", "render_intensity_image", "reproject_candidate",
    "SceneSpec", "evaluate", "synth_scene",
]
