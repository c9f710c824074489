"""Monocular object SLAM: binary bag-of-words recognition over a large object
database plus a joint bundle-adjustment back-end that recovers camera poses,
object poses and the global map scale. Bag-of-words vectors are plain dicts
mapping word id to weight."""

from .backend import (
    AnchorPoint,
    BAConfig,
    BASummary,
    Keyframe,
    MapPoint,
    MapState,
    ObjectInstance,
    accumulate,
    alignment_jacobians,
    alignment_residual,
    associate_observation,
    estimate_instance_scale,
    estimate_scale,
    huber,
    joint_bundle_adjust,
    level_sigma2,
    local_bundle_adjust,
    object_pose_prior,
    read_map_dump,
    reprojection_jacobians,
    reprojection_residual,
    try_triangulate,
    write_map_dump,
)
from .config import Config, read_config, write_config
from .database import (
    Candidate,
    Correspondence,
    ObjectDatabase,
    ObjectModel,
    alt_score,
    build_object_model,
    kl_score,
    load_database,
    read_model_file,
    save_database,
    write_model_file,
)
from .errors import ObjSlamError
from .evaluate import EvalReport, evaluate, report_text, write_report
from .geometry import (
    CameraIntrinsics,
    Pose,
    SimilarityTransform,
    cam_project,
    cam_unproject,
    horn_align,
    parallax_deg,
    project_points,
    read_trajectory,
    solve_pnp,
    triangulate_point,
    triangulate_rays,
    write_trajectory,
)
from .pipeline import PipelineResult, run_pipeline
from .recognition import (
    Frame,
    Observation,
    PriorPose,
    Region,
    compute_prior_pose,
    detect_with_priors,
    disac_sample,
    disac_verify,
    general_retrieval,
    quantize_frame,
    quick_shift_regions,
    refine_pose,
    s_disac,
    verify_candidates,
)
from .scene import GroundTruth, Scene, generate_scene, write_scene
from .vocab import (
    NodePath,
    VocabularyTree,
    build_vocabulary,
    hamming,
    load_vocabulary,
    save_vocabulary,
    to_bow,
)

__version__ = "0.1.0"
