"""Differentiable structure and motion from a frame pair.

Depth, motion masks and rigid motions of the camera and up to K objects are
optimized directly against a photometric objective, using a small
reverse-mode autodiff engine over numpy.
"""

from .autodiff import Tensor, finite_diff_grad, value_and_grad
from .geometry import CameraIntrinsics, FlowField, RigidMotion, backproject, compute_flow, project, rotation_from_sines
from .losses import (ConfigurationError, DepthSupervision, LossWeights, Observations, PairEstimate, PoseSupervision,
                     pose_error, total_loss)
from .metrics import EvalReport, endpoint_error, mask_iou, relative_pose_error, scale_invariant_log_rmse
from .solver import ProblemState, SolverConfig, SolverError, optimize
from .synth import SceneSpec, generate_scene, standard_suite
from .warping import bilinear_sample, inverse_warp

__all__ = [
    "Tensor", "value_and_grad", "finite_diff_grad",
    "CameraIntrinsics", "FlowField", "RigidMotion", "backproject", "compute_flow", "project", "rotation_from_sines",
    "ConfigurationError", "DepthSupervision", "LossWeights", "Observations", "PairEstimate", "PoseSupervision",
    "pose_error", "total_loss",
    "EvalReport", "endpoint_error", "mask_iou", "relative_pose_error", "scale_invariant_log_rmse",
    "ProblemState", "SolverConfig", "SolverError", "optimize",
    "SceneSpec", "generate_scene", "standard_suite",
    "bilinear_sample", "inverse_warp",
]
