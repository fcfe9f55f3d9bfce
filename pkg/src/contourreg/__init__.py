"""Multi-view 2D/3D rigid registration of labeled bone meshes to X-ray contours."""
from __future__ import annotations

from ._kernels import BACKEND
from .calibration import CalibrationResult, blind_pnp, refine_pose_lm, solve_p3p
from .errors import AlgorithmError, ContourRegError, GeometryError
from .evaluation import (
    MetricReport,
    SweepResult,
    evaluate_pose,
    friedman_test,
    mrpd,
    one_sided_chamfer,
    precision_recall,
    robustness_sweep,
)
from .geometry import CameraIntrinsics, CameraView, RigidPose, project, project_points
from .mesh import LabeledMesh, extract_silhouette, read_ply, segment_principal_axis, write_ply
from .registration import RegistrationConfig, RegistrationReport, register, register_with_restart
from .scene import ContourObservation, Scene, load_scene, save_scene
from .synth import (
    CameraRingSpec,
    FiducialModel,
    NoiseSpec,
    PhantomSpec,
    build_phantom,
    generate_scene,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "AlgorithmError",
    "CalibrationResult",
    "CameraIntrinsics",
    "CameraRingSpec",
    "CameraView",
    "ContourObservation",
    "ContourRegError",
    "FiducialModel",
    "GeometryError",
    "LabeledMesh",
    "MetricReport",
    "NoiseSpec",
    "PhantomSpec",
    "RegistrationConfig",
    "RegistrationReport",
    "RigidPose",
    "Scene",
    "SweepResult",
    "blind_pnp",
    "build_phantom",
    "evaluate_pose",
    "extract_silhouette",
    "friedman_test",
    "generate_scene",
    "load_scene",
    "mrpd",
    "one_sided_chamfer",
    "precision_recall",
    "project",
    "project_points",
    "read_ply",
    "refine_pose_lm",
    "register",
    "register_with_restart",
    "robustness_sweep",
    "save_scene",
    "segment_principal_axis",
    "solve_p3p",
    "write_ply",
]
