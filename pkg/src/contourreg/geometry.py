"""Rigid transforms, pinhole projection and pose parametrization.

Conventions
-----------
* A :class:`RigidPose` maps points ``X`` to ``R @ X + t``. Model poses map the
  mesh (CT) frame to the world frame; view extrinsics map world to camera.
* Euler angles ``(phi, theta, psi)`` are intrinsic Z-Y-X in degrees, i.e.
  ``R = Rz(phi) @ Ry(theta) @ Rx(psi)``. They are only used for I/O and for
  building perturbations; the optimizer works on axis-angle increments.
* Camera frame: +z along the optical axis, image u along +x, v along +y.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from . import _kernels
from .errors import GeometryError, NonPositiveDepth

MIN_DEPTH_MM = 1e-9

# Detector of the reference C-arm: 976 x 976 px over 296.7 x 296.7 mm.
IMAGE_SIZE_PX = 976
DETECTOR_SIZE_MM = 296.7
PIXEL_PITCH_MM = DETECTOR_SIZE_MM / IMAGE_SIZE_PX


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RigidPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(3)
        if R.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {R.shape}")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidPose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> RigidPose:
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        """Transform a point or an (N, 3) array of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> RigidPose:
        Rt = self.rotation.T
        return RigidPose(Rt, -Rt @ self.translation)

    def euler(self) -> tuple[float, float, float]:
        """Intrinsic Z-Y-X angles (phi, theta, psi) in degrees."""
        phi, theta, psi = Rotation.from_matrix(self.rotation).as_euler("ZYX", degrees=True)
        return float(phi), float(theta), float(psi)

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(
            np.all(np.isfinite(R))
            and np.all(np.isfinite(self.translation))
            and np.max(np.abs(R.T @ R - np.eye(3))) <= tol
            and abs(np.linalg.det(R) - 1.0) <= tol
        )

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> RigidPose:
        return cls(np.asarray(d["rotation"], dtype=np.float64), np.asarray(d["translation"], dtype=np.float64))

    def allclose(self, other: RigidPose, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_px: float
    principal_point: tuple[float, float]
    pixel_pitch: float = PIXEL_PITCH_MM
    image_size: tuple[int, int] = (IMAGE_SIZE_PX, IMAGE_SIZE_PX)

    def __post_init__(self):
        if not self.focal_px > 0:
            raise GeometryError("focal_px must be positive")
        if not self.pixel_pitch > 0:
            raise GeometryError("pixel_pitch must be positive")
        object.__setattr__(self, "principal_point", tuple(float(c) for c in self.principal_point))
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))

    @property
    def source_to_detector_mm(self) -> float:
        return self.focal_px * self.pixel_pitch

    def px_to_mm(self, d_px):
        return np.asarray(d_px) * self.pixel_pitch

    def to_dict(self) -> dict:
        return {
            "focal_px": self.focal_px,
            "principal_point": list(self.principal_point),
            "pixel_pitch": self.pixel_pitch,
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> CameraIntrinsics:
        return cls(
            focal_px=float(d["focal_px"]),
            principal_point=tuple(d["principal_point"]),
            pixel_pitch=float(d.get("pixel_pitch", PIXEL_PITCH_MM)),
            image_size=tuple(d.get("image_size", (IMAGE_SIZE_PX, IMAGE_SIZE_PX))),
        )


@dataclass(frozen=True, eq=False)
class CameraView:
    """One calibrated X-ray image: intrinsics plus world->camera extrinsic."""

    intrinsics: CameraIntrinsics
    extrinsic: RigidPose
    view_id: str
    # distance from the source to the imaged anatomy; enables object-plane mm
    source_to_object_mm: float | None = field(default=None)

    @property
    def center(self) -> np.ndarray:
        """Camera (X-ray source) position in world coordinates."""
        return self.extrinsic.inverse().translation

    def mm_per_px_at_object(self) -> float:
        k = self.intrinsics
        if self.source_to_object_mm is None:
            return k.pixel_pitch
        return k.pixel_pitch * self.source_to_object_mm / k.source_to_detector_mm

    def to_dict(self) -> dict:
        d = {
            "id": self.view_id,
            "intrinsics": self.intrinsics.to_dict(),
            "extrinsic": self.extrinsic.to_dict(),
        }
        if self.source_to_object_mm is not None:
            d["source_to_object_mm"] = self.source_to_object_mm
        return d


def project_points(points, view: CameraView, pose: RigidPose | None = None) -> np.ndarray:
    """Project (N, 3) world points (or model points under ``pose``) to pixels.

    Raises NonPositiveDepth if any point lies on or behind the source plane.
    """
    X = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    E = view.extrinsic
    if pose is not None:
        E = compose(E, pose)
    k = view.intrinsics
    uv, zmin = _kernels.project(
        X, E.rotation, E.translation, k.focal_px, k.principal_point[0], k.principal_point[1]
    )
    if X.shape[0] and zmin <= MIN_DEPTH_MM:
        raise NonPositiveDepth(f"point at camera depth {zmin:.3g} mm in view {view.view_id!r}")
    return uv


def project(point, view: CameraView) -> np.ndarray:
    """Pinhole projection of a single world point to pixel coordinates."""
    return project_points(np.asarray(point, dtype=np.float64)[None, :], view)[0]


def compose(pose_a: RigidPose, pose_b: RigidPose) -> RigidPose:
    """Pose that applies ``pose_b`` first, then ``pose_a``."""
    return RigidPose(
        pose_a.rotation @ pose_b.rotation,
        pose_a.rotation @ pose_b.translation + pose_a.translation,
    )


def inverse(pose: RigidPose) -> RigidPose:
    return pose.inverse()


def euler_matrix(phi: float, theta: float, psi: float) -> np.ndarray:
    return Rotation.from_euler("ZYX", [phi, theta, psi], degrees=True).as_matrix()


def euler_to_pose(phi: float, theta: float, psi: float, t=(0.0, 0.0, 0.0)) -> RigidPose:
    """Pose from intrinsic Z-Y-X Euler angles (degrees) and a translation (mm).

    ``psi`` rotates about the body x axis; meshes built by this package put
    their first principal axis along x, so ``psi`` spins about that axis.
    """
    return RigidPose(euler_matrix(phi, theta, psi), np.asarray(t, dtype=np.float64))


def rotvec_matrix(rotvec) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix()


def axis_angle_matrix(axis, angle_deg: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return rotvec_matrix(axis * np.deg2rad(angle_deg))


def apply_increment(pose: RigidPose, delta, pivot=None) -> RigidPose:
    """Left-compose a local 6-vector increment (axis-angle rad, translation mm).

    The rotation part turns about ``pivot`` (output-frame point, default the
    origin), which keeps rotational and translational columns of the Jacobian
    decoupled when the pivot sits at the centroid of the data.
    """
    delta = np.asarray(delta, dtype=np.float64)
    dR = rotvec_matrix(delta[:3])
    c = np.zeros(3) if pivot is None else np.asarray(pivot, dtype=np.float64)
    return RigidPose(dR @ pose.rotation, dR @ (pose.translation - c) + c + delta[3:])


def rotate_about(pose: RigidPose, R_body: np.ndarray, pivot_model) -> RigidPose:
    """Pre-rotate the model by ``R_body`` about a model-frame pivot, then apply ``pose``."""
    c = np.asarray(pivot_model, dtype=np.float64)
    inner = RigidPose(R_body, c - R_body @ c)
    return compose(pose, inner)


def perturb_pose(pose: RigidPose, offset6, pivot_model) -> RigidPose:
    """Initial pose offset from ``pose`` by ``(tx, ty, tz, phi, theta, psi)``.

    The Euler rotation is applied in the model frame about ``pivot_model``;
    the translation then moves the posed pivot in world coordinates.
    """
    tx, ty, tz, phi, theta, psi = (float(v) for v in offset6)
    rotated = rotate_about(pose, euler_matrix(phi, theta, psi), pivot_model)
    return RigidPose(rotated.rotation, rotated.translation + np.array([tx, ty, tz]))


def rotation_angle_deg(R_a: np.ndarray, R_b: np.ndarray) -> float:
    """Geodesic angle between two rotations."""
    c = (np.trace(R_a.T @ R_b) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def look_at(center, target, up) -> RigidPose:
    """World->camera extrinsic for a source at ``center`` aimed at ``target``."""
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    if np.linalg.norm(x) < 1e-12:
        raise GeometryError("up vector parallel to the viewing direction")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return RigidPose(R, -R @ center)
