"""View calibration from fiducial bead detections.

``blind_pnp`` recovers the fiducial->camera pose when the correspondence
between detected bead centres and model beads is unknown. Minimal
assignments (three detections, three beads) are solved with a known-focal
P3P solver and scored by the number of mutual-nearest reprojection inliers;
the winner is refined by Levenberg-Marquardt on its inliers.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import CollinearPoints, InsufficientDetections, NoRealSolution, NoValidPose, NonPositiveDepth
from .geometry import CameraIntrinsics, CameraView, RigidPose, compose, project_points
from .lm import levenberg_marquardt
from .synth import FiducialModel

INLIER_THRESH_PX = 0.8
EXHAUSTIVE_MAX_DETECTIONS = 12
SAMPLED_HYPOTHESES = 200_000
P3P_REPROJ_TOL_PX = 1e-6
MAX_REFINE_ROUNDS = 10


@dataclass
class CalibrationResult:
    pose: RigidPose  # fiducial -> camera
    matching: list  # (detection index, bead id), sorted by detection index
    inlier_count: int
    mean_reproj_err_px: float
    hypotheses_tested: int = 0

    def to_dict(self) -> dict:
        return {
            "pose": self.pose.to_dict(),
            "matching": [[int(i), int(b)] for i, b in self.matching],
            "inlier_count": self.inlier_count,
            "mean_reproj_err_px": self.mean_reproj_err_px,
            "hypotheses_tested": self.hypotheses_tested,
        }


def _camera(intrinsics: CameraIntrinsics) -> CameraView:
    return CameraView(intrinsics, RigidPose.identity(), "calibration")


def bearings(uv, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Unit viewing rays (camera frame) through pixel coordinates."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    cx, cy = intrinsics.principal_point
    r = np.column_stack([(uv[:, 0] - cx) / intrinsics.focal_px, (uv[:, 1] - cy) / intrinsics.focal_px, np.ones(len(uv))])
    return r / np.linalg.norm(r, axis=1, keepdims=True)


def _reproj(pose: RigidPose, X, uv, intrinsics) -> np.ndarray:
    try:
        return np.linalg.norm(project_points(X, _camera(intrinsics), pose) - uv, axis=1)
    except NonPositiveDepth:
        return np.full(len(uv), np.inf)


def solve_p3p(corr, intrinsics: CameraIntrinsics) -> list[RigidPose]:
    """All poses (up to 4) consistent with three 2D-3D correspondences.

    ``corr`` is a sequence of three ``(uv_px, xyz_mm)`` pairs.
    """
    corr = list(corr)
    if len(corr) != 3:
        raise ValueError("P3P needs exactly 3 correspondences")
    uv = np.array([c[0] for c in corr], dtype=np.float64).reshape(3, 2)
    X = np.array([c[1] for c in corr], dtype=np.float64).reshape(3, 3)
    scale = max(np.max(np.linalg.norm(X - X.mean(axis=0), axis=1)), 1e-12)
    if np.linalg.norm(np.cross(X[1] - X[0], X[2] - X[0])) <= 1e-9 * scale * scale:
        raise CollinearPoints("P3P needs three non-collinear 3D points")
    Rs, ts = _kernels.p3p(bearings(uv, intrinsics), X)
    out: list[RigidPose] = []
    for R, t in zip(Rs, ts):
        pose = RigidPose(R, t)
        if not np.all(_reproj(pose, X, uv, intrinsics) < P3P_REPROJ_TOL_PX):
            # clustered quartic roots (near-symmetric triangles) lose accuracy
            pose = refine_pose_lm(pose, zip(uv, X), intrinsics)
            if not np.all(_reproj(pose, X, uv, intrinsics) < P3P_REPROJ_TOL_PX):
                continue
        if any(pose.allclose(p, atol=1e-9) for p in out):
            continue
        out.append(pose)
    if not out:
        raise NoRealSolution("P3P has no real solution in front of the camera")
    return out


def refine_pose_lm(pose0: RigidPose, corr, intrinsics: CameraIntrinsics, max_iters: int = 100) -> RigidPose:
    """Least-squares reprojection refinement; never returns a worse pose."""
    corr = list(corr)
    if len(corr) < 3:
        raise ValueError("refinement needs at least 3 correspondences")
    uv = np.array([c[0] for c in corr], dtype=np.float64).reshape(-1, 2)
    X = np.ascontiguousarray(np.array([c[1] for c in corr], dtype=np.float64).reshape(-1, 3))
    cam = _camera(intrinsics)

    def residual(pose):
        return (project_points(X, cam, pose) - uv).ravel()

    pivot = pose0.apply(X.mean(axis=0))
    res = levenberg_marquardt(residual, pose0, pivot, max_iters=max_iters, ftol=1e-15, xtol=1e-15)
    return res.pose if res.cost <= res.initial_cost else pose0


def _mutual_matches(pose, det, beads, intrinsics, thresh):
    """Mutual-nearest (detection, bead index) pairs within ``thresh`` px."""
    uv = project_points(beads, _camera(intrinsics), pose)
    d = np.linalg.norm(det[:, None, :] - uv[None, :, :], axis=2)
    bead_nn = np.argmin(d, axis=1)
    det_nn = np.argmin(d, axis=0)
    pairs = [(i, int(b)) for i, b in enumerate(bead_nn) if det_nn[b] == i and d[i, b] <= thresh]
    return pairs, d


def _hypotheses(n_det: int, n_beads: int, seed: int) -> np.ndarray:
    """(H, 6) rows of (3 detection indices, 3 bead indices)."""
    bead_perm = np.array(list(itertools.permutations(range(n_beads), 3)), dtype=np.int64)
    if n_det <= EXHAUSTIVE_MAX_DETECTIONS:
        # unordered detection triples suffice: bead triples cover every order
        det_comb = np.array(list(itertools.combinations(range(n_det), 3)), dtype=np.int64)
        return np.concatenate(
            [np.repeat(det_comb, len(bead_perm), axis=0), np.tile(bead_perm, (len(det_comb), 1))], axis=1
        )
    rng = np.random.default_rng(seed)
    det_idx = np.argsort(rng.random((SAMPLED_HYPOTHESES, n_det)), axis=1)[:, :3]
    bead_idx = bead_perm[rng.integers(0, len(bead_perm), SAMPLED_HYPOTHESES)]
    return np.concatenate([det_idx, bead_idx], axis=1).astype(np.int64)


def blind_pnp(
    detections,
    model: FiducialModel,
    intrinsics: CameraIntrinsics,
    inlier_thresh_px: float = INLIER_THRESH_PX,
    seed: int = 0,
) -> CalibrationResult:
    """Fiducial pose and bead matching from unlabelled detections.

    Detections are put in a canonical order first, so the result does not
    depend on the order in which they are given.
    """
    det_in = np.asarray(detections, dtype=np.float64).reshape(-1, 2)
    if len(det_in) < 4:
        raise InsufficientDetections(f"blind PnP needs at least 4 detections, got {len(det_in)}")
    if not np.all(np.isfinite(det_in)):
        raise InsufficientDetections("detections contain non-finite coordinates")
    order = np.lexsort((det_in[:, 1], det_in[:, 0]))
    det = np.ascontiguousarray(det_in[order])
    beads = np.ascontiguousarray(model.bead_positions)
    n_det, n_beads = len(det), len(beads)

    hyps = _hypotheses(n_det, n_beads, seed)
    cx, cy = intrinsics.principal_point
    count, _, _, R, t = _kernels.pnp_search(
        bearings(det, intrinsics), det, beads, hyps, intrinsics.focal_px, cx, cy,
        inlier_thresh_px, min(n_det, n_beads),
    )
    if count < 4:
        raise NoValidPose(f"best hypothesis has {max(count, 0)} inliers (need 4)")

    pose = RigidPose(R, t)
    pairs, _ = _mutual_matches(pose, det, beads, intrinsics, inlier_thresh_px)
    for _ in range(MAX_REFINE_ROUNDS):
        if len(pairs) < 4:
            break
        pose = refine_pose_lm(pose, [(det[i], beads[b]) for i, b in pairs], intrinsics)
        new_pairs, _ = _mutual_matches(pose, det, beads, intrinsics, inlier_thresh_px)
        if new_pairs == pairs:
            break
        pairs = new_pairs
    pairs, d = _mutual_matches(pose, det, beads, intrinsics, inlier_thresh_px)
    if len(pairs) < 4:
        raise NoValidPose(f"refined pose keeps only {len(pairs)} inliers (need 4)")

    ids = model.bead_ids
    matching = sorted((int(order[i]), ids[b]) for i, b in pairs)
    err = float(np.mean([d[i, b] for i, b in pairs]))
    return CalibrationResult(pose, matching, len(pairs), err, len(hyps))


def calibrate_view(detections, model, intrinsics, fiducial_to_world: RigidPose | None = None, **kw):
    """World->camera extrinsic for one view plus the raw calibration result.

    ``fiducial_to_world`` places the fiducial in the world frame (identity
    when the fiducial defines the world).
    """
    res = blind_pnp(detections, model, intrinsics, **kw)
    ext = res.pose
    if fiducial_to_world is not None:
        ext = compose(res.pose, fiducial_to_world.inverse())
    return ext, res


def reprojection_errors(pose: RigidPose, detections, model: FiducialModel, matching, intrinsics) -> np.ndarray:
    """Per-pair reprojection error (px) of a matching under ``pose``."""
    det = np.asarray(detections, dtype=np.float64).reshape(-1, 2)
    idx = {b: k for k, b in enumerate(model.bead_ids)}
    if not matching:
        return np.zeros(0)
    di = np.array([i for i, _ in matching])
    bi = np.array([idx[b] for _, b in matching])
    return _reproj(pose, model.bead_positions[bi], det[di], intrinsics)


__all__ = [
    "CalibrationResult",
    "INLIER_THRESH_PX",
    "blind_pnp",
    "calibrate_view",
    "refine_pose_lm",
    "reprojection_errors",
    "solve_p3p",
]
