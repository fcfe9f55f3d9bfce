"""Multi-view contour ICP with per-substructure matching.

One rigid model->world pose is optimized against fixed, calibrated cameras.
Each correspondence update re-extracts the posed silhouette in every view,
pairs every observed contour point with the nearest projected silhouette
sample of the same class, and solves the pose by Levenberg-Marquardt on the
pixel reprojection error. When the pairing stops changing, points whose
residual exceeds ``reweight_sigma_factor`` times the residual standard
deviation are dropped and the loop runs again on the remaining points,
until the kept set stops changing or ``reweight_max_rounds`` is reached.
All passes of one run share the ``max_correspondence_updates`` budget.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import _kernels
from .errors import EmptySilhouette, GeometryError, NonPositiveDepth
from .geometry import CameraView, RigidPose, axis_angle_matrix, project_points, rotate_about
from .lm import LMResult, levenberg_marquardt
from .mesh import SUBSTRUCTURES, LabeledMesh, extract_silhouette
from .scene import ContourObservation

log = logging.getLogger(__name__)

SUBSTRUCTURE = "substructure"
SILHOUETTE = "silhouette"
MODES = (SUBSTRUCTURE, SILHOUETTE)

RESIDUAL_MM_CONVENTION = (
    "residual_px * pixel_pitch * source_to_object_mm / source_to_detector_mm "
    "(object-plane mm); raw pixel_pitch when the view has no depth metadata"
)


@dataclass(frozen=True)
class RegistrationConfig:
    mode: str = SUBSTRUCTURE
    max_correspondence_updates: int = 30
    lm_max_iters: int = 50
    lm_ftol: float = 1e-10
    reweight: bool = True
    reweight_sigma_factor: float = 2.0
    reweight_max_rounds: int = 10
    restart_check_after_updates: int = 4
    restart_median_thresh_mm: float = 3.0
    restart_psi_range_deg: tuple = (90.0, 270.0)
    max_restarts: int = 5
    sample_spacing_mm: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("reweight_sigma_factor", "restart_median_thresh_mm", "sample_spacing_mm"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_correspondence_updates < 1 or self.lm_max_iters < 1 or self.reweight_max_rounds < 1:
            raise ValueError("iteration limits must be positive")
        lo, hi = self.restart_psi_range_deg
        if not 0 < lo <= hi:
            raise ValueError("restart_psi_range_deg must be an increasing positive range")
        object.__setattr__(self, "restart_psi_range_deg", (float(lo), float(hi)))

    def replace(self, **kw) -> RegistrationConfig:
        d = asdict(self)
        d.update(kw)
        return RegistrationConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["restart_psi_range_deg"] = list(self.restart_psi_range_deg)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RegistrationConfig:
        d = dict(d)
        if "restart_psi_range_deg" in d:
            d["restart_psi_range_deg"] = tuple(d["restart_psi_range_deg"])
        return cls(**d)


class Correspondence(NamedTuple):
    view_id: str
    observed_2d: np.ndarray
    model_point_3d: np.ndarray
    class_id: int
    weight: int
    residual_px: float


@dataclass(frozen=True, eq=False)
class Correspondences:
    """Structure-of-arrays correspondence set for all views."""

    view_ids: tuple  # view id per view index
    view_index: np.ndarray  # (N,)
    obs_index: np.ndarray  # (N,) global index of the observed point
    observed: np.ndarray  # (N, 2) px
    model_points: np.ndarray  # (N, 3) model frame
    class_id: np.ndarray  # (N,) class of the observation
    model_class: np.ndarray  # (N,) class of the matched silhouette sample
    source_edge: np.ndarray  # (N,)
    weight: np.ndarray  # (N,) in {0, 1}
    residual_px: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.obs_index)

    def __getitem__(self, i) -> Correspondence:
        return Correspondence(
            self.view_ids[self.view_index[i]],
            self.observed[i],
            self.model_points[i],
            int(self.class_id[i]),
            int(self.weight[i]),
            float(self.residual_px[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def key(self) -> bytes:
        """Identity of the pairing: (observation index -> silhouette edge)."""
        return np.stack([self.obs_index, self.source_edge]).tobytes()


def _observation_sets(obs: ContourObservation, mode: str):
    """(class, points, local offset) triples in a fixed order."""
    if mode == SILHOUETTE:
        allp = obs.merged().points_by_class[0]
        return [(0, allp)]
    out = []
    for c, pts in obs.points_by_class.items():
        if c not in SUBSTRUCTURES:
            raise GeometryError(f"class {c} observation in substructure mode (expected 1, 2 or 3)")
        out.append((c, pts))
    return out


def match_correspondences(
    mesh: LabeledMesh,
    pose: RigidPose,
    views: list[CameraView],
    obs: list[ContourObservation],
    config: RegistrationConfig = RegistrationConfig(),
    active: np.ndarray | None = None,
) -> Correspondences:
    """Pair each observed point with the nearest projected silhouette sample.

    In substructure mode the search is restricted to samples of the
    observation's own class; in silhouette mode classes are ignored and the
    whole outline is used. ``active`` masks observed points by global index
    (observations are numbered view by view, class by class).
    """
    by_id = {o.view_id: o for o in obs}
    cols = {k: [] for k in ("vi", "oi", "obs", "mp", "cls", "mcls", "edge")}
    base = 0
    whole = config.mode == SILHOUETTE
    for vi, view in enumerate(views):
        if view.view_id not in by_id:
            raise GeometryError(f"no observations for view {view.view_id!r}")
        sil = extract_silhouette(mesh, pose, view, config.sample_spacing_mm, whole=whole)
        uv = project_points(sil.positions, view, pose) if len(sil) else np.zeros((0, 2))
        for c, pts in _observation_sets(by_id[view.view_id], config.mode):
            n = len(pts)
            gidx = base + np.arange(n)
            base += n
            if active is not None:
                keep = active[gidx]
                pts, gidx = pts[keep], gidx[keep]
            if len(pts) == 0:
                continue
            sel = np.arange(len(sil)) if whole else np.flatnonzero(sil.class_id == c)
            if len(sel) == 0:
                raise EmptySilhouette(c, view.view_id)
            k, d = _kernels.nearest_2d(pts, uv[sel])
            j = sel[k]
            cols["vi"].append(np.full(len(pts), vi))
            cols["oi"].append(gidx)
            cols["obs"].append(pts)
            cols["mp"].append(sil.positions[j])
            cols["cls"].append(np.full(len(pts), c))
            cols["mcls"].append(sil.class_id[j])
            cols["edge"].append(sil.source_edge[j])
            cols.setdefault("res", []).append(d)
    if not cols["vi"]:
        raise GeometryError("no observed contour points to match")
    cat = {k: np.concatenate(v) for k, v in cols.items()}
    return Correspondences(
        view_ids=tuple(v.view_id for v in views),
        view_index=cat["vi"].astype(np.int64),
        obs_index=cat["oi"].astype(np.int64),
        observed=cat["obs"],
        model_points=cat["mp"],
        class_id=cat["cls"].astype(np.int64),
        model_class=cat["mcls"].astype(np.int64),
        source_edge=cat["edge"].astype(np.int64),
        weight=np.ones(len(cat["vi"]), dtype=np.int64),
        residual_px=cat["res"],
    )


def _total_observations(obs: list[ContourObservation], views, mode) -> int:
    by_id = {o.view_id: o for o in obs}
    return sum(len(p) for v in views for _, p in _observation_sets(by_id[v.view_id], mode))


def make_residual_fn(corr: Correspondences, views: list[CameraView]):
    """Stacked (u, v) reprojection residuals of the weight-1 correspondences."""
    groups = []
    for vi, view in enumerate(views):
        m = (corr.view_index == vi) & (corr.weight == 1)
        if np.any(m):
            groups.append((view, np.ascontiguousarray(corr.model_points[m]), corr.observed[m]))

    def residual(pose: RigidPose) -> np.ndarray:
        return np.concatenate([(project_points(X, v, pose) - x).ravel() for v, X, x in groups])

    return residual


def solve_pose_lm(
    corr: Correspondences,
    views: list[CameraView],
    pose0: RigidPose,
    config: RegistrationConfig = RegistrationConfig(),
) -> LMResult:
    """Least-squares pose for fixed correspondences (cameras held fixed)."""
    w = corr.weight == 1
    if w.sum() < 3:
        raise GeometryError("need at least 3 weighted correspondences")
    pivot = pose0.apply(corr.model_points[w].mean(axis=0))
    return levenberg_marquardt(
        make_residual_fn(corr, views), pose0, pivot, max_iters=config.lm_max_iters, ftol=config.lm_ftol
    )


# ---------------------------------------------------------------------------
# ICP driver
# ---------------------------------------------------------------------------


@dataclass
class TraceEntry:
    update: int
    phase: int  # 1 before reweighting, k + 1 in the k-th reweighted pass
    median_residual_mm: float
    mean_residual_mm: float
    median_residual_px: float
    inlier_count: int
    lm_iterations: int
    lm_costs: list
    pose: RigidPose

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "update", "phase", "median_residual_mm", "mean_residual_mm", "median_residual_px",
            "inlier_count", "lm_iterations",
        )}
        d["lm_costs"] = [float(c) for c in self.lm_costs]
        d["pose"] = self.pose.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TraceEntry:
        d = dict(d)
        d["pose"] = RigidPose.from_dict(d["pose"])
        return cls(**d)


@dataclass
class RegistrationReport:
    final_pose: RigidPose
    trace: list[TraceEntry] = field(default_factory=list)
    restart_count: int = 0
    converged: bool = False
    lm_iterations: int = 0
    final_median_residual_mm: float = float("nan")
    final_mean_residual_px: float = float("nan")
    inlier_count: int = 0
    mode: str = SUBSTRUCTURE
    view_ids: list = field(default_factory=list)
    initial_pose: RigidPose | None = None
    config: dict = field(default_factory=dict)
    residual_mm_convention: str = RESIDUAL_MM_CONVENTION

    def to_dict(self) -> dict:
        return {
            "final_pose": self.final_pose.to_dict(),
            "initial_pose": self.initial_pose.to_dict() if self.initial_pose is not None else None,
            "trace": [t.to_dict() for t in self.trace],
            "restart_count": self.restart_count,
            "converged": self.converged,
            "lm_iterations": self.lm_iterations,
            "final_median_residual_mm": self.final_median_residual_mm,
            "final_mean_residual_px": self.final_mean_residual_px,
            "inlier_count": self.inlier_count,
            "mode": self.mode,
            "view_ids": list(self.view_ids),
            "config": self.config,
            "residual_mm_convention": self.residual_mm_convention,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RegistrationReport:
        return cls(
            final_pose=RigidPose.from_dict(d["final_pose"]),
            trace=[TraceEntry.from_dict(t) for t in d.get("trace", [])],
            restart_count=int(d.get("restart_count", 0)),
            converged=bool(d.get("converged", False)),
            lm_iterations=int(d.get("lm_iterations", 0)),
            final_median_residual_mm=float(d.get("final_median_residual_mm", float("nan"))),
            final_mean_residual_px=float(d.get("final_mean_residual_px", float("nan"))),
            inlier_count=int(d.get("inlier_count", 0)),
            mode=d.get("mode", SUBSTRUCTURE),
            view_ids=list(d.get("view_ids", [])),
            initial_pose=RigidPose.from_dict(d["initial_pose"]) if d.get("initial_pose") else None,
            config=d.get("config", {}),
            residual_mm_convention=d.get("residual_mm_convention", RESIDUAL_MM_CONVENTION),
        )


def _residual_mm(corr: Correspondences, res_px: np.ndarray, views: list[CameraView]) -> np.ndarray:
    scale = np.array([v.mm_per_px_at_object() for v in views])
    return res_px * scale[corr.view_index]


def _point_residuals(corr: Correspondences, views, pose) -> np.ndarray:
    out = np.empty(len(corr))
    for vi, view in enumerate(views):
        m = corr.view_index == vi
        if np.any(m):
            uv = project_points(corr.model_points[m], view, pose)
            out[m] = np.linalg.norm(uv - corr.observed[m], axis=1)
    return out


@dataclass
class _RunResult:
    pose: RigidPose
    converged: bool
    aborted: bool
    median_mm: float
    mean_px: float
    inliers: int
    lm_iterations: int


class _Diverged(Exception):
    """The posed model crossed a source plane; the run cannot continue."""


def _icp_phase(mesh, views, obs, pose, config, active, trace, phase, check_at, budget):
    """Match/solve until the pairing repeats or ``budget`` updates are used.

    Returns (pose, corr, converged, aborted, lm_iters).
    """
    prev = None
    lm_iters = 0
    corr = None
    for u in range(budget + 1):
        try:
            corr = match_correspondences(mesh, pose, views, obs, config, active)
        except NonPositiveDepth as exc:
            raise _Diverged(str(exc)) from exc
        key = corr.key()
        if key == prev:
            return pose, corr, True, False, lm_iters
        if check_at is not None and u == check_at and _median_mm(corr, views) > config.restart_median_thresh_mm:
            return pose, corr, False, True, lm_iters
        if u == budget:
            break
        lm = solve_pose_lm(corr, views, pose, config)
        pose = lm.pose
        lm_iters += lm.iterations
        res = _point_residuals(corr, views, pose)
        res_mm = _residual_mm(corr, res, views)
        trace.append(TraceEntry(
            update=len(trace) + 1,
            phase=phase,
            median_residual_mm=float(np.median(res_mm)),
            mean_residual_mm=float(np.mean(res_mm)),
            median_residual_px=float(np.median(res)),
            inlier_count=int(corr.weight.sum()),
            lm_iterations=lm.iterations,
            lm_costs=list(lm.costs),
            pose=pose,
        ))
        prev = key
    return pose, corr, False, False, lm_iters


def _run(mesh, views, obs, pose, config, trace, check: bool) -> _RunResult:
    n_before = len(trace)
    try:
        return _run_inner(mesh, views, obs, pose, config, trace, check)
    except _Diverged as exc:
        log.info("registration diverged: %s", exc)
        mine = trace[n_before:]
        last = mine[-1].pose if mine else pose
        return _RunResult(last, False, check, float("inf"), float("inf"), 0, sum(t.lm_iterations for t in mine))


def _reweighted_active(corr, views, pose, config, n_total) -> np.ndarray:
    """Keep points whose residual is within k times the RMS residual."""
    res = _point_residuals(corr, views, pose)
    sigma = float(np.sqrt(np.mean(res ** 2)))
    active = np.zeros(n_total, dtype=bool)
    active[corr.obs_index[res <= config.reweight_sigma_factor * sigma]] = True
    return active


def _run_inner(mesh, views, obs, pose, config, trace, check: bool) -> _RunResult:
    # all phases of one run share max_correspondence_updates
    start = len(trace)
    used = lambda: len(trace) - start  # noqa: E731
    check_at = config.restart_check_after_updates if check else None
    pose, corr, converged, aborted, iters = _icp_phase(
        mesh, views, obs, pose, config, None, trace, 1, check_at, config.max_correspondence_updates
    )
    if aborted:
        return _RunResult(pose, False, True, _median_mm(corr, views), float("nan"), len(corr), iters)
    if check and _median_mm(corr, views) > config.restart_median_thresh_mm:
        # first pass ended before the scheduled check
        return _RunResult(pose, False, True, _median_mm(corr, views), float("nan"), len(corr), iters)
    if config.reweight:
        n_total = _total_observations(obs, views, config.mode)
        active = None
        for rnd in range(config.reweight_max_rounds):
            new_active = _reweighted_active(corr, views, pose, config, n_total)
            if active is not None and np.array_equal(new_active, active):
                break
            active = new_active
            pose, corr, conv, _, it = _icp_phase(
                mesh, views, obs, pose, config, active, trace, 2 + rnd, None,
                config.max_correspondence_updates - used(),
            )
            iters += it
            converged = converged and conv
            if used() >= config.max_correspondence_updates:
                break
    res = _point_residuals(corr, views, pose)
    med = float(np.median(_residual_mm(corr, res, views)))
    return _RunResult(pose, converged, False, med, float(np.mean(res)), len(corr), iters)


def _median_mm(corr, views) -> float:
    """Median closest-point distance (object-plane mm) of a fresh matching."""
    return float(np.median(_residual_mm(corr, corr.residual_px, views)))


def _report(result: _RunResult, trace, restarts, config, views, initial_pose, converged) -> RegistrationReport:
    return RegistrationReport(
        final_pose=result.pose,
        trace=trace,
        restart_count=restarts,
        converged=converged,
        lm_iterations=sum(t.lm_iterations for t in trace),
        final_median_residual_mm=result.median_mm,
        final_mean_residual_px=result.mean_px,
        inlier_count=result.inliers,
        mode=config.mode,
        view_ids=[v.view_id for v in views],
        initial_pose=initial_pose,
        config=config.to_dict(),
    )


def _check_inputs(views, obs):
    if not views:
        raise GeometryError("registration needs at least one view")
    if len(views) == 1:
        log.warning("single-view registration: depth and symmetric poses are poorly constrained")
    ids = {v.view_id for v in views}
    missing = ids - {o.view_id for o in obs}
    if missing:
        raise GeometryError(f"no observations for views {sorted(missing)}")


def register(
    mesh: LabeledMesh,
    views: list[CameraView],
    obs: list[ContourObservation],
    initial_pose: RigidPose,
    config: RegistrationConfig = RegistrationConfig(),
) -> RegistrationReport:
    """Contour ICP from ``initial_pose`` followed by a reweighted second pass."""
    _check_inputs(views, obs)
    trace: list[TraceEntry] = []
    result = _run(mesh, views, obs, initial_pose, config, trace, check=False)
    return _report(result, trace, 0, config, views, initial_pose, result.converged)


def register_with_restart(
    mesh: LabeledMesh,
    views: list[CameraView],
    obs: list[ContourObservation],
    initial_pose: RigidPose,
    config: RegistrationConfig = RegistrationConfig(),
) -> RegistrationReport:
    """:func:`register` plus failure detection and psi restarts.

    After ``restart_check_after_updates`` correspondence updates (or at
    first-pass convergence, whichever comes first) the contour points are
    matched again and the median closest-point distance is converted to
    object-plane millimetres. Above the threshold, the current
    pose is spun about the mesh's first principal axis (through its centroid)
    by a uniform angle from ``restart_psi_range_deg`` and ICP starts over.
    Once ``max_restarts`` are used up the last run goes to completion and
    the report is flagged not converged if its median is still too high.
    """
    _check_inputs(views, obs)
    rng = np.random.default_rng(config.rng_seed)
    axis = mesh.first_principal_axis
    pivot = mesh.centroid
    trace: list[TraceEntry] = []
    pose = initial_pose
    restarts = 0
    while True:
        can_restart = restarts < config.max_restarts
        result = _run(mesh, views, obs, pose, config, trace, check=can_restart)
        if not result.aborted:
            break
        angle = rng.uniform(*config.restart_psi_range_deg)
        log.info("restart %d: median %.2f mm, psi += %.1f deg", restarts + 1, result.median_mm, angle)
        pose = rotate_about(result.pose, axis_angle_matrix(axis, angle), pivot)
        restarts += 1
    converged = result.converged and result.median_mm <= config.restart_median_thresh_mm
    return _report(result, trace, restarts, config, views, initial_pose, converged)
