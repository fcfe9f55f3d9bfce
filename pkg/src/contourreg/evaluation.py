"""Registration and contour metrics, robustness sweeps and the Friedman test."""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import stats

from . import _kernels
from .errors import DegenerateRanks, EmptyInput, GeometryError, NonPositiveDepth
from .geometry import CameraView, RigidPose, perturb_pose, project_points
from .mesh import DEFAULT_SAMPLE_SPACING_MM, LabeledMesh, extract_silhouette
from .registration import RegistrationConfig, RegistrationReport, register, register_with_restart
from .scene import Scene

AAPM_SUCCESS_MM = 1.0
MRPD_PAIRING = "nearest reprojected silhouette sample for each ground-truth contour point"


def _pts2(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).reshape(-1, 2)


def mrpd(gt_contour_2d, model_points, pose: RigidPose, control_view: CameraView) -> float:
    """Mean reprojection distance in detector millimetres.

    Every ground-truth contour point is paired with the nearest reprojected
    model point; distances are averaged and scaled by the pixel pitch.
    """
    gt = _pts2(gt_contour_2d)
    X = np.asarray(model_points, dtype=np.float64).reshape(-1, 3)
    if len(gt) == 0 or len(X) == 0:
        raise EmptyInput("mRPD needs ground-truth contour points and model points")
    uv = project_points(X, control_view, pose)
    _, d = _kernels.nearest_2d(gt, uv)
    return float(d.mean() * control_view.intrinsics.pixel_pitch)


def mrpd_for_pose(
    mesh: LabeledMesh,
    pose: RigidPose,
    control_view: CameraView,
    gt_contour_2d,
    sample_spacing: float = DEFAULT_SAMPLE_SPACING_MM,
) -> float:
    """mRPD against the whole-bone silhouette of ``mesh`` at ``pose``."""
    sil = extract_silhouette(mesh, pose, control_view, sample_spacing, whole=True)
    return mrpd(gt_contour_2d, sil.positions, pose, control_view)


def one_sided_chamfer(pred, truth, pixel_pitch: float) -> float:
    """Mean distance (mm) from each predicted point to its nearest true point."""
    p, t = _pts2(pred), _pts2(truth)
    if len(p) == 0 or len(t) == 0:
        raise EmptyInput("Chamfer distance needs non-empty point sets")
    _, d = _kernels.nearest_2d(p, t)
    return float(d.mean() * pixel_pitch)


class PrecisionRecall(NamedTuple):
    precision: float | None  # None when there are no predictions
    recall: float


def precision_recall(pred, truth, pixel_pitch: float, thresh_mm: float = 1.0) -> PrecisionRecall:
    p, t = _pts2(pred), _pts2(truth)
    if len(t) == 0:
        raise EmptyInput("precision/recall need ground-truth points")
    if len(p) == 0:
        return PrecisionRecall(None, 0.0)
    thr = thresh_mm / pixel_pitch
    _, dp = _kernels.nearest_2d(p, t)
    _, dt = _kernels.nearest_2d(t, p)
    return PrecisionRecall(float(np.mean(dp <= thr)), float(np.mean(dt <= thr)))


def success(mrpd_mm: float) -> bool:
    """AAPM rule: a registration succeeds when mRPD <= 1 mm."""
    return bool(mrpd_mm <= AAPM_SUCCESS_MM)


@dataclass
class MetricReport:
    mrpd_mm_per_view: dict
    mrpd_mm: float
    success: bool
    chamfer_mm: float | None = None
    precision: float | None = None
    recall: float | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mrpd_mm_per_view": self.mrpd_mm_per_view,
            "mrpd_mm": self.mrpd_mm,
            "success": self.success,
            "chamfer_mm": self.chamfer_mm,
            "precision": self.precision,
            "recall": self.recall,
            "mrpd_pairing": MRPD_PAIRING,
            "metadata": self.metadata,
        }


def evaluate_pose(
    mesh: LabeledMesh,
    scene: Scene,
    pose: RigidPose,
    control_views=None,
    sample_spacing: float = DEFAULT_SAMPLE_SPACING_MM,
    contour_views=None,
    metadata: dict | None = None,
) -> MetricReport:
    """mRPD over the control views plus contour metrics of the observations.

    Contour metrics compare the merged observed points of ``contour_views``
    (default: the scene's registration views) with their clean outlines.
    """
    control_views = list(control_views or scene.control_views)
    if not control_views:
        raise GeometryError("no control views to evaluate on")
    per = {}
    for vid in control_views:
        if vid not in scene.control_contours:
            raise GeometryError(f"no ground-truth contour for control view {vid!r}")
        try:
            per[vid] = mrpd_for_pose(mesh, pose, scene.camera(vid), scene.control_contours[vid], sample_spacing)
        except NonPositiveDepth:
            per[vid] = math.inf  # pose put the model behind the source
    mean = float(np.mean(list(per.values())))
    chamfer = prec = rec = None
    cv = [v for v in (contour_views or scene.registration_views) if v in scene.observations and v in scene.control_contours]
    if cv:
        pitch = scene.views[cv[0]].intrinsics.pixel_pitch
        pred = np.concatenate([scene.observations[v].merged().points_by_class[0] for v in cv])
        truth = np.concatenate([scene.control_contours[v] for v in cv])
        if len(pred):
            chamfer = one_sided_chamfer(pred, truth, pitch)
        prec, rec = precision_recall(pred, truth, pitch)
    return MetricReport(per, mean, success(mean), chamfer, prec, rec, dict(metadata or {}))


# ---------------------------------------------------------------------------
# robustness sweep
# ---------------------------------------------------------------------------

OFFSET_NAMES = ("tx", "ty", "tz", "phi", "theta", "psi")


@dataclass
class SweepRun:
    index: int
    init_offset: np.ndarray  # (tx, ty, tz, phi, theta, psi) relative to the reference pose
    metrics: MetricReport
    restart_count: int
    converged: bool
    final_median_residual_mm: float

    @property
    def runs_needed(self) -> int:
        return self.restart_count + 1


@dataclass
class SweepResult:
    runs: list[SweepRun]
    mode: str
    restart: bool
    seed: int

    @property
    def success_rate(self) -> float | None:
        """Fraction of successful runs; None for an empty sweep."""
        if not self.runs:
            return None
        return sum(r.metrics.success for r in self.runs) / len(self.runs)

    @property
    def successes(self) -> int:
        return sum(r.metrics.success for r in self.runs)

    def summary(self) -> dict:
        m = [r.metrics.mrpd_mm for r in self.runs]
        return {
            "n_runs": len(self.runs),
            "successes": self.successes,
            "success_rate": self.success_rate,
            "mode": self.mode,
            "restart": self.restart,
            "seed": self.seed,
            "mrpd_mm_mean": float(np.mean(m)) if m else None,
            "mrpd_mm_median": float(np.median(m)) if m else None,
            "mrpd_mm_max": float(np.max(m)) if m else None,
            "runs_with_restart": sum(r.restart_count > 0 for r in self.runs),
            "max_runs_needed": max((r.runs_needed for r in self.runs), default=None),
            "mrpd_pairing": MRPD_PAIRING,
        }


CSV_HEADER = list(OFFSET_NAMES) + ["mrpd_mm", "success", "restarts", "converged"]


def sweep_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run"] + CSV_HEADER)
    for r in result.runs:
        w.writerow(
            [r.index] + [f"{v:.6f}" for v in r.init_offset]
            + [f"{r.metrics.mrpd_mm:.6f}", int(r.metrics.success), r.restart_count, int(r.converged)]
        )
    return buf.getvalue()


def plot_tables(result: SweepResult) -> dict[str, str]:
    """One TSV per initial parameter: initial value vs mRPD."""
    out = {}
    for k, name in enumerate(OFFSET_NAMES):
        lines = [f"{name}\tmrpd_mm\tsuccess"]
        for r in result.runs:
            lines.append(f"{r.init_offset[k]:.6f}\t{r.metrics.mrpd_mm:.6f}\t{int(r.metrics.success)}")
        out[name] = "\n".join(lines) + "\n"
    return out


def sample_init_offsets(n_runs: int, seed: int, trans_range_mm: float = 50.0, rot_range_deg: float = 180.0):
    rng = np.random.default_rng(seed)
    t = rng.uniform(-trans_range_mm, trans_range_mm, size=(n_runs, 3))
    r = rng.uniform(-rot_range_deg, rot_range_deg, size=(n_runs, 3))
    return np.concatenate([t, r], axis=1)


def run_single(mesh, scene, config, offset, restart, view_ids=None, control_views=None) -> tuple[RegistrationReport, MetricReport]:
    """One registration from ``offset`` about the scene's reference pose, evaluated on control views."""
    view_ids = list(view_ids or scene.registration_views)
    views = scene.cameras(view_ids)
    obs = scene.observations_for(view_ids)
    init = perturb_pose(scene.reference_pose, offset, mesh.centroid)
    fn = register_with_restart if restart else register
    report = fn(mesh, views, obs, init, config)
    metrics = evaluate_pose(
        mesh, scene, report.final_pose, control_views, config.sample_spacing_mm,
        metadata={"init_offset": [float(v) for v in offset], "mode": config.mode, "seed": config.rng_seed},
    )
    return report, metrics


def _sweep_job(args):
    i, mesh, scene, config, offset, restart, view_ids, control_views = args
    report, metrics = run_single(mesh, scene, config, offset, restart, view_ids, control_views)
    return SweepRun(i, np.asarray(offset), metrics, report.restart_count, report.converged,
                    report.final_median_residual_mm)


def robustness_sweep(
    mesh: LabeledMesh,
    scene: Scene,
    config: RegistrationConfig = RegistrationConfig(),
    n_runs: int = 50,
    trans_range_mm: float = 50.0,
    rot_range_deg: float = 180.0,
    restart: bool = False,
    seed: int = 0,
    jobs: int = 1,
    view_ids=None,
    control_views=None,
) -> SweepResult:
    """Register from ``n_runs`` uniformly sampled initial offsets.

    Run ``i`` uses restart seed ``seed + i`` so results do not depend on
    ``jobs``; output order is always by run index.
    """
    offsets = sample_init_offsets(n_runs, seed, trans_range_mm, rot_range_deg)
    tasks = [
        (i, mesh, scene, config.replace(rng_seed=seed + i), offsets[i], restart, view_ids, control_views)
        for i in range(n_runs)
    ]
    if jobs > 1 and n_runs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            runs = list(ex.map(_sweep_job, tasks))
    else:
        runs = [_sweep_job(t) for t in tasks]
    return SweepResult(runs, config.mode, restart, seed)


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


class FriedmanResult(NamedTuple):
    statistic: float
    p_value: float
    rank_sums: np.ndarray


def friedman_test(method_scores) -> FriedmanResult:
    """Friedman chi-square test for ``k`` methods (rows) over ``n`` blocks (columns).

    Scores are ranked within each block with average ranks for ties and the
    statistic is tie-corrected. When every block is fully tied the statistic
    is 0 and p is 1. The p-value uses the chi-square approximation with
    ``k - 1`` degrees of freedom.
    """
    X = np.asarray(method_scores, dtype=np.float64)
    if X.ndim != 2:
        raise DegenerateRanks("scores must be a k x n matrix")
    k, n = X.shape
    if k < 2 or n < 2:
        raise DegenerateRanks(f"need at least 2 methods and 2 blocks, got {k} x {n}")
    if not np.all(np.isfinite(X)):
        raise DegenerateRanks("scores contain missing or non-finite cells")
    ranks = np.apply_along_axis(stats.rankdata, 0, X)  # rank methods within each block
    R = ranks.sum(axis=1)
    Q = 12.0 / (n * k * (k + 1)) * np.sum(R ** 2) - 3.0 * n * (k + 1)
    ties = 0.0
    for j in range(n):
        _, counts = np.unique(X[:, j], return_counts=True)
        ties += np.sum(counts ** 3 - counts)
    denom = 1.0 - ties / (n * (k ** 3 - k))
    if denom <= 1e-12:
        return FriedmanResult(0.0, 1.0, R)
    Q = max(Q / denom, 0.0)
    return FriedmanResult(float(Q), float(stats.chi2.sf(Q, k - 1)), R)
