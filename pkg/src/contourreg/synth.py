"""Synthetic phantoms, C-arm rings, contour observations and bead detections."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import NonManifoldEdge, NonManifoldResult, OutOfFrame
from .geometry import (
    IMAGE_SIZE_PX,
    PIXEL_PITCH_MM,
    CameraIntrinsics,
    CameraView,
    RigidPose,
    look_at,
    project_points,
)
from .mesh import (
    DEFAULT_SAMPLE_SPACING_MM,
    DIAPHYSIS,
    LATERAL_CONDYLE,
    MEDIAL_CONDYLE,
    SUBSTRUCTURES,
    LabeledMesh,
    extract_silhouette,
)
from .scene import ContourObservation, Scene, ViewRecord

# ---------------------------------------------------------------------------
# phantom
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhantomSpec:
    """Cylinder shaft along +x ending at x=0, two spheres beyond its distal end.

    ``condyle_centers`` are given relative to the centre of the shaft's distal
    end; the first sphere is the medial condyle (class 2), the second the
    lateral condyle (class 3). With ``center=True`` the finished mesh is
    shifted so its bounding box is centred on the origin.
    """

    shaft_radius: float = 12.0
    shaft_length: float = 110.0
    shaft_axial_segments: int = 8
    shaft_radial_segments: int = 32
    condyle_radii: tuple = (16.0, 14.5)
    condyle_centers: tuple = ((12.0, 17.0, 0.0), (11.0, -16.0, -2.0))
    sphere_subdivisions: int = 3
    include_shaft: bool = True
    include_condyles: tuple = (True, True)
    center: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def symmetric_phantom_spec(**kw) -> PhantomSpec:
    """Phantom mirror-symmetric about the y=0 plane (identical condyles)."""
    base = dict(condyle_radii=(15.0, 15.0), condyle_centers=((12.0, 17.0, 0.0), (12.0, -17.0, 0.0)))
    base.update(kw)
    return PhantomSpec(**base)


def _orient_outward(V, F, center):
    n = np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]])
    c = V[F].mean(axis=1) - center
    flip = np.einsum("ij,ij->i", n, c) < 0
    F = F.copy()
    F[flip] = F[flip][:, [0, 2, 1]]
    return F


def icosphere(radius: float, subdivisions: int, center=(0.0, 0.0, 0.0)):
    """Vertices and outward triangles of a subdivided icosahedron."""
    p = (1.0 + 5.0 ** 0.5) / 2.0
    V = [
        (-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0),
        (0, -1, p), (0, 1, p), (0, -1, -p), (0, 1, -p),
        (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1),
    ]
    F = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    V = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in V]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = V[a] + V[b]
                V.append(m / np.linalg.norm(m))
                cache[key] = len(V) - 1
            return cache[key]

        newF = []
        for a, b, c in F:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            newF += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        F = newF
    V = np.array(V) * radius + np.asarray(center, dtype=np.float64)
    F = _orient_outward(V, np.array(F, dtype=np.int64), np.asarray(center, dtype=np.float64))
    return V, F


def capped_cylinder(radius: float, x0: float, x1: float, axial: int, radial: int):
    """Closed cylinder along x from ``x0`` to ``x1`` with fan-triangulated caps."""
    th = 2.0 * np.pi * np.arange(radial) / radial
    xs = np.linspace(x0, x1, axial + 1)
    ring = np.stack([np.zeros(radial), radius * np.cos(th), radius * np.sin(th)], axis=1)
    V = [ring + np.array([x, 0.0, 0.0]) for x in xs]
    V = np.concatenate(V + [np.array([[x0, 0, 0], [x1, 0, 0]], dtype=np.float64)])
    F = []
    for i in range(axial):
        for j in range(radial):
            a = i * radial + j
            b = i * radial + (j + 1) % radial
            c = (i + 1) * radial + j
            d = (i + 1) * radial + (j + 1) % radial
            F += [(a, b, d), (a, d, c)]
    c0 = (axial + 1) * radial
    c1 = c0 + 1
    last = axial * radial
    for j in range(radial):
        F.append((c0, (j + 1) % radial, j))
        F.append((c1, last + j, last + (j + 1) % radial))
    F = np.array(F, dtype=np.int64)
    # orient each triangle away from the axis point at its own x
    n = np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]])
    cen = V[F].mean(axis=1)
    ref = np.stack([cen[:, 0], np.zeros(len(F)), np.zeros(len(F))], axis=1)
    out = cen - ref
    is_cap = np.isin(F, [c0, c1]).any(axis=1)
    out[is_cap] = np.where(cen[is_cap, 0:1] < 0.5 * (x0 + x1), [[-1.0, 0, 0]], [[1.0, 0, 0]])
    flip = np.einsum("ij,ij->i", n, out) < 0
    F[flip] = F[flip][:, [0, 2, 1]]
    return V, F


def build_phantom(spec: PhantomSpec = PhantomSpec()) -> LabeledMesh:
    """Labeled union of closed primitives; every vertex labeled by its primitive."""
    parts = []
    if spec.include_shaft:
        V, F = capped_cylinder(
            spec.shaft_radius, -spec.shaft_length, 0.0, spec.shaft_axial_segments, spec.shaft_radial_segments
        )
        parts.append((V, F, DIAPHYSIS))
    for cls, r, c, on in zip(
        (MEDIAL_CONDYLE, LATERAL_CONDYLE), spec.condyle_radii, spec.condyle_centers, spec.include_condyles
    ):
        if on:
            V, F = icosphere(r, spec.sphere_subdivisions, c)
            parts.append((V, F, cls))
    if not parts:
        raise NonManifoldResult("phantom spec enables no primitive")
    Vs, Fs, Cs = [], [], []
    off = 0
    for V, F, cls in parts:
        Vs.append(V)
        Fs.append(F + off)
        Cs.append(np.full(len(V), cls, dtype=np.int64))
        off += len(V)
    V = np.concatenate(Vs)
    if spec.center:
        V = V - 0.5 * (V.min(axis=0) + V.max(axis=0))
    mesh = LabeledMesh(V, np.concatenate(Fs), np.concatenate(Cs))
    try:
        mesh.check()
    except NonManifoldEdge as exc:
        raise NonManifoldResult(str(exc)) from exc
    return mesh


# ---------------------------------------------------------------------------
# cameras and fiducial
# ---------------------------------------------------------------------------


def default_intrinsics(source_to_detector_mm: float = 1000.0) -> CameraIntrinsics:
    c = (IMAGE_SIZE_PX - 1) / 2.0
    return CameraIntrinsics(
        focal_px=source_to_detector_mm / PIXEL_PITCH_MM,
        principal_point=(c, c),
        pixel_pitch=PIXEL_PITCH_MM,
        image_size=(IMAGE_SIZE_PX, IMAGE_SIZE_PX),
    )


@dataclass(frozen=True)
class CameraRingSpec:
    """Sources on a circle about the world x axis, all aimed at the origin."""

    num_views: int = 10
    angular_spacing_deg: float = 9.0
    radius: float = 700.0  # source-to-object distance, mm
    source_to_detector_mm: float = 1000.0
    start_angle_deg: float = 0.0

    def __post_init__(self):
        if not self.angular_spacing_deg > 0:
            raise ValueError("angular spacing must be positive")

    def intrinsics(self) -> CameraIntrinsics:
        return default_intrinsics(self.source_to_detector_mm)

    def to_dict(self) -> dict:
        return asdict(self)


def ring_views(ring: CameraRingSpec) -> list[CameraView]:
    k = ring.intrinsics()
    views = []
    for i in range(ring.num_views):
        a = np.deg2rad(ring.start_angle_deg + i * ring.angular_spacing_deg)
        center = ring.radius * np.array([0.0, np.sin(a), -np.cos(a)])
        views.append(CameraView(k, look_at(center, np.zeros(3), (1.0, 0.0, 0.0)), f"v{i}", ring.radius))
    return views


def default_view_split(ring: CameraRingSpec) -> tuple[list[str], list[str]]:
    """Two registration views >= 45 deg apart with control views between them."""
    gap = int(np.ceil(45.0 / ring.angular_spacing_deg - 1e-9))
    gap = max(gap, 4)
    if gap % 2:
        gap += 1
    if gap >= ring.num_views:
        raise ValueError("ring too short for a 45 degree registration pair")
    mid = gap // 2
    return [f"v0", f"v{gap}"], [f"v{mid - 1}", f"v{mid}", f"v{mid + 1}"]


@dataclass(frozen=True, eq=False)
class FiducialModel:
    bead_positions: np.ndarray
    bead_ids: tuple

    def __post_init__(self):
        P = np.array(self.bead_positions, dtype=np.float64).reshape(-1, 3)
        P.setflags(write=False)
        object.__setattr__(self, "bead_positions", P)
        object.__setattr__(self, "bead_ids", tuple(int(i) for i in self.bead_ids))
        if len(P) < 4:
            raise ValueError("fiducial needs at least 4 beads")
        if len(self.bead_ids) != len(P) or len(set(self.bead_ids)) != len(P):
            raise ValueError("bead ids must be unique, one per bead")
        sv = np.linalg.svd(P - P.mean(axis=0), compute_uv=False)
        if sv[-1] <= 1e-6:
            raise ValueError("fiducial beads are coplanar")

    def to_dict(self) -> dict:
        return {"beads": [{"id": i, "xyz_mm": p.tolist()} for i, p in zip(self.bead_ids, self.bead_positions)]}

    @classmethod
    def from_dict(cls, d: dict) -> FiducialModel:
        beads = d["beads"]
        return cls([b["xyz_mm"] for b in beads], [b["id"] for b in beads])


def default_fiducial() -> FiducialModel:
    """16 beads on a 1.5-turn helix around x, 120 mm long and 80 mm wide."""
    k = np.arange(16)
    a = 2.0 * np.pi * 1.5 * k / 16.0
    r = 40.0 - 6.0 * (k % 3)
    P = np.stack([-60.0 + 8.0 * k, r * np.cos(a), r * np.sin(a)], axis=1)
    return FiducialModel(P, tuple(range(16)))


def random_view_pose(rng: np.random.Generator, distance=(600.0, 800.0), target_jitter_mm=10.0) -> RigidPose:
    """Extrinsic for a source on a random direction aimed near the origin."""
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    center = d * rng.uniform(*distance)
    target = rng.uniform(-target_jitter_mm, target_jitter_mm, 3)
    up = rng.normal(size=3)
    up -= d * (up @ d)
    return look_at(center, target, up)


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSpec:
    gaussian_sigma_px: float = 0.0
    spurious_fraction: float = 0.0
    misclass_fraction: float = 0.0
    dropout_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("spurious_fraction", "misclass_fraction", "dropout_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.gaussian_sigma_px < 0:
            raise ValueError("gaussian_sigma_px must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def corrupt_contours(points: np.ndarray, classes: np.ndarray, noise: NoiseSpec, rng, image_size):
    """Apply dropout, misclassification, jitter and spurious points.

    Returns ``(points, classes, kind)`` with ``kind`` 0 for true points,
    1 for misclassified true points, 2 for spurious points. Counts are
    ``round(fraction * n)``: dropout over the clean points, misclassification
    over the survivors, and spurious points sized so they make up
    ``spurious_fraction`` of the final set. A misclassified point takes one
    of the two other substructure classes at random (a condyle point becomes
    the other condyle or diaphysis).
    """
    n = len(points)
    keep = np.ones(n, dtype=bool)
    n_drop = int(round(noise.dropout_fraction * n))
    if n_drop:
        keep[rng.choice(n, n_drop, replace=False)] = False
    pts = points[keep].copy()
    cls = classes[keep].copy()
    m = len(pts)
    kind = np.zeros(m, dtype=np.int64)
    n_mis = int(round(noise.misclass_fraction * m))
    if n_mis:
        idx = rng.choice(m, n_mis, replace=False)
        shift = rng.integers(1, 3, size=n_mis)
        cls[idx] = (cls[idx] - 1 + shift) % 3 + 1
        kind[idx] = 1
    if noise.gaussian_sigma_px > 0:
        pts = pts + rng.normal(scale=noise.gaussian_sigma_px, size=pts.shape)
    f = noise.spurious_fraction
    n_sp = int(round(f * m / (1.0 - f))) if f < 1.0 else m
    if n_sp:
        w, h = image_size
        sp = np.stack([rng.uniform(0, w, n_sp), rng.uniform(0, h, n_sp)], axis=1)
        pts = np.concatenate([pts, sp])
        cls = np.concatenate([cls, rng.integers(1, 4, size=n_sp)])
        kind = np.concatenate([kind, np.full(n_sp, 2)])
    return pts, cls, kind


def bead_detections(
    fiducial: FiducialModel,
    view: CameraView,
    rng: np.random.Generator,
    sigma_px: float = 0.0,
    n_missing: int = 0,
    n_spurious: int = 0,
    min_separation_px: float = 0.0,
):
    """Project beads, drop ``n_missing`` of them, jitter, add spurious blobs.

    Returns ``(detections, truth)`` where ``truth[i]`` is the bead id behind
    detection ``i`` or -1 for a spurious one. Detections are shuffled.
    Spurious blobs are kept at least ``min_separation_px`` away from every
    projected bead.
    """
    uv = project_points(fiducial.bead_positions, view)
    ids = np.array(fiducial.bead_ids)
    keep = np.ones(len(uv), dtype=bool)
    if n_missing:
        keep[rng.choice(len(uv), n_missing, replace=False)] = False
    det = uv[keep] + (rng.normal(scale=sigma_px, size=(keep.sum(), 2)) if sigma_px > 0 else 0.0)
    truth = ids[keep]
    w, h = view.intrinsics.image_size
    extra = []
    while len(extra) < n_spurious:
        p = np.array([rng.uniform(0, w), rng.uniform(0, h)])
        if min_separation_px <= 0 or np.min(np.linalg.norm(uv - p, axis=1)) >= min_separation_px:
            extra.append(p)
    if extra:
        det = np.concatenate([det, np.array(extra)])
        truth = np.concatenate([truth, -np.ones(len(extra), dtype=np.int64)])
    perm = rng.permutation(len(det))
    return det[perm], truth[perm]


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------


def _in_frame(uv, view: CameraView) -> bool:
    w, h = view.intrinsics.image_size
    return bool(np.all((uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)))


def clean_contours(mesh, pose, view, sample_spacing=DEFAULT_SAMPLE_SPACING_MM):
    """Projected per-class silhouette samples (points, classes) and whole-bone outline."""
    sil = extract_silhouette(mesh, pose, view, sample_spacing)
    whole = extract_silhouette(mesh, pose, view, sample_spacing, whole=True)
    uv = project_points(sil.positions, view, pose)
    uv_whole = project_points(whole.positions, view, pose)
    return uv, sil.class_id, uv_whole


def generate_scene(
    mesh: LabeledMesh,
    ring: CameraRingSpec = CameraRingSpec(),
    true_pose: RigidPose | None = None,
    noise: NoiseSpec = NoiseSpec(),
    fiducial: FiducialModel | None = None,
    sample_spacing: float = DEFAULT_SAMPLE_SPACING_MM,
    registration_views: list[str] | None = None,
    control_views: list[str] | None = None,
) -> Scene:
    """Ground-truthed scene: calibrated ring views, noisy contours, clean control outlines.

    Every view gets per-class observations (corrupted per ``noise``) and the
    clean whole-bone outline used as evaluation ground truth. With a
    fiducial, bead detections carrying the same Gaussian sigma are added.
    """
    true_pose = RigidPose.identity() if true_pose is None else true_pose
    rng = np.random.default_rng(noise.seed)
    views = ring_views(ring)
    if registration_views is None or control_views is None:
        reg, ctl = default_view_split(ring)
        registration_views = registration_views or reg
        control_views = control_views or ctl
    recs, obs, ctrl = {}, {}, {}
    for view in views:
        uv, cls, uv_whole = clean_contours(mesh, true_pose, view, sample_spacing)
        if not (_in_frame(uv, view) and _in_frame(uv_whole, view)):
            raise OutOfFrame(view.view_id)
        pts, pcls, _ = corrupt_contours(uv, cls, noise, rng, view.intrinsics.image_size)
        obs[view.view_id] = ContourObservation(
            view.view_id, {c: pts[pcls == c] for c in SUBSTRUCTURES if np.any(pcls == c)}
        )
        ctrl[view.view_id] = uv_whole
        det = None
        if fiducial is not None:
            det, _ = bead_detections(fiducial, view, rng, noise.gaussian_sigma_px)
        recs[view.view_id] = ViewRecord(view.view_id, view.intrinsics, view.extrinsic, view.source_to_object_mm, det)
    return Scene(
        views=recs,
        observations=obs,
        control_contours=ctrl,
        registration_views=list(registration_views),
        control_views=list(control_views),
        reference_pose=true_pose,
        ground_truth=true_pose,
        metadata={
            "generator": "contourreg.synth",
            "ring": ring.to_dict(),
            "noise": noise.to_dict(),
            "sample_spacing_mm": sample_spacing,
        },
    )
