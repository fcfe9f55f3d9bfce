"""Scene container and its JSON encoding.

A scene file holds everything a registration run needs besides the mesh::

    {
      "format": "contourreg-scene/1",
      "views": [{"id": "v0", "intrinsics": {...}, "extrinsic": {...} | null,
                 "source_to_object_mm": 700.0,
                 "bead_detections": [[u, v], ...]}],
      "observations": [{"view_id": "v0", "points_by_class": {"1": [[u, v], ...]}}],
      "control_contours": [{"view_id": "v2", "points": [[u, v], ...]}],
      "registration_views": ["v0", "v6"],
      "control_views": ["v2", "v3", "v4"],
      "reference_pose": {"rotation": [[...]], "translation": [...]},
      "ground_truth": {"pose": {...}} | null,
      "metadata": {...}
    }

``reference_pose`` is the pose about which initial-pose offsets
``(tx, ty, tz, phi, theta, psi)`` are applied.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GeometryError
from .geometry import CameraIntrinsics, CameraView, RigidPose

FORMAT = "contourreg-scene/1"


@dataclass(frozen=True, eq=False)
class ContourObservation:
    """Observed 2D contour points (pixels) of one view, grouped by class."""

    view_id: str
    points_by_class: dict

    def __post_init__(self):
        pbc = {}
        for k, v in self.points_by_class.items():
            a = np.asarray(v, dtype=np.float64).reshape(-1, 2)
            a.setflags(write=False)
            pbc[int(k)] = a
        object.__setattr__(self, "points_by_class", dict(sorted(pbc.items())))

    @property
    def n_points(self) -> int:
        return sum(len(v) for v in self.points_by_class.values())

    def merged(self) -> ContourObservation:
        """All points under class 0, for silhouette-only matching."""
        pts = [v for v in self.points_by_class.values() if len(v)]
        allp = np.concatenate(pts) if pts else np.zeros((0, 2))
        return ContourObservation(self.view_id, {0: allp})

    def to_dict(self) -> dict:
        return {
            "view_id": self.view_id,
            "points_by_class": {str(k): v.tolist() for k, v in self.points_by_class.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> ContourObservation:
        return cls(d["view_id"], {int(k): v for k, v in d["points_by_class"].items()})


@dataclass
class ViewRecord:
    view_id: str
    intrinsics: CameraIntrinsics
    extrinsic: RigidPose | None = None
    source_to_object_mm: float | None = None
    bead_detections: np.ndarray | None = None

    def camera(self) -> CameraView:
        if self.extrinsic is None:
            raise GeometryError(f"view {self.view_id!r} has no extrinsic; run calibration first")
        return CameraView(self.intrinsics, self.extrinsic, self.view_id, self.source_to_object_mm)


@dataclass
class Scene:
    views: dict[str, ViewRecord]
    observations: dict[str, ContourObservation] = field(default_factory=dict)
    control_contours: dict[str, np.ndarray] = field(default_factory=dict)
    registration_views: list[str] = field(default_factory=list)
    control_views: list[str] = field(default_factory=list)
    reference_pose: RigidPose = field(default_factory=RigidPose.identity)
    ground_truth: RigidPose | None = None
    metadata: dict = field(default_factory=dict)

    def camera(self, view_id: str) -> CameraView:
        try:
            return self.views[view_id].camera()
        except KeyError:
            raise GeometryError(f"unknown view {view_id!r}") from None

    def cameras(self, ids) -> list[CameraView]:
        return [self.camera(v) for v in ids]

    def observations_for(self, ids) -> list[ContourObservation]:
        out = []
        for v in ids:
            if v not in self.observations:
                raise GeometryError(f"no contour observations for view {v!r}")
            out.append(self.observations[v])
        return out

    # -- JSON -------------------------------------------------------------

    def to_dict(self) -> dict:
        views = []
        for vid, rec in self.views.items():
            d = {
                "id": vid,
                "intrinsics": rec.intrinsics.to_dict(),
                "extrinsic": rec.extrinsic.to_dict() if rec.extrinsic is not None else None,
            }
            if rec.source_to_object_mm is not None:
                d["source_to_object_mm"] = rec.source_to_object_mm
            if rec.bead_detections is not None:
                d["bead_detections"] = np.asarray(rec.bead_detections).tolist()
            views.append(d)
        return {
            "format": FORMAT,
            "views": views,
            "observations": [o.to_dict() for o in self.observations.values()],
            "control_contours": [
                {"view_id": k, "points": np.asarray(v).tolist()} for k, v in self.control_contours.items()
            ],
            "registration_views": list(self.registration_views),
            "control_views": list(self.control_views),
            "reference_pose": self.reference_pose.to_dict(),
            "ground_truth": {"pose": self.ground_truth.to_dict()} if self.ground_truth is not None else None,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Scene:
        fmt = d.get("format", FORMAT)
        if fmt != FORMAT:
            raise GeometryError(f"unsupported scene format {fmt!r}")
        views = {}
        for v in d["views"]:
            ext = v.get("extrinsic")
            det = v.get("bead_detections")
            views[v["id"]] = ViewRecord(
                view_id=v["id"],
                intrinsics=CameraIntrinsics.from_dict(v["intrinsics"]),
                extrinsic=RigidPose.from_dict(ext) if ext else None,
                source_to_object_mm=v.get("source_to_object_mm"),
                bead_detections=np.asarray(det, dtype=np.float64).reshape(-1, 2) if det is not None else None,
            )
        obs = {}
        for o in d.get("observations", []):
            co = ContourObservation.from_dict(o)
            if co.view_id not in views:
                raise GeometryError(f"observation refers to unknown view {co.view_id!r}")
            obs[co.view_id] = co
        gt = d.get("ground_truth")
        return cls(
            views=views,
            observations=obs,
            control_contours={
                c["view_id"]: np.asarray(c["points"], dtype=np.float64).reshape(-1, 2)
                for c in d.get("control_contours", [])
            },
            registration_views=list(d.get("registration_views", [])),
            control_views=list(d.get("control_views", [])),
            reference_pose=RigidPose.from_dict(d["reference_pose"]) if d.get("reference_pose") else RigidPose.identity(),
            ground_truth=RigidPose.from_dict(gt["pose"]) if gt else None,
            metadata=d.get("metadata", {}),
        )


def dumps_json(obj) -> str:
    """Stable JSON text: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def save_scene(path, scene: Scene) -> None:
    Path(path).write_text(dumps_json(scene.to_dict()))


def load_scene(path) -> Scene:
    return Scene.from_dict(json.loads(Path(path).read_text()))
