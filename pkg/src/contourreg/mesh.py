"""Labeled triangle meshes: PLY I/O, substructure labeling and silhouettes.

Class ids: 1 diaphysis, 2 medial condyle, 3 lateral condyle, 0 unlabeled.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import _kernels
from .errors import ContourRegError, DegenerateGeometry, GeometryError, NonManifoldEdge
from .geometry import CameraView, RigidPose

DIAPHYSIS, MEDIAL_CONDYLE, LATERAL_CONDYLE = 1, 2, 3
SUBSTRUCTURES = (DIAPHYSIS, MEDIAL_CONDYLE, LATERAL_CONDYLE)
DEFAULT_SAMPLE_SPACING_MM = 1.0


@dataclass(frozen=True, eq=False)
class LabeledMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    vertex_class: np.ndarray

    def __post_init__(self):
        V = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        F = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        c = np.array(self.vertex_class, dtype=np.int64).reshape(-1)
        if len(c) != len(V):
            raise GeometryError("vertex_class length differs from vertex count")
        if len(F) and (F.min() < 0 or F.max() >= len(V)):
            raise GeometryError("triangle index out of range")
        for a in (V, F, c):
            a.setflags(write=False)
        object.__setattr__(self, "vertices", V)
        object.__setattr__(self, "triangles", F)
        object.__setattr__(self, "vertex_class", c)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def is_labeled(self) -> bool:
        return bool(len(self.vertex_class)) and bool(np.all(self.vertex_class > 0))

    def with_classes(self, vertex_class) -> LabeledMesh:
        return LabeledMesh(self.vertices, self.triangles, vertex_class)

    @cached_property
    def topology(self) -> MeshTopology:
        return MeshTopology.build(self)

    @cached_property
    def face_normals(self) -> np.ndarray:
        V, F = self.vertices, self.triangles
        return np.ascontiguousarray(np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]]))

    @cached_property
    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    @cached_property
    def principal_axes(self) -> tuple[np.ndarray, np.ndarray]:
        """Eigenvalues (descending) and eigenvectors (columns) of the vertex covariance."""
        X = self.vertices - self.centroid
        w, U = np.linalg.eigh(X.T @ X / max(len(X), 1))
        return w[::-1], U[:, ::-1]

    @property
    def first_principal_axis(self) -> np.ndarray:
        return self.principal_axes[1][:, 0]

    def max_edge_length(self) -> float:
        t = self.topology
        return float(t.lengths.max()) if len(t.lengths) else 0.0

    def check(self) -> None:
        """Raise NonManifoldEdge unless the mesh is closed, edge-manifold and consistently oriented."""
        _ = self.topology


@dataclass(frozen=True, eq=False)
class MeshTopology:
    edges: np.ndarray  # (E, 2) sorted vertex ids; edge id = row
    edge_faces: np.ndarray  # (E, 2) adjacent triangles
    edge_class: np.ndarray  # (E,) shared endpoint class, -1 when mixed
    midpoints: np.ndarray
    lengths: np.ndarray

    @classmethod
    def build(cls, mesh: LabeledMesh) -> MeshTopology:
        F = mesh.triangles
        if len(F) == 0:
            raise NonManifoldEdge("mesh has no triangles")
        he = np.stack([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]], axis=1).reshape(-1, 2)
        face = np.repeat(np.arange(len(F)), 3)
        key = np.sort(he, axis=1)
        edges, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        inv = inv.reshape(-1)
        if np.any(counts == 1):
            e = edges[np.argmax(counts == 1)]
            raise NonManifoldEdge(f"boundary edge {tuple(int(v) for v in e)}")
        if np.any(counts > 2):
            e = edges[np.argmax(counts > 2)]
            raise NonManifoldEdge(f"edge {tuple(int(v) for v in e)} shared by more than two triangles")
        directed = np.unique(he, axis=0)
        if len(directed) != len(he):
            raise NonManifoldEdge("inconsistent triangle orientation")
        order = np.argsort(inv, kind="stable")
        edge_faces = face[order].reshape(-1, 2)
        V = mesh.vertices
        c = mesh.vertex_class
        ca, cb = c[edges[:, 0]], c[edges[:, 1]]
        edge_class = np.where(ca == cb, ca, -1)
        mid = 0.5 * (V[edges[:, 0]] + V[edges[:, 1]])
        lengths = np.linalg.norm(V[edges[:, 1]] - V[edges[:, 0]], axis=1)
        arrs = [np.ascontiguousarray(a) for a in (edges, edge_faces, edge_class, mid, lengths)]
        for a in arrs:
            a.setflags(write=False)
        return cls(*arrs)


class SilhouetteSample(NamedTuple):
    position: np.ndarray
    class_id: int
    source_edge: int


@dataclass(frozen=True, eq=False)
class SilhouetteSamples:
    """Structure-of-arrays silhouette samples in the model frame."""

    positions: np.ndarray  # (N, 3)
    class_id: np.ndarray  # (N,)
    source_edge: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i) -> SilhouetteSample:
        return SilhouetteSample(self.positions[i], int(self.class_id[i]), int(self.source_edge[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def of_class(self, class_id: int) -> SilhouetteSamples:
        m = self.class_id == class_id
        return SilhouetteSamples(self.positions[m], self.class_id[m], self.source_edge[m])


def silhouette_edge_mask(mesh: LabeledMesh, pose: RigidPose, view: CameraView) -> np.ndarray:
    """Edges whose two triangles face opposite ways as seen from the source."""
    topo = mesh.topology
    eye = pose.inverse().apply(view.center)
    return _kernels.silhouette_mask(eye, topo.midpoints, mesh.face_normals, topo.edge_faces)


def extract_silhouette(
    mesh: LabeledMesh,
    pose: RigidPose,
    view: CameraView,
    sample_spacing: float = DEFAULT_SAMPLE_SPACING_MM,
    whole: bool = False,
) -> SilhouetteSamples:
    """Sample the occluding contour of ``mesh`` posed by ``pose`` in ``view``.

    No hidden-surface removal is done: X-rays are transmissive, so contours
    of every substructure are kept even where another one overlaps them.
    With ``whole=False`` only edges whose endpoints share a substructure class
    in {1, 2, 3} are kept. ``whole=True`` keeps every silhouette edge (the
    object-level outline); mixed-class edges then carry class 0.

    Samples sit at the midpoints of ``ceil(length / sample_spacing)`` equal
    sub-segments of each edge, so consecutive samples are at most
    ``sample_spacing`` apart and no sample is shared between edges.
    """
    if not sample_spacing > 0:
        raise ValueError("sample_spacing must be positive")
    topo = mesh.topology
    mask = silhouette_edge_mask(mesh, pose, view)
    if whole:
        ids = np.flatnonzero(mask)
        cls = np.maximum(topo.edge_class[ids], 0)
    else:
        ids = np.flatnonzero(mask & np.isin(topo.edge_class, SUBSTRUCTURES))
        cls = topo.edge_class[ids]
    n = np.maximum(np.ceil(topo.lengths[ids] / sample_spacing - 1e-12).astype(np.int64), 1)
    edge_rep = np.repeat(np.arange(len(ids)), n)
    start = np.cumsum(n) - n
    k = np.arange(n.sum()) - np.repeat(start, n)
    frac = (k + 0.5) / np.repeat(n, n)
    e = topo.edges[ids[edge_rep]]
    V = mesh.vertices
    pos = V[e[:, 0]] + frac[:, None] * (V[e[:, 1]] - V[e[:, 0]])
    return SilhouetteSamples(pos, cls[edge_rep].astype(np.int64), ids[edge_rep].astype(np.int64))


# ---------------------------------------------------------------------------
# substructure labeling
# ---------------------------------------------------------------------------

def segment_principal_axis(
    mesh: LabeledMesh,
    condyle_split_plane: tuple | None = None,
    keep_labels: bool = False,
) -> LabeledMesh:
    """Label vertices as diaphysis / medial / lateral condyle.

    The mesh is cut by the plane through the vertex centroid orthogonal to
    the first principal component. The side reaching farther from the
    centroid along that axis is the diaphysis (class 1). The other part is
    split into classes 2 and 3 either by ``condyle_split_plane`` given as
    ``(point, normal)`` (positive side -> 2) or by the sign of the coordinate
    along the distal part's widest direction orthogonal to the axis, measured
    from the distal centroid. That direction is oriented so its largest
    component is positive; the positive side becomes class 2.
    """
    if keep_labels and mesh.is_labeled:
        return mesh
    V = mesh.vertices
    if len(V) < 4:
        raise DegenerateGeometry("need at least 4 vertices")
    X = V - V.mean(axis=0)
    sv = np.linalg.svd(X, compute_uv=False)
    if sv[0] == 0.0 or sv[2] <= 1e-9 * sv[0]:
        raise DegenerateGeometry("vertices are coplanar")
    w, U = np.linalg.eigh(X.T @ X / len(X))
    if w[2] - w[1] <= 1e-9 * max(w[2], 1.0):
        raise DegenerateGeometry("no unique first principal axis")
    axis = U[:, 2]
    s = X @ axis
    if s.max() > -s.min():
        axis, s = -axis, -s  # point the axis toward the distal (shorter) side
    distal = s > 0.0
    cls = np.full(len(V), DIAPHYSIS, dtype=np.int64)
    if condyle_split_plane is not None:
        p, n = (np.asarray(a, dtype=np.float64) for a in condyle_split_plane)
        side = (V - p) @ n > 0.0
    else:
        D = V[distal]
        if len(D) < 2:
            raise DegenerateGeometry("distal part has fewer than two vertices")
        Dc = D - D.mean(axis=0)
        Dc = Dc - np.outer(Dc @ axis, axis)
        _, _, Vt = np.linalg.svd(Dc, full_matrices=False)
        split = Vt[0]
        if split[np.argmax(np.abs(split))] < 0:
            split = -split
        side = (V - D.mean(axis=0)) @ split > 0.0
    cls[distal & side] = MEDIAL_CONDYLE
    cls[distal & ~side] = LATERAL_CONDYLE
    return mesh.with_classes(cls)


# ---------------------------------------------------------------------------
# ASCII PLY
# ---------------------------------------------------------------------------

class PlyFormatError(ContourRegError):
    pass


_PLY_SCALARS = {
    "char", "uchar", "short", "ushort", "int", "uint", "float", "double",
    "int8", "uint8", "int16", "uint16", "int32", "uint32", "float32", "float64",
}


def write_ply(path, mesh: LabeledMesh) -> None:
    """Write an ASCII PLY with an integer per-vertex ``class`` property."""
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {mesh.n_vertices}",
        "property double x",
        "property double y",
        "property double z",
        "property int class",
        f"element face {len(mesh.triangles)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for p, c in zip(mesh.vertices, mesh.vertex_class):
        x, y, z = (float(v) for v in p)
        lines.append(f"{x!r} {y!r} {z!r} {int(c)}")
    for f in mesh.triangles:
        lines.append(f"3 {int(f[0])} {int(f[1])} {int(f[2])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_ply(path) -> LabeledMesh:
    """Read an ASCII PLY mesh; vertices without a ``class`` property get class 0."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise PlyFormatError("not a PLY file")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body_start = raw.find(b"\n", end)
    body = raw[body_start + 1:].decode("ascii").split("\n") if body_start >= 0 else []

    fmt = None
    elements: list[tuple[str, int, list]] = []
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise PlyFormatError("property before element")
            elements[-1][2].append(tok[1:])
    if fmt != "ascii":
        raise PlyFormatError(f"only ASCII PLY is supported, got format {fmt!r}")

    rows = iter(l for l in body if l.strip())
    verts = cls = None
    faces = None
    for name, count, props in elements:
        data = [next(rows).split() for _ in range(count)]
        if name == "vertex":
            names = [p[-1] for p in props]
            for p in props:
                if p[0] == "list" or p[0] not in _PLY_SCALARS:
                    raise PlyFormatError(f"unsupported vertex property {p}")
            arr = np.array(data, dtype=np.float64).reshape(count, len(names))
            try:
                verts = arr[:, [names.index("x"), names.index("y"), names.index("z")]]
            except ValueError as exc:
                raise PlyFormatError("vertex element lacks x/y/z") from exc
            cls = arr[:, names.index("class")].astype(np.int64) if "class" in names else np.zeros(count, np.int64)
        elif name == "face":
            tris = []
            for tok in data:
                k = int(tok[0])
                if k != 3:
                    raise PlyFormatError("only triangular faces are supported")
                tris.append([int(v) for v in tok[1:4]])
            faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    if verts is None or faces is None:
        raise PlyFormatError("PLY needs vertex and face elements")
    return LabeledMesh(verts, faces, cls)
