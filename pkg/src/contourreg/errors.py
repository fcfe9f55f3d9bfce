"""Exception types raised across the package."""


class ContourRegError(Exception):
    """Base class for all package errors."""


class GeometryError(ContourRegError):
    """Invalid or degenerate geometric input (CLI exit code 2)."""


class AlgorithmError(ContourRegError):
    """An algorithm ran but produced no usable answer (CLI exit code 3)."""


class NonPositiveDepth(GeometryError):
    pass


class DegenerateGeometry(GeometryError):
    pass


class NonManifoldEdge(GeometryError):
    pass


class NonManifoldResult(GeometryError):
    pass


class OutOfFrame(GeometryError):
    def __init__(self, view_id):
        super().__init__(f"silhouette leaves the image in view {view_id!r}")
        self.view_id = view_id


class EmptySilhouette(GeometryError):
    def __init__(self, class_id, view_id):
        super().__init__(f"no silhouette samples of class {class_id} in view {view_id!r}")
        self.class_id = class_id
        self.view_id = view_id


class CollinearPoints(GeometryError):
    pass


class NoRealSolution(AlgorithmError):
    pass


class InsufficientDetections(AlgorithmError):
    """Too few bead detections to attempt calibration."""


class NoValidPose(AlgorithmError):
    pass


class SingularNormalEquations(AlgorithmError):
    pass


class EmptyInput(ContourRegError, ValueError):
    pass


class DegenerateRanks(ContourRegError, ValueError):
    pass
