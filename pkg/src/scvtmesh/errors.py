"""Exception and warning types shared across the package."""


class ScvtError(Exception):
    """Base class for all numerical/geometric failures (CLI exit code 2)."""


class ConfigError(ScvtError):
    """Invalid run configuration or file format (CLI exit code 1)."""


class MeshFormatError(ConfigError):
    """Mesh file could not be parsed; message carries the line number."""


class AntipodeError(ScvtError):
    """Stereographic projection attempted at/near the antipode of the contact point."""


class DegenerateTriangleError(ScvtError):
    """Triangle vertices (nearly) on a common great circle; no circumcircle."""


class CollinearInputError(ScvtError):
    """Planar point set is collinear; no triangulation exists."""


class InsufficientPointsError(ScvtError):
    """A subregion holds fewer than 3 points; enlarge overlaps or lower the partition count."""


class CoverageError(ScvtError):
    """Merged cap triangulations do not cover the sphere (broken generator fan)."""


class PoleAmbiguityError(ScvtError):
    """Longitude undefined within tolerance of a pole."""


class CentroidAtOriginError(ScvtError):
    """Cell first moment is (numerically) zero; constrained centroid undefined."""


class IncompleteCellError(ScvtError):
    """Moment accumulation hit a generator whose triangle fan is truncated."""


class NonpositiveDiagonalError(ScvtError):
    """Lloyd preconditioner diagonal has a nonpositive entry."""


class FactorizationError(ScvtError):
    """Perturbed graph Laplacian is numerically indefinite."""


class NonDescentError(ScvtError):
    """Quasi-Newton direction is not a descent direction."""


class LineSearchFailure(ScvtError):
    """No trial step decreased the energy."""


class InvalidTriangleError(ScvtError):
    """Edge lengths violate the triangle inequality beyond tolerance."""


class UnderfilledPartitionWarning(UserWarning):
    """Fewer than 16 points per partition cell on average."""


class ObtuseWarning(UserWarning):
    """Circumcenter fell outside its triangle (handled via signed areas)."""
