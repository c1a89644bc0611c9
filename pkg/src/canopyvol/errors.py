"""Exception hierarchy shared by all pipeline stages."""


class CanopyError(Exception):
    """Base class for every error raised by canopyvol."""


class ParameterError(CanopyError, ValueError):
    """A parameter is outside its valid domain."""


class EmptyInputError(CanopyError, ValueError):
    """An operation that needs at least one point received none."""


class ParseError(CanopyError, ValueError):
    """A point-cloud or report file could not be parsed."""


class ValidationError(CanopyError, ValueError):
    """Records or labels violate a structural constraint."""


class FitError(CanopyError):
    """Model fitting (RANSAC) could not produce a plane."""


class SegmentationError(CanopyError):
    """Clustering failed numerically."""


class DegenerateGeometryError(CanopyError):
    """Too few or coplanar points for a volumetric reconstruction."""


class TopologyError(CanopyError):
    """A mesh is not closed or not consistently oriented."""
