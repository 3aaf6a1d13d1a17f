"""Exception types raised by the map-tag pipeline."""


class MapTagError(Exception):
    """Base class for all package errors."""


class PcdError(MapTagError):
    """Base class for PCD file problems."""


class MissingFieldError(PcdError):
    """A required field (x, y, z or intensity) is absent from the header."""


class MalformedHeaderError(PcdError):
    """The PCD header could not be parsed."""


class TruncatedDataError(PcdError):
    """The data section ends before the declared point count."""


class EmptyCloudError(MapTagError):
    """An operation that needs points was given an empty cloud."""


class DegenerateNeighborhoodError(MapTagError):
    """All neighborhood points coincide; no local model exists."""


class DegenerateClusterError(MapTagError):
    """Cluster has fewer than 3 non-collinear points; no box fits."""


class ZeroWidthError(MapTagError):
    """Box width is zero; aspect ratio undefined."""


class EmptySelectionError(MapTagError):
    """Buffered box selection contains no points."""


class DegenerateImageError(MapTagError):
    """Projected points cover too few pixels to form an image."""


class TooFewPixelsError(MapTagError):
    """Image has fewer than the minimum number of non-empty pixels."""


class FrameCheckFailedError(MapTagError):
    """Candidate quad lacks the black border / white margin structure."""


class AmbiguousMatchError(MapTagError):
    """More than one dictionary entry matched within the correction radius."""


class DegenerateVerticesError(MapTagError):
    """Vertices are collinear or coincident; pose is underdetermined."""


class PlanarityViolationError(MapTagError):
    """Detected vertices do not lie on a common plane within tolerance."""


class InvalidSpecError(MapTagError):
    """Scene or pipeline configuration is structurally invalid."""
