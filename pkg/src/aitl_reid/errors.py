"""Exception types raised across the package."""


class ReIDError(Exception):
    """Base class for all package errors."""


class ZeroVectorError(ReIDError, ValueError):
    pass


class DimensionMismatchError(ReIDError, ValueError):
    pass


class ShapeError(ReIDError, ValueError):
    pass


class ShapeMismatchError(ShapeError):
    pass


class InsufficientIdentitiesError(ReIDError, ValueError):
    pass


class DegenerateBatchError(ReIDError, ValueError):
    pass


class LabelOutOfRangeError(ReIDError, ValueError):
    pass


class ConfigError(ReIDError, ValueError):
    pass


class MissingAnnotationError(ReIDError, FileNotFoundError):
    pass


class LayoutError(ReIDError, ValueError):
    pass


class NoValidGalleryError(ReIDError, ValueError):
    """A query has no admissible gallery match after camera filtering."""

    def __init__(self, query_index, message=None):
        self.query_index = query_index
        super().__init__(message or f"query {query_index} has no valid gallery match")
