"""Exception types shared across the package."""


class StganError(Exception):
    """Base class for every error this package raises on purpose."""


class ShapeError(StganError, ValueError):
    """Tensor shapes do not conform to an operation's contract."""


class ConfigError(StganError, ValueError):
    """A configuration value is outside its documented range."""


class ContractViolation(StganError, RuntimeError):
    """An API was called outside its documented protocol (e.g. backward before forward)."""


class GraphConstructionError(StganError, ValueError):
    """The station set cannot produce a usable graph."""


class DegenerateGeometryError(GraphConstructionError):
    """Pairwise station distances carry no spread, so kernel weights are undefined."""


class EmptySeriesError(StganError, ValueError):
    """A flow series or score list holds no usable observations."""


class AlignmentError(StganError, ValueError):
    """Per-camera series or station sets do not line up."""


class CheckpointMismatchError(StganError, ValueError):
    """A checkpoint does not match the active graph or the expected parameter shapes."""


class TrainingError(StganError, RuntimeError):
    """Training or detection cannot proceed with the given data."""


class InjectionConflictError(StganError, ValueError):
    """Two injected anomalies overlap on the same camera."""


class UndefinedPrecisionError(StganError, ValueError):
    """Precision was requested for a report with no labeled rows."""
