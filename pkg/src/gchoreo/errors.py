"""Exception types shared across the package."""


class GChoreoError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(GChoreoError, ValueError):
    """Caller passed a value violating a documented precondition."""


class BehindCameraError(GChoreoError):
    """A joint has non-positive depth and cannot be projected."""

    def __init__(self, frame: int, joint: int, depth: float):
        self.frame = frame
        self.joint = joint
        self.depth = depth
        super().__init__(f"joint {joint} at frame {frame} is behind the camera (z={depth:g})")


class OptimizationFailureError(GChoreoError):
    """Energy became non-finite; carries the last valid iterate."""

    def __init__(self, message: str, last_iterate=None):
        self.last_iterate = last_iterate
        super().__init__(message)


class DegenerateGeometryError(GChoreoError):
    """Input geometry is collinear/coincident and underdetermines the fit."""


class TrainingFailureError(GChoreoError):
    """Training loss became non-finite at the given step."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite training loss at step {step}")


class UndefinedMetricError(GChoreoError):
    """Metric is undefined for this input (e.g. no music beats)."""


class FormatError(GChoreoError):
    """A binary or JSON container violates its format contract."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class CorruptionError(FormatError):
    """Container payload fails its integrity check."""


class ConfigError(GChoreoError, ValueError):
    """Run configuration violates the schema; message is path-qualified."""
