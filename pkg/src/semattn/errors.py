"""Exception types shared across the package."""


class SemAttnError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SemAttnError, ValueError):
    """Tensor dimensions do not match an operation's contract."""


class FormatError(SemAttnError, ValueError):
    """A serialized artifact (.sem, checkpoint, CAM grid) is malformed."""


class ConfigError(SemAttnError, ValueError):
    """A configuration key or value is invalid."""


class DependencyError(SemAttnError, RuntimeError):
    """A required input artifact (e.g. a branch checkpoint) is missing."""


class TrainingDiverged(SemAttnError, RuntimeError):
    """Non-finite values appeared during optimization."""


class UndefinedMetricError(SemAttnError, ValueError):
    """A metric was requested over an empty record set."""
