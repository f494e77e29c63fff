"""Exception taxonomy shared by all modules.

The CLI maps these onto process exit codes: configuration errors exit 1,
data/format errors exit 2, numeric errors exit 3.
"""


class ToolkitError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(ToolkitError):
    """Invalid configuration value or an impossible parameter combination."""


class DataError(ToolkitError):
    """Inconsistent or unresolvable data (bad references, unknown ids)."""


class FormatError(DataError):
    """A file does not conform to its declared format (bad magic, version)."""


class CorruptionError(FormatError):
    """A structurally valid file whose payload is truncated or inconsistent."""


class ShapeError(DataError):
    """Array dimensionality mismatch between inputs that must agree."""


class ConsistencyError(DataError):
    """An operation would violate a cross-object invariant."""


class NumericError(ToolkitError):
    """Non-finite values or numerically invalid inputs."""


class DomainError(NumericError):
    """A numeric input outside the mathematical domain of an operation."""
