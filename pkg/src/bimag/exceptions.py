"""Exception hierarchy shared across the package."""


class BImagError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(BImagError, ValueError):
    """Operand dimensions do not agree."""


class NumericError(BImagError, FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""


class GraphError(BImagError, RuntimeError):
    """Misuse of the computation graph (non-scalar loss, double backward)."""


class SpecError(BImagError, ValueError):
    """Invalid benchmark or task-split specification."""


class SchemaError(BImagError, ValueError):
    """A data file parsed but violates the expected schema."""


class ParseError(SchemaError):
    """A data file row could not be parsed."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class CapabilityError(BImagError, RuntimeError):
    """The requested generation is impossible for the chosen conditioning."""


class MetricError(BImagError, ValueError):
    """A metric is undefined for the given inputs."""


class ConfigError(BImagError, ValueError):
    """An experiment configuration is invalid; carries the offending key."""

    def __init__(self, message, key=None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)
