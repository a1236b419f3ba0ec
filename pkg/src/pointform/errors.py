"""Exception hierarchy. Each branch maps to one CLI exit code (see cli.py)."""


class PointformError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1
    kind = "internal"


class ConfigError(PointformError):
    """Invalid configuration value or combination (exit 2)."""

    exit_code = 2
    kind = "config"


class InputError(PointformError):
    """Invalid or empty runtime data: clouds, datasets, indices (exit 3)."""

    exit_code = 3
    kind = "data"


class NumericError(PointformError):
    """Non-finite values where finite ones are required (exit 4)."""

    exit_code = 4
    kind = "numeric"


class FormatError(PointformError):
    """Malformed on-disk artifact: checkpoint, PLY/XYZ, manifest (exit 5)."""

    exit_code = 5
    kind = "format"


class ParseError(FormatError):
    """Text parse failure; carries the 1-based line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ShapeError(PointformError):
    """Tensor operand shapes are incompatible (exit 4: numeric misuse)."""

    exit_code = 4
    kind = "shape"


class GraphError(PointformError):
    """Autodiff graph misuse, e.g. backward from a non-graph tensor."""

    exit_code = 4
    kind = "graph"
