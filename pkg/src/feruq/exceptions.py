"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: validation errors exit 1, parse and IO
errors exit 2, training failures exit 3.
"""


class FeruqError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(FeruqError, ValueError):
    """Input violates a documented precondition."""


class DimensionError(ValidationError):
    """Array shapes do not chain or do not match the model."""


class UsageError(FeruqError):
    """API used in an inconsistent way, e.g. forward and backward masks differ."""


class TrainingError(FeruqError, RuntimeError):
    """Optimisation failed, typically from non-finite gradients."""

    def __init__(self, message, member=None):
        if member is not None:
            message = f"ensemble member {member}: {message}"
        super().__init__(message)
        self.member = member


class ParseError(FeruqError):
    """A data file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(ParseError):
    """A data file is missing its header or has the wrong layout."""
