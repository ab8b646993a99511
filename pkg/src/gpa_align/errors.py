"""Exception types for gpa-align."""


class GpaError(Exception):
    """Base error with structured information about what was rejected."""

    def __init__(self, message: str, key: str | None = None, value: object = None) -> None:
        super().__init__(message)
        self.message = message
        self.key = key
        self.value = value

    def __str__(self) -> str:
        if self.key:
            return f"{self.key}: {self.message}"
        return self.message


class InvalidParameterError(GpaError, ValueError):
    """A scalar hyper-parameter is outside its domain (sigma <= 0, gamma < 0, ...)."""


class InvalidInputError(GpaError, ValueError):
    """An array argument has the wrong shape or violates its invariants."""


class DegenerateGraphError(GpaError):
    """A relation graph has a vertex with zero degree."""


class InvalidSpecError(GpaError, ValueError):
    """A simulator domain spec cannot generate scenes."""


class ConfigError(GpaError):
    """A configuration key is unknown, mistyped or out of range."""


class InvariantViolation(GpaError):
    """A runtime invariant check failed during training or evaluation."""
