"""Exception hierarchy shared by every module.

``ConfigError`` maps to CLI exit code 1 (bad input), everything else under
``EngineError`` maps to exit code 2 (runtime failure).
"""


class EngineError(Exception):
    """Base class for all package errors."""


class ShapeError(EngineError):
    """A tensor dimension violates an operation's contract."""

    def __init__(self, op: str, dimension: str, expected, actual):
        self.op = op
        self.dimension = dimension
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"{op}: {dimension} mismatch (expected {expected}, got {actual})"
        )


class StateError(EngineError):
    """An operation was called before the state it needs exists."""


class ConfigError(EngineError):
    """Invalid configuration or argument values."""


class DataError(EngineError):
    """Dataset files are missing, unreadable, or inconsistent."""


class CheckpointError(EngineError):
    """A parameter checkpoint cannot be read or does not match the model."""


class TrainingError(EngineError):
    """The optimization loop hit a non-recoverable condition."""
