# errors.py
"""Exceptions raised across lossscope. Only main.py catches them."""


class LossscopeError(Exception):
    """Base class for every error this project raises on purpose."""


class UsageError(LossscopeError):
    """Bad command line: missing files, bad flags. CLI exit code 1."""


class ConfigError(LossscopeError, ValueError):
    pass


class LayoutMismatchError(LossscopeError, ValueError):
    """Two parameter vectors (or a vector and a model) disagree on layout."""


class ZeroDirectionError(LossscopeError, ValueError):
    pass


class InvalidGroupError(LossscopeError, ValueError):
    pass


class TokenRangeError(LossscopeError, ValueError):
    pass


class EmptyDatasetError(LossscopeError, ValueError):
    pass


class UnknownKindError(LossscopeError, ValueError):
    pass


class TrajectoryError(LossscopeError, ValueError):
    pass


class FormatError(LossscopeError, ValueError):
    """A file on disk does not parse as the format it claims to be."""


class GridEvaluationError(LossscopeError, RuntimeError):
    """An evaluator failed at one grid cell; carries the cell coordinates."""

    def __init__(self, alpha, beta, cause):
        self.alpha = alpha
        self.beta = beta
        self.cause = cause
        super().__init__(f"evaluation failed at alpha={alpha!r}, beta={beta!r}: {cause}")
