"""Exception types shared across the package."""


class OrceaError(Exception):
    """Base class for all package errors."""


class ContractViolation(OrceaError, ValueError):
    """An argument broke a documented precondition (shape, range, type)."""


class NotPositiveDefinite(OrceaError, ArithmeticError):
    """A covariance that must be positive definite is not."""


class PriorTooNarrow(OrceaError):
    """The prior is not broad enough for a conditional/prior quotient."""


class InsufficientData(OrceaError):
    """Too few samples or observations for the requested fit."""


class ModelFileError(OrceaError):
    """A studied-model file is malformed or fails validation."""


class UnsupportedVersion(ModelFileError):
    """A studied-model file carries a format version this build cannot read."""


class ConfigError(OrceaError, ValueError):
    """A benchmark or CLI configuration is invalid."""
