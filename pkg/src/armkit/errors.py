"""Exception types shared across the package."""


class ArmkitError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ArmkitError):
    """A config object carries invalid or inconsistent fields."""


class UsageError(ArmkitError):
    """An operation was called in a state where it is not allowed."""


class ValidationError(ArmkitError):
    """Input data violates a documented precondition."""


class DomainError(ArmkitError):
    """A numeric argument lies outside its mathematical domain."""


class ShapeError(ArmkitError):
    """Tensor operands do not conform."""


class ConflictError(ArmkitError):
    """A write collides with an existing record."""


class NotFoundError(ArmkitError):
    """A referenced record does not exist."""


class StorageError(ArmkitError):
    """An underlying I/O operation failed."""


class TrainingError(ArmkitError):
    """Training diverged or hit a non-finite loss."""


class LeaseError(ArmkitError):
    """An annotation task lease is missing or expired."""


class InconsistentLabelsError(ValidationError):
    """Reconstruction targets contradict the accumulated label deltas."""
