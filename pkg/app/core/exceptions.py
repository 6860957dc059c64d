"""Custom exceptions for the pulse-family toolkit."""

from typing import Any


class RydbergControlError(Exception):
    """Base exception for pulse-family toolkit errors."""

    def __init__(self, message: str, details: Any = None) -> None:
        self.message = message
        self.details = details
        super().__init__(self.message)


class ConfigError(RydbergControlError):
    """Raised when a run configuration fails schema validation.

    ``details`` holds the list of individual schema errors.
    """

    pass


class DomainError(RydbergControlError):
    """Raised when an angle, time or interval lies outside its domain."""

    pass


class UnsupportedSystemError(RydbergControlError):
    """Raised for atom systems outside the modelled scope."""

    pass


class PropagationError(RydbergControlError):
    """Raised when time evolution cannot be carried out."""

    pass


class WeightsFormatError(RydbergControlError):
    """Raised when a weights file is malformed or has the wrong version."""

    pass


class TrainingDivergedError(RydbergControlError):
    """Raised when the loss becomes non-finite during training.

    ``details`` carries the last iteration with a finite loss.
    """

    pass


class CoverageError(RydbergControlError):
    """Raised when trained networks do not cover the gate domain.

    ``details`` lists the missing intervals.
    """

    pass


class FitError(RydbergControlError):
    """Raised when a pulse-time fit is singular or does not converge."""

    pass
