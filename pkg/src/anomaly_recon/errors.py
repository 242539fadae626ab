"""Exception types shared across the toolkit.

The CLI maps these onto process exit codes (see cli.EXIT_*).
"""


class AnomalyReconError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgumentError(AnomalyReconError, ValueError):
    """An argument violates a documented precondition (bad shape, range, ...)."""


class DegenerateInputError(AnomalyReconError, ValueError):
    """Input is structurally valid but carries no usable signal (constant image, empty mask)."""


class NumericFailureError(AnomalyReconError, RuntimeError):
    """A numeric computation produced non-finite values; carries diagnostics in the message."""


class MissingArtifactError(AnomalyReconError, FileNotFoundError):
    """A required on-disk artifact (dataset, checkpoint, score map) is absent."""


class ConfigError(AnomalyReconError, ValueError):
    """Experiment configuration failed validation."""
