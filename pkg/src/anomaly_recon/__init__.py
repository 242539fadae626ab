"""Unsupervised abnormality localization toolkit.

Learns global (image-level) and local (patch-level) features of normal
anatomy from unlabeled images, reconstructs normal-appearing replicas of
unseen slices, scores per-pixel abnormality from patch-embedding distances,
rates reconstruction fidelity with a segmentation network, and evaluates
detection with a rectified body-masked ROC protocol.
"""

__version__ = "0.1.0"

from .errors import (
    AnomalyReconError,
    ConfigError,
    DegenerateInputError,
    InvalidArgumentError,
    MissingArtifactError,
    NumericFailureError,
)

__all__ = [
    "AnomalyReconError",
    "ConfigError",
    "DegenerateInputError",
    "InvalidArgumentError",
    "MissingArtifactError",
    "NumericFailureError",
    "__version__",
]
