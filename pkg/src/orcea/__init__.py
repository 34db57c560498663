"""Detection of parametric shape models from sets of local image evidence.

Evidence (edge and area elements) is combined with learned evidence/model
relations into a Gaussian-mixture posterior over the model parameters;
detections are read off its modes.
"""

from . import accumulate, gauss, mixture, query, scene, study
from .errors import (
    ConfigError,
    ContractViolation,
    InsufficientData,
    ModelFileError,
    NotPositiveDefinite,
    OrceaError,
    PriorTooNarrow,
    UnsupportedVersion,
)

__version__ = "0.1.0"

__all__ = [
    "accumulate", "gauss", "mixture", "query", "scene", "study",
    "ConfigError", "ContractViolation", "InsufficientData", "ModelFileError",
    "NotPositiveDefinite", "OrceaError", "PriorTooNarrow", "UnsupportedVersion",
]
