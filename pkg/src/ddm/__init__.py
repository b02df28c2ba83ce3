"""Cluster-level data attribution and fast unlearning with distilled synthetic sets.

Offline, a target network is trained with plain SGD and one synthetic sample
per cluster is optimised so that fine-tuning on it retraces the cluster's
contribution to the training trajectory in reverse. Online, perturbed models
obtained by fine-tuning on subsets of this synset are fitted with a linear
datamodel whose coefficients attribute a prediction to training clusters.
"""

from .errors import (ArtifactConflictError, ClusterSizeError, ConfigError, DDMError,
                     DegenerateSegmentError, IdxFormatError, MissingArtifactError, NumericError,
                     RankDeficientError, ShapeError, TrainingDiverged)
from .params import ParamVector, Segment, load_checkpoint, save_checkpoint

__all__ = [
    "ArtifactConflictError", "ClusterSizeError", "ConfigError", "DDMError",
    "DegenerateSegmentError", "IdxFormatError", "MissingArtifactError", "NumericError",
    "RankDeficientError", "ShapeError", "TrainingDiverged", "ParamVector", "Segment",
    "load_checkpoint", "save_checkpoint",
]

__version__ = "0.1.0"
