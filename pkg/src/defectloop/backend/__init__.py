"""Pluggable predictor/trainer backends.

The built-in classical backend keeps the whole loop runnable with no deep
learning framework; real DL models plug in over the external HTTP
protocol.
"""

from .base import (
    BackendKind,
    LossKind,
    ModelHandle,
    Prediction,
    TrainingHyperparams,
    TrainingSample,
)
from .registry import ModelRegistry
from .reference import ReferenceClassicalBackend
from .external import ExternalBackend

__all__ = [
    "BackendKind",
    "LossKind",
    "ModelHandle",
    "Prediction",
    "TrainingHyperparams",
    "TrainingSample",
    "ModelRegistry",
    "ReferenceClassicalBackend",
    "ExternalBackend",
]
