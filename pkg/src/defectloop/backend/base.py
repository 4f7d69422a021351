"""Shared backend contract: predictions, hyperparameters, model handles."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Optional, Protocol, Sequence

import numpy as np

from ..annotations import AnnotationSet, BoxAnnotation, DefectClass, Task
from ..errors import HyperparamOutOfRangeError, MalformedResponseError

EPOCH_RANGE = (30, 45)
LEARNING_RATE_RANGE = (6e-6, 3e-4)
DEFAULT_BATCH_SIZE = 20


class LossKind(str, Enum):
    SPARSE_CATEGORICAL_CROSS_ENTROPY = "sparse_categorical_cross_entropy"
    FOCAL = "focal"


class BackendKind(str, Enum):
    REFERENCE_CLASSICAL = "reference_classical"
    EXTERNAL = "external"


@dataclass(frozen=True, slots=True)
class TrainingHyperparams:
    """Contract-checked for every backend, even ones that ignore a field,
    so one config file ports across backends."""

    epochs: int = 35
    batch_size: int = DEFAULT_BATCH_SIZE
    learning_rate: float = 1e-4
    loss: LossKind = LossKind.SPARSE_CATEGORICAL_CROSS_ENTROPY

    def __post_init__(self):
        if not EPOCH_RANGE[0] <= self.epochs <= EPOCH_RANGE[1]:
            raise HyperparamOutOfRangeError(
                f"epochs must lie in {EPOCH_RANGE}, got {self.epochs}"
            )
        if self.batch_size < 1:
            raise HyperparamOutOfRangeError("batch_size must be >= 1")
        if not LEARNING_RATE_RANGE[0] <= self.learning_rate <= LEARNING_RATE_RANGE[1]:
            raise HyperparamOutOfRangeError(
                f"learning_rate must lie in {LEARNING_RATE_RANGE}, got {self.learning_rate}"
            )

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "loss": self.loss.value,
        }

    @classmethod
    def from_json_dict(cls, doc: dict[str, Any]) -> "TrainingHyperparams":
        return cls(
            epochs=int(doc.get("epochs", 35)),
            batch_size=int(doc.get("batch_size", DEFAULT_BATCH_SIZE)),
            learning_rate=float(doc.get("learning_rate", 1e-4)),
            loss=LossKind(doc.get("loss", LossKind.SPARSE_CATEGORICAL_CROSS_ENTROPY.value)),
        )


@dataclass(frozen=True, slots=True)
class ModelHandle:
    model_id: str
    backend_kind: BackendKind
    version: int = 1
    training_manifest_id: Optional[str] = None
    endpoint: Optional[str] = None

    def __post_init__(self):
        if self.version < 1:
            raise ValueError("version starts at 1")
        if self.backend_kind is BackendKind.EXTERNAL and not self.endpoint:
            raise ValueError("external handle needs an endpoint")

    def to_json_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "model_id": self.model_id,
            "backend_kind": self.backend_kind.value,
            "version": self.version,
        }
        if self.training_manifest_id is not None:
            doc["training_manifest_id"] = self.training_manifest_id
        if self.endpoint is not None:
            doc["endpoint"] = self.endpoint
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict[str, Any]) -> "ModelHandle":
        return cls(
            model_id=doc["model_id"],
            backend_kind=BackendKind(doc["backend_kind"]),
            version=int(doc.get("version", 1)),
            training_manifest_id=doc.get("training_manifest_id"),
            endpoint=doc.get("endpoint"),
        )


@dataclass(frozen=True, slots=True)
class Prediction:
    """Model output for one preprocessed image."""

    image_id: str
    probability_maps: dict[DefectClass, np.ndarray] = field(default_factory=dict)
    boxes: tuple[BoxAnnotation, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))

    def validate(self, width: int, height: int) -> "Prediction":
        """Reject out-of-range probabilities and out-of-frame boxes."""
        for defect_class, grid in self.probability_maps.items():
            if defect_class.task is not Task.SEGMENTATION:
                raise MalformedResponseError(
                    f"probability map for non-segmentation class {defect_class.value}"
                )
            arr = np.asarray(grid, dtype=np.float64)
            if arr.shape != (height, width):
                raise MalformedResponseError(
                    f"map for {defect_class.value} is {arr.shape}, image is {(height, width)}"
                )
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise MalformedResponseError(
                    f"probabilities for {defect_class.value} outside [0, 1]"
                )
        for box in self.boxes:
            if box.score is None:
                raise MalformedResponseError("prediction boxes must carry scores")
            if not box.fits_within(width, height):
                raise MalformedResponseError(f"box {box.xywh} outside {width}x{height} frame")
        return self

    def to_annotation_set(self, model_id: str, prob_threshold: float = 0.5) -> AnnotationSet:
        """Threshold probability maps into masks for MAL pre-annotation."""
        from ..annotations import MaskAnnotation, model_source

        masks = []
        for defect_class, grid in sorted(
            self.probability_maps.items(), key=lambda kv: kv[0].value
        ):
            arr = np.asarray(grid, dtype=np.float64) >= prob_threshold
            masks.append(MaskAnnotation.from_array(defect_class, arr))
        return AnnotationSet(
            image_id=self.image_id,
            source=model_source(model_id),
            masks=tuple(masks),
            boxes=self.boxes,
        )


@dataclass(frozen=True, slots=True)
class TrainingSample:
    """One expert-approved (image, annotation) pair."""

    image_id: str
    image: np.ndarray
    annotation: AnnotationSet


class PredictorBackend(Protocol):
    def train(
        self,
        samples: Sequence[TrainingSample],
        hyperparams: TrainingHyperparams,
        model_id: Optional[str] = None,
        training_manifest_id: Optional[str] = None,
    ) -> ModelHandle: ...

    def predict(self, handle: ModelHandle, image_id: str, image: np.ndarray) -> Prediction: ...
