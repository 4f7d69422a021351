"""Evaluation engine: pixel accuracy, IoU/mIoU, AP/mAP, report assembly.

Average precision uses all-point interpolation (exact area under the
precision envelope) rather than 11-point sampling; at desk scale there is
no reason to accept sampling artifacts.  Classes absent from both the
predictions and the ground truth are excluded from means so trivially
empty output earns nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np

from .annotations import (
    AnnotationSet,
    BoxAnnotation,
    DefectClass,
    MaskAnnotation,
    Task,
)
from .errors import (
    AllUndefinedError,
    DimensionMismatchError,
    MissingPredictionError,
    NoGroundTruthError,
)

DEFAULT_IOU_THRESHOLD = 0.5
DEFAULT_PROB_THRESHOLD = 0.5


def _as_grid(mask: "MaskAnnotation | np.ndarray") -> np.ndarray:
    if isinstance(mask, MaskAnnotation):
        return mask.to_array()
    return np.asarray(mask, dtype=bool)


def _check_same_shape(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise DimensionMismatchError(f"mask shapes differ: {pred.shape} vs {gt.shape}")


def pixel_accuracy(pred: "MaskAnnotation | np.ndarray", gt: "MaskAnnotation | np.ndarray") -> float:
    """Fraction of pixels on which the two masks agree."""
    p, g = _as_grid(pred), _as_grid(gt)
    _check_same_shape(p, g)
    return float(np.count_nonzero(p == g) / p.size)


def class_iou(
    pred: "MaskAnnotation | np.ndarray", gt: "MaskAnnotation | np.ndarray"
) -> Optional[float]:
    """Intersection over union; None (undefined) when both masks are empty."""
    p, g = _as_grid(pred), _as_grid(gt)
    _check_same_shape(p, g)
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return None
    return float(np.count_nonzero(p & g) / union)


def mean_iou(ious: Iterable[Optional[float]]) -> float:
    """Mean of defined IoUs; undefined entries are excluded, not zeroed."""
    defined = [v for v in ious if v is not None]
    if not defined:
        raise AllUndefinedError("every IoU was undefined")
    return float(np.mean(defined))


def box_iou(a: BoxAnnotation, b: BoxAnnotation) -> float:
    ix = max(0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union else 0.0


@dataclass(frozen=True, slots=True)
class Detection:
    """One scored detection attributed to a test image."""

    image_id: str
    box: BoxAnnotation

    def __post_init__(self):
        if self.box.score is None:
            raise ValueError("detections must carry a score")


def average_precision(
    detections: Sequence[Detection],
    ground_truth: Mapping[str, Sequence[BoxAnnotation]],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> float:
    """All-point interpolated AP for one class over a test set.

    Detections are ranked by descending score (ties by ascending box
    tuple, then image id); each is matched greedily to the highest-IoU
    unmatched ground-truth box of its own image.
    """
    n_gt = sum(len(boxes) for boxes in ground_truth.values())
    if n_gt == 0:
        raise NoGroundTruthError("average precision needs at least one ground-truth box")
    if not detections:
        return 0.0

    ranked = sorted(detections, key=lambda d: (-d.box.score, d.box.xywh, d.image_id))
    matched: dict[str, list[bool]] = {
        image_id: [False] * len(boxes) for image_id, boxes in ground_truth.items()
    }
    tp = np.zeros(len(ranked))
    for rank, det in enumerate(ranked):
        gt_boxes = ground_truth.get(det.image_id, ())
        best_j, best_iou = -1, 0.0
        for j, gt_box in enumerate(gt_boxes):
            if matched[det.image_id][j] or gt_box.defect_class is not det.box.defect_class:
                continue
            iou = box_iou(det.box, gt_box)
            if iou >= iou_threshold and iou > best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0:
            matched[det.image_id][best_j] = True
            tp[rank] = 1.0

    cum_tp = np.cumsum(tp)
    ranks = np.arange(1, len(ranked) + 1)
    precision = cum_tp / ranks
    recall = cum_tp / n_gt
    # precision envelope from the right, then exact area under it
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    previous_recall = np.concatenate(([0.0], recall[:-1]))
    return float(np.sum((recall - previous_recall) * envelope))


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------


class MetricKind(str, Enum):
    MAP = "mAP"
    MIOU = "mIoU"


@dataclass(frozen=True, slots=True)
class ClassMetric:
    kind: MetricKind
    value: float

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"metric value outside [0, 1]: {self.value}")


@dataclass(frozen=True, slots=True)
class MetricsReport:
    dataset_id: str
    resolution: int
    dataset_size: int
    per_class: dict[DefectClass, ClassMetric]
    pixel_accuracy: float
    mean_accuracy: float = field(init=False)

    def __post_init__(self):
        for defect_class, metric in self.per_class.items():
            expected = MetricKind.MIOU if defect_class.task is Task.SEGMENTATION else MetricKind.MAP
            if metric.kind is not expected:
                raise ValueError(
                    f"{defect_class.value} must report {expected.value}, got {metric.kind.value}"
                )
        if not self.per_class:
            raise ValueError("report needs at least one per-class value")
        values = [m.value for m in self.per_class.values()]
        object.__setattr__(self, "mean_accuracy", float(np.mean(values)))

    def value_for(self, defect_class: DefectClass) -> Optional[float]:
        metric = self.per_class.get(defect_class)
        return metric.value if metric else None

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "dataset_id": self.dataset_id,
            "resolution": self.resolution,
            "dataset_size": self.dataset_size,
            "per_class": {
                c.value: {"metric_kind": m.kind.value, "value": m.value}
                for c, m in sorted(self.per_class.items(), key=lambda kv: kv[0].value)
            },
            "pixel_accuracy": self.pixel_accuracy,
            "mean_accuracy": self.mean_accuracy,
        }

    def csv_row(self) -> str:
        def cell(defect_class: DefectClass) -> str:
            value = self.value_for(defect_class)
            return f"{value:.4f}" if value is not None else ""

        return ",".join(
            [
                str(self.dataset_size),
                str(self.resolution),
                cell(DefectClass.CENTER),
                cell(DefectClass.POLYCRYSTALLINE),
                cell(DefectClass.EDGE),
                f"{self.mean_accuracy:.4f}",
            ]
        )


CSV_HEADER = "dataset_size,resolution,center_map,poly_miou,edge_map,mean"


def build_report(
    dataset_id: str,
    resolution: int,
    dataset_size: int,
    per_class_values: Mapping[DefectClass, float],
    pixel_accuracy_value: float = 1.0,
) -> MetricsReport:
    """Assemble a report from per-class values; the mean is unweighted."""
    per_class = {
        c: ClassMetric(
            kind=MetricKind.MIOU if c.task is Task.SEGMENTATION else MetricKind.MAP,
            value=v,
        )
        for c, v in per_class_values.items()
    }
    return MetricsReport(
        dataset_id=dataset_id,
        resolution=resolution,
        dataset_size=dataset_size,
        per_class=per_class,
        pixel_accuracy=pixel_accuracy_value,
    )


@dataclass(frozen=True, slots=True)
class EvalConfig:
    iou_threshold: float = DEFAULT_IOU_THRESHOLD
    prob_threshold: float = DEFAULT_PROB_THRESHOLD
    classes: tuple[DefectClass, ...] = tuple(DefectClass)


def _predicted_mask(prediction, defect_class: DefectClass, prob_threshold: float):
    grid = prediction.probability_maps.get(defect_class)
    if grid is None:
        return None
    return np.asarray(grid, dtype=np.float64) >= prob_threshold


def _gt_mask_grid(annotation: AnnotationSet, defect_class: DefectClass, shape) -> np.ndarray:
    mask = annotation.mask_for(defect_class)
    if mask is None:
        return np.zeros(shape, dtype=bool)
    return mask.to_array()


def evaluate(
    predictions: Mapping[str, Any],
    ground_truth: Mapping[str, AnnotationSet],
    config: EvalConfig = EvalConfig(),
    dataset_id: str = "dataset",
    resolution: int = 0,
    dataset_size: int = 0,
) -> MetricsReport:
    """Score predictions against consensus ground truth over a test set.

    Detection classes report AP at the configured IoU threshold;
    segmentation classes report mIoU of thresholded probability maps.
    """
    for image_id in ground_truth:
        if image_id not in predictions:
            raise MissingPredictionError(image_id)

    per_class_values: dict[DefectClass, float] = {}
    accuracy_terms: list[float] = []

    for defect_class in config.classes:
        if defect_class.task is Task.SEGMENTATION:
            ious: list[Optional[float]] = []
            touched = False
            for image_id in sorted(ground_truth):
                prediction = predictions[image_id]
                annotation = ground_truth[image_id]
                pred_grid = _predicted_mask(prediction, defect_class, config.prob_threshold)
                gt_mask = annotation.mask_for(defect_class)
                if pred_grid is None and gt_mask is None:
                    continue
                touched = True
                if pred_grid is None:
                    pred_grid = np.zeros((gt_mask.height, gt_mask.width), dtype=bool)
                gt_grid = _gt_mask_grid(annotation, defect_class, pred_grid.shape)
                ious.append(class_iou(pred_grid, gt_grid))
                accuracy_terms.append(pixel_accuracy(pred_grid, gt_grid))
            if touched:
                defined = [v for v in ious if v is not None]
                per_class_values[defect_class] = (
                    float(np.mean(defined)) if defined else 1.0
                )
        else:
            detections = [
                Detection(image_id=image_id, box=box)
                for image_id in sorted(ground_truth)
                for box in predictions[image_id].boxes
                if box.defect_class is defect_class
            ]
            gt_boxes = {
                image_id: list(annotation.boxes_for(defect_class))
                for image_id, annotation in ground_truth.items()
            }
            n_gt = sum(len(b) for b in gt_boxes.values())
            if n_gt == 0 and not detections:
                continue
            if n_gt == 0:
                per_class_values[defect_class] = 0.0
            else:
                per_class_values[defect_class] = average_precision(
                    detections, gt_boxes, config.iou_threshold
                )

    if not per_class_values:
        raise AllUndefinedError("no class had predictions or ground truth")

    return MetricsReport(
        dataset_id=dataset_id,
        resolution=resolution,
        dataset_size=dataset_size,
        per_class={
            c: ClassMetric(
                kind=MetricKind.MIOU if c.task is Task.SEGMENTATION else MetricKind.MAP,
                value=v,
            )
            for c, v in per_class_values.items()
        },
        pixel_accuracy=float(np.mean(accuracy_terms)) if accuracy_terms else 1.0,
    )


def per_image_accuracy(
    predictions: Mapping[str, Any],
    ground_truth: Mapping[str, AnnotationSet],
    config: EvalConfig = EvalConfig(),
) -> dict[str, float]:
    """Mean per-class accuracy of each image, for SAL targeting.

    Segmentation scores IoU (1.0 when both sides are empty); detection
    scores single-image AP, with empty-vs-empty worth 1.0 and one-sided
    emptiness worth 0.0.
    """
    out: dict[str, float] = {}
    for image_id in sorted(ground_truth):
        if image_id not in predictions:
            raise MissingPredictionError(image_id)
        prediction = predictions[image_id]
        annotation = ground_truth[image_id]
        terms: list[float] = []
        for defect_class in config.classes:
            if defect_class.task is Task.SEGMENTATION:
                pred_grid = _predicted_mask(prediction, defect_class, config.prob_threshold)
                gt_mask = annotation.mask_for(defect_class)
                if pred_grid is None and gt_mask is None:
                    continue
                if pred_grid is None:
                    pred_grid = np.zeros((gt_mask.height, gt_mask.width), dtype=bool)
                gt_grid = _gt_mask_grid(annotation, defect_class, pred_grid.shape)
                iou = class_iou(pred_grid, gt_grid)
                terms.append(1.0 if iou is None else iou)
            else:
                boxes = [b for b in prediction.boxes if b.defect_class is defect_class]
                gt_boxes = list(annotation.boxes_for(defect_class))
                if not boxes and not gt_boxes:
                    continue
                if not gt_boxes:
                    terms.append(0.0)
                elif not boxes:
                    terms.append(0.0)
                else:
                    terms.append(
                        average_precision(
                            [Detection(image_id=image_id, box=b) for b in boxes],
                            {image_id: gt_boxes},
                            config.iou_threshold,
                        )
                    )
        out[image_id] = float(np.mean(terms)) if terms else 1.0
    return out
