"""Human-in-the-loop defect annotation and model training pipeline.

Submodules map to pipeline stages:

* :mod:`~defectloop.annotations` - masks, boxes, annotation sets
* :mod:`~defectloop.ingest` / :mod:`~defectloop.preprocess` - capture to dataset
* :mod:`~defectloop.consensus` - batching, merging, review
* :mod:`~defectloop.selection` - uncertainty-driven batch selection
* :mod:`~defectloop.augment` - label-co-transforming augmentation
* :mod:`~defectloop.metrics` - IoU/mIoU, AP/mAP, report assembly
* :mod:`~defectloop.backend` - pluggable trainable predictors
* :mod:`~defectloop.orchestrator` - phase loop, SAL, experiment grid
* :mod:`~defectloop.service` - HTTP labeling API
"""

from .annotations import (
    AnnotationSet,
    AnnotationSource,
    BoxAnnotation,
    DefectClass,
    ImageRecord,
    MaskAnnotation,
    ReviewState,
    SourceKind,
    Task,
    mask_to_bbox,
    polygon_to_mask,
    rle_decode,
    rle_encode,
)
from .preprocess import DatasetManifest, PreprocessConfig, Split, split_dataset
from .storage import DataStore

__version__ = "0.1.0"

__all__ = [
    "AnnotationSet",
    "AnnotationSource",
    "BoxAnnotation",
    "DefectClass",
    "ImageRecord",
    "MaskAnnotation",
    "ReviewState",
    "SourceKind",
    "Task",
    "mask_to_bbox",
    "polygon_to_mask",
    "rle_decode",
    "rle_encode",
    "DatasetManifest",
    "PreprocessConfig",
    "Split",
    "split_dataset",
    "DataStore",
    "__version__",
]
