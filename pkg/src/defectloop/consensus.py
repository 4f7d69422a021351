"""Batching, multi-labeler consensus merging, review flow, MAL seeding.

Pixel consensus uses strict-majority voting with ties resolved to
background: a split opinion should never hallucinate a defect.  Box
consensus clusters greedily by IoU and emits the coordinate-wise median of
each sufficiently supported cluster, which shrugs off one outlier labeler.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np

from .annotations import (
    CONSENSUS_SOURCE,
    AnnotationSet,
    BoxAnnotation,
    DefectClass,
    MaskAnnotation,
    ReviewState,
    SourceKind,
    Task,
)
from .errors import EmptyPoolError, IllegalTransitionError, MixedImagesError

logger = logging.getLogger(__name__)

DEFAULT_BATCH_SIZE = 100


class BatchStatus(str, Enum):
    OPEN = "open"
    AWAITING_CONSENSUS = "awaiting_consensus"
    AWAITING_EXPERT = "awaiting_expert"
    FINALIZED = "finalized"


_FORWARD_STATUS = {
    BatchStatus.OPEN: (BatchStatus.AWAITING_CONSENSUS,),
    BatchStatus.AWAITING_CONSENSUS: (BatchStatus.AWAITING_EXPERT,),
    # relabel reopens the batch
    BatchStatus.AWAITING_EXPERT: (BatchStatus.FINALIZED, BatchStatus.OPEN),
    BatchStatus.FINALIZED: (),
}


@dataclass(frozen=True, slots=True)
class LabelingBatch:
    batch_id: str
    image_ids: tuple[str, ...]
    status: BatchStatus = BatchStatus.OPEN
    assigned_labelers: frozenset[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "image_ids", tuple(self.image_ids))
        object.__setattr__(self, "assigned_labelers", frozenset(self.assigned_labelers))
        if not self.image_ids:
            raise ValueError("batch must hold at least one image")

    def advance(self, status: BatchStatus) -> "LabelingBatch":
        if status not in _FORWARD_STATUS[self.status]:
            raise IllegalTransitionError(
                f"batch cannot move {self.status.value} -> {status.value}"
            )
        return replace(self, status=status)

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "batch_id": self.batch_id,
            "image_ids": list(self.image_ids),
            "status": self.status.value,
            "assigned_labelers": sorted(self.assigned_labelers),
        }

    @classmethod
    def from_json_dict(cls, doc: dict[str, Any]) -> "LabelingBatch":
        return cls(
            batch_id=doc["batch_id"],
            image_ids=tuple(doc["image_ids"]),
            status=BatchStatus(doc["status"]),
            assigned_labelers=frozenset(doc.get("assigned_labelers", [])),
        )


def create_batch(
    pool: Sequence[str], size: int = DEFAULT_BATCH_SIZE, batch_id: str | None = None
) -> tuple[LabelingBatch, list[str]]:
    """Take up to ``size`` ids off the front of the pool.

    Returns the new batch and the remaining pool.
    """
    if size < 1:
        raise ValueError("batch size must be >= 1")
    if not pool:
        raise EmptyPoolError("no images left to batch")
    taken = list(pool[:size])
    remaining = list(pool[size:])
    if batch_id is None:
        batch_id = f"batch-{taken[0]}-{len(taken)}"
    return LabelingBatch(batch_id=batch_id, image_ids=tuple(taken)), remaining


# ---------------------------------------------------------------------------
# Consensus merging
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class ConsensusConfig:
    box_iou_threshold: float = 0.5
    box_quorum: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.box_iou_threshold <= 1.0:
            raise ValueError("box_iou_threshold must lie in (0, 1]")
        if not 0.0 < self.box_quorum <= 1.0:
            raise ValueError("box_quorum must lie in (0, 1]")


@dataclass(frozen=True, slots=True)
class ConsensusResult:
    image_id: str
    merged: AnnotationSet
    agreement: dict[DefectClass, float]
    contributing_labelers: frozenset[str]

    def __post_init__(self):
        if not self.contributing_labelers:
            raise ValueError("consensus needs at least one contributor")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "image_id": self.image_id,
            "agreement_by_class": {c.value: a for c, a in sorted(self.agreement.items())},
            "contributing_labelers": sorted(self.contributing_labelers),
        }


def _check_same_image(sets: Sequence[AnnotationSet]) -> str:
    if not sets:
        raise ValueError("need at least one annotation set")
    image_ids = {s.image_id for s in sets}
    if len(image_ids) != 1:
        raise MixedImagesError(f"annotation sets span images {sorted(image_ids)}")
    keys = [s.source.key for s in sets]
    if len(keys) != len(set(keys)):
        raise ValueError("annotation sets must come from distinct sources")
    return sets[0].image_id


def merge_mask_consensus(
    sets: Sequence[AnnotationSet], defect_class: DefectClass
) -> tuple[Optional[MaskAnnotation], float]:
    """Strict-majority pixel vote for one segmentation class.

    A pixel is foreground iff strictly more than half the labelers marked
    it; the agreement score is the mean fraction of votes backing the
    chosen outcome.  Returns (None, 1.0) when nobody annotated the class.
    """
    _check_same_image(sets)
    n = len(sets)
    dims: Optional[tuple[int, int]] = None
    for s in sets:
        mask = s.mask_for(defect_class)
        if mask is not None:
            if dims is not None and dims != (mask.height, mask.width):
                raise MixedImagesError("mask dimensions differ between labelers")
            dims = (mask.height, mask.width)
    if dims is None:
        return None, 1.0
    votes = np.zeros(dims, dtype=np.int32)
    for s in sets:
        mask = s.mask_for(defect_class)
        if mask is not None:
            votes += mask.to_array()
    merged = votes * 2 > n
    votes_for_outcome = np.where(merged, votes, n - votes)
    agreement = float(votes_for_outcome.mean() / n)
    return MaskAnnotation.from_array(defect_class, merged), agreement


def _box_iou(a: BoxAnnotation, b: BoxAnnotation) -> float:
    ix = max(0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union else 0.0


def _lower_median(values: Sequence[int]) -> int:
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


def merge_box_consensus(
    sets: Sequence[AnnotationSet],
    defect_class: DefectClass,
    iou_threshold: float = 0.5,
    quorum: float = 0.5,
) -> list[BoxAnnotation]:
    """Greedy IoU clustering across labelers, median box per cluster.

    Deterministic: labelers are visited by source key, boxes by
    (x, y, w, h).  A cluster only survives when at least ``quorum`` of all
    labelers contributed a box to it.
    """
    boxes, _ = _cluster_boxes(sets, defect_class, iou_threshold, quorum)
    return boxes


def _cluster_boxes(
    sets: Sequence[AnnotationSet],
    defect_class: DefectClass,
    iou_threshold: float,
    quorum: float,
) -> tuple[list[BoxAnnotation], list[int]]:
    """Returns (surviving median boxes, support counts of every cluster)."""
    _check_same_image(sets)
    n = len(sets)
    ordered = sorted(sets, key=lambda s: s.source.key)
    per_labeler = [sorted(s.boxes_for(defect_class), key=lambda b: b.xywh) for s in ordered]
    used = [[False] * len(bs) for bs in per_labeler]

    merged: list[BoxAnnotation] = []
    supports: list[int] = []
    for li, boxes in enumerate(per_labeler):
        for bi, seed in enumerate(boxes):
            if used[li][bi]:
                continue
            used[li][bi] = True
            cluster = [seed]
            for lj, others in enumerate(per_labeler):
                if lj == li:
                    continue
                best_bj, best_iou = -1, 0.0
                for bj, candidate in enumerate(others):
                    if used[lj][bj]:
                        continue
                    iou = _box_iou(seed, candidate)
                    if iou >= iou_threshold and iou > best_iou:
                        best_bj, best_iou = bj, iou
                if best_bj >= 0:
                    used[lj][best_bj] = True
                    cluster.append(others[best_bj])
            supports.append(len(cluster))
            if len(cluster) >= quorum * n:
                merged.append(
                    BoxAnnotation(
                        defect_class=defect_class,
                        x=_lower_median([b.x for b in cluster]),
                        y=_lower_median([b.y for b in cluster]),
                        w=_lower_median([b.w for b in cluster]),
                        h=_lower_median([b.h for b in cluster]),
                    )
                )
    merged.sort(key=lambda b: b.xywh)
    return merged, supports


def merge_consensus(
    sets: Sequence[AnnotationSet],
    config: ConsensusConfig = ConsensusConfig(),
) -> ConsensusResult:
    """Merge all classes of one image's annotation sets into a consensus set."""
    image_id = _check_same_image(sets)
    n = len(sets)
    classes = sorted(
        {m.defect_class for s in sets for m in s.masks}
        | {b.defect_class for s in sets for b in s.boxes},
        key=lambda c: c.value,
    )
    masks: list[MaskAnnotation] = []
    boxes: list[BoxAnnotation] = []
    agreement: dict[DefectClass, float] = {}
    for defect_class in classes:
        if defect_class.task is Task.SEGMENTATION:
            merged_mask, score = merge_mask_consensus(sets, defect_class)
            if merged_mask is not None:
                masks.append(merged_mask)
            agreement[defect_class] = score
        else:
            merged_boxes, supports = _cluster_boxes(
                sets, defect_class, config.box_iou_threshold, config.box_quorum
            )
            boxes.extend(merged_boxes)
            agreement[defect_class] = (
                sum(supports) / (len(supports) * n) if supports else 1.0
            )
    contributors = frozenset(s.source.id or s.source.kind.value for s in sets)
    merged = AnnotationSet(
        image_id=image_id,
        source=CONSENSUS_SOURCE,
        masks=tuple(masks),
        boxes=tuple(boxes),
        review_state=ReviewState.DRAFT,
    )
    return ConsensusResult(
        image_id=image_id,
        merged=merged,
        agreement=agreement,
        contributing_labelers=contributors,
    )


# ---------------------------------------------------------------------------
# Review state machine
# ---------------------------------------------------------------------------


class ReviewDecision(str, Enum):
    CROWD_APPROVE = "crowd_approve"
    EXPERT_APPROVE = "expert_approve"
    RETURN_FOR_RELABEL = "return_for_relabel"


_REVIEW_TABLE: dict[tuple[ReviewState, ReviewDecision], ReviewState] = {
    (ReviewState.DRAFT, ReviewDecision.CROWD_APPROVE): ReviewState.CROWD_REVIEWED,
    (ReviewState.CROWD_REVIEWED, ReviewDecision.EXPERT_APPROVE): ReviewState.EXPERT_APPROVED,
    (ReviewState.CROWD_REVIEWED, ReviewDecision.RETURN_FOR_RELABEL): ReviewState.RETURNED_FOR_RELABEL,
}


def apply_review(annotation: AnnotationSet, decision: ReviewDecision) -> AnnotationSet:
    """Advance the review state; expert-approved sets are final."""
    key = (annotation.review_state, decision)
    if key not in _REVIEW_TABLE:
        raise IllegalTransitionError(
            f"decision {decision.value} not legal from state {annotation.review_state.value}"
        )
    return annotation.with_review_state(_REVIEW_TABLE[key])


# ---------------------------------------------------------------------------
# Model-assisted labeling
# ---------------------------------------------------------------------------


def attach_preannotations(
    batch: LabelingBatch,
    predictions: Mapping[str, AnnotationSet],
) -> dict[str, Optional[AnnotationSet]]:
    """Seed Draft annotation sets from model predictions for a batch.

    Covered images get a Draft copy of the model's set with provenance
    kept in ``seeded_from``; uncovered images start blank (None).
    Predictions for images outside the batch are ignored with a warning.
    """
    drafts: dict[str, Optional[AnnotationSet]] = {}
    batch_ids = set(batch.image_ids)
    for image_id, prediction in predictions.items():
        if image_id not in batch_ids:
            logger.warning(
                "prediction for image %s ignored: not in batch %s", image_id, batch.batch_id
            )
    for image_id in batch.image_ids:
        prediction = predictions.get(image_id)
        if prediction is None:
            drafts[image_id] = None
            continue
        if prediction.source.kind is not SourceKind.MODEL:
            raise ValueError("pre-annotations must come from a model source")
        drafts[image_id] = replace(
            prediction,
            review_state=ReviewState.DRAFT,
            seeded_from=prediction.source,
        )
    return drafts


# ---------------------------------------------------------------------------
# Correction cost
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class CorrectionCost:
    image_id: str
    pixels_flipped: int = 0
    boxes_added: int = 0
    boxes_removed: int = 0
    boxes_moved: int = 0
    seconds: Optional[float] = None

    def __post_init__(self):
        for name in ("pixels_flipped", "boxes_added", "boxes_removed", "boxes_moved"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def total_edits(self) -> int:
        return self.pixels_flipped + self.boxes_added + self.boxes_removed + self.boxes_moved

    def to_json_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "image_id": self.image_id,
            "pixels_flipped": self.pixels_flipped,
            "boxes_added": self.boxes_added,
            "boxes_removed": self.boxes_removed,
            "boxes_moved": self.boxes_moved,
        }
        if self.seconds is not None:
            doc["seconds"] = self.seconds
        return doc


def _greedy_box_matches(
    pre: Sequence[BoxAnnotation], final: Sequence[BoxAnnotation], iou_threshold: float
) -> list[tuple[int, int]]:
    pairs = []
    for i, a in enumerate(pre):
        for j, b in enumerate(final):
            iou = _box_iou(a, b)
            if iou >= iou_threshold:
                pairs.append((-iou, i, j))
    pairs.sort()
    matched: list[tuple[int, int]] = []
    used_pre: set[int] = set()
    used_final: set[int] = set()
    for _, i, j in pairs:
        if i in used_pre or j in used_final:
            continue
        used_pre.add(i)
        used_final.add(j)
        matched.append((i, j))
    return matched


def correction_cost(
    pre: Optional[AnnotationSet],
    final: AnnotationSet,
    iou_threshold: float = 0.5,
) -> CorrectionCost:
    """Edit distance between a pre-annotation and the final annotation.

    Pixel cost is the per-class symmetric difference; box cost counts
    additions, removals, and moved-but-matched boxes at IoU >= 0.5.
    A missing pre-annotation means the labeler started from scratch.
    """
    if pre is not None and pre.image_id != final.image_id:
        raise MixedImagesError(
            f"cost between different images: {pre.image_id} vs {final.image_id}"
        )
    pre_masks = {m.defect_class: m for m in (pre.masks if pre else ())}
    final_masks = {m.defect_class: m for m in final.masks}
    pixels = 0
    for defect_class in sorted(set(pre_masks) | set(final_masks), key=lambda c: c.value):
        a, b = pre_masks.get(defect_class), final_masks.get(defect_class)
        if a is not None and b is not None:
            if (a.width, a.height) != (b.width, b.height):
                raise MixedImagesError("mask dimensions differ between pre and final")
            pixels += int(np.count_nonzero(a.to_array() != b.to_array()))
        elif a is not None:
            pixels += a.foreground_pixels
        elif b is not None:
            pixels += b.foreground_pixels

    added = removed = moved = 0
    det_classes = {b.defect_class for b in (pre.boxes if pre else ())} | {
        b.defect_class for b in final.boxes
    }
    for defect_class in sorted(det_classes, key=lambda c: c.value):
        pre_boxes = list(pre.boxes_for(defect_class)) if pre else []
        final_boxes = list(final.boxes_for(defect_class))
        matches = _greedy_box_matches(pre_boxes, final_boxes, iou_threshold)
        moved += sum(
            1 for i, j in matches if pre_boxes[i].xywh != final_boxes[j].xywh
        )
        removed += len(pre_boxes) - len(matches)
        added += len(final_boxes) - len(matches)

    return CorrectionCost(
        image_id=final.image_id,
        pixels_flipped=pixels,
        boxes_added=added,
        boxes_removed=removed,
        boxes_moved=moved,
        seconds=final.elapsed_labeling_seconds,
    )
