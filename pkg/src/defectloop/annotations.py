"""Canonical data model for defect annotations.

Masks are stored as row-major run-length encodings whose first run counts
background pixels; runs then alternate background/foreground.  The encoding
is canonical (no zero-length run except optionally the first), so two equal
masks always have byte-equal encodings.  Boxes are integer top-left plus
size, which makes area unambiguously ``w * h``.

All types are immutable values: share them freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from .errors import DegeneratePolygonError, SumMismatchError


class Task(str, Enum):
    SEGMENTATION = "segmentation"
    DETECTION = "detection"


class DefectClass(str, Enum):
    """Macroscale defect categories recognized by the pipeline."""

    POLYCRYSTALLINE = "polycrystalline"
    CENTER = "center"
    EDGE = "edge"

    @property
    def task(self) -> Task:
        # Polycrystalline spread is measured by area -> pixel masks;
        # center/edge defects are counted -> boxes.
        if self is DefectClass.POLYCRYSTALLINE:
            return Task.SEGMENTATION
        return Task.DETECTION


SEGMENTATION_CLASSES = tuple(c for c in DefectClass if c.task is Task.SEGMENTATION)
DETECTION_CLASSES = tuple(c for c in DefectClass if c.task is Task.DETECTION)


class ImageStatus(str, Enum):
    RAW = "raw"
    FILTERED = "filtered"
    PREPROCESSED = "preprocessed"
    REJECTED = "rejected"


class RejectReason(str, Enum):
    BLACKOUT = "blackout"
    NOISE = "noise"


class SourceKind(str, Enum):
    HUMAN = "human"
    MODEL = "model"
    CONSENSUS = "consensus"


class ReviewState(str, Enum):
    DRAFT = "draft"
    CROWD_REVIEWED = "crowd_reviewed"
    EXPERT_APPROVED = "expert_approved"
    RETURNED_FOR_RELABEL = "returned_for_relabel"


@dataclass(frozen=True, slots=True)
class AnnotationSource:
    """Who produced an annotation set: a labeler, a model, or the merge."""

    kind: SourceKind
    id: Optional[str] = None

    def __post_init__(self):
        if self.kind in (SourceKind.HUMAN, SourceKind.MODEL) and not self.id:
            raise ValueError(f"{self.kind.value} source requires an id")
        if self.kind is SourceKind.CONSENSUS and self.id is not None:
            raise ValueError("consensus source carries no id")

    @property
    def key(self) -> str:
        """Stable string identity, usable as a filename component."""
        return self.kind.value if self.id is None else f"{self.kind.value}_{self.id}"

    def to_json_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"kind": self.kind.value}
        if self.id is not None:
            doc["id"] = self.id
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict[str, Any]) -> "AnnotationSource":
        return cls(kind=SourceKind(doc["kind"]), id=doc.get("id"))


def human_source(labeler_id: str) -> AnnotationSource:
    return AnnotationSource(SourceKind.HUMAN, labeler_id)


def model_source(model_id: str) -> AnnotationSource:
    return AnnotationSource(SourceKind.MODEL, model_id)


CONSENSUS_SOURCE = AnnotationSource(SourceKind.CONSENSUS)


@dataclass(frozen=True, slots=True)
class ImageRecord:
    image_id: str
    growth_run_id: str
    captured_at: int
    width: int
    height: int
    storage_path: str
    status: ImageStatus = ImageStatus.RAW
    reject_reason: Optional[RejectReason] = None

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if (self.status is ImageStatus.REJECTED) != (self.reject_reason is not None):
            raise ValueError("reject_reason present iff status is rejected")

    def to_json_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "image_id": self.image_id,
            "growth_run_id": self.growth_run_id,
            "captured_at": self.captured_at,
            "width": self.width,
            "height": self.height,
            "storage_path": self.storage_path,
            "status": self.status.value,
        }
        if self.reject_reason is not None:
            doc["reject_reason"] = self.reject_reason.value
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict[str, Any]) -> "ImageRecord":
        reason = doc.get("reject_reason")
        return cls(
            image_id=doc["image_id"],
            growth_run_id=doc["growth_run_id"],
            captured_at=int(doc["captured_at"]),
            width=int(doc["width"]),
            height=int(doc["height"]),
            storage_path=doc["storage_path"],
            status=ImageStatus(doc["status"]),
            reject_reason=RejectReason(reason) if reason is not None else None,
        )


# ---------------------------------------------------------------------------
# RLE masks
# ---------------------------------------------------------------------------


def rle_encode(mask: np.ndarray) -> tuple[int, ...]:
    """Encode a binary grid as alternating run lengths, background first.

    The output is canonical: every run is positive except that the first
    run is 0 when the grid starts with foreground.
    """
    grid = np.asarray(mask)
    if grid.ndim != 2 or grid.shape[0] < 1 or grid.shape[1] < 1:
        raise ValueError("mask must be a 2-D grid of at least 1x1")
    flat = grid.ravel().astype(bool)
    # run boundaries = positions where the value changes
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return tuple(int(r) for r in runs)


def rle_decode(rle: Sequence[int], width: int, height: int) -> np.ndarray:
    """Decode run lengths into a boolean grid of shape (height, width)."""
    runs = [int(r) for r in rle]
    if any(r < 0 for r in runs):
        raise ValueError("run lengths must be non-negative")
    if sum(runs) != width * height:
        raise SumMismatchError(
            f"run lengths sum to {sum(runs)}, expected {width}x{height}={width * height}"
        )
    values = np.arange(len(runs)) % 2 == 1
    flat = np.repeat(values, runs)
    return flat.reshape(height, width)


@dataclass(frozen=True, slots=True)
class MaskAnnotation:
    """Per-class pixel mask in canonical row-major RLE form."""

    defect_class: DefectClass
    rle: tuple[int, ...]
    width: int
    height: int

    def __post_init__(self):
        if self.defect_class.task is not Task.SEGMENTATION:
            raise ValueError(f"{self.defect_class.value} is not a segmentation class")
        if self.width < 1 or self.height < 1:
            raise ValueError("mask dimensions must be >= 1")
        runs = tuple(int(r) for r in self.rle)
        object.__setattr__(self, "rle", runs)
        if sum(runs) != self.width * self.height:
            raise SumMismatchError(
                f"run lengths sum to {sum(runs)}, expected {self.width * self.height}"
            )
        if any(r <= 0 for r in runs[1:]) or (runs and runs[0] < 0):
            raise ValueError("zero-length run only allowed in leading position")

    @classmethod
    def from_array(cls, defect_class: DefectClass, mask: np.ndarray) -> "MaskAnnotation":
        grid = np.asarray(mask)
        return cls(
            defect_class=defect_class,
            rle=rle_encode(grid),
            width=grid.shape[1],
            height=grid.shape[0],
        )

    def to_array(self) -> np.ndarray:
        return rle_decode(self.rle, self.width, self.height)

    @property
    def foreground_pixels(self) -> int:
        return sum(self.rle[1::2])

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "class": self.defect_class.value,
            "width": self.width,
            "height": self.height,
            "rle": list(self.rle),
        }

    @classmethod
    def from_json_dict(cls, doc: dict[str, Any]) -> "MaskAnnotation":
        return cls(
            defect_class=DefectClass(doc["class"]),
            rle=tuple(int(r) for r in doc["rle"]),
            width=int(doc["width"]),
            height=int(doc["height"]),
        )


@dataclass(frozen=True, slots=True)
class BoxAnnotation:
    """Axis-aligned box: integer top-left corner plus size in pixels."""

    defect_class: DefectClass
    x: int
    y: int
    w: int
    h: int
    score: Optional[float] = None

    def __post_init__(self):
        if self.defect_class.task is not Task.DETECTION:
            raise ValueError(f"{self.defect_class.value} is not a detection class")
        if self.w < 1 or self.h < 1:
            raise ValueError("box size must be >= 1x1")
        if self.x < 0 or self.y < 0:
            raise ValueError("box origin must be non-negative")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def xywh(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)

    def fits_within(self, width: int, height: int) -> bool:
        return self.x + self.w <= width and self.y + self.h <= height

    def to_json_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "class": self.defect_class.value,
            "x": self.x,
            "y": self.y,
            "w": self.w,
            "h": self.h,
        }
        if self.score is not None:
            doc["score"] = self.score
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict[str, Any]) -> "BoxAnnotation":
        score = doc.get("score")
        return cls(
            defect_class=DefectClass(doc["class"]),
            x=int(doc["x"]),
            y=int(doc["y"]),
            w=int(doc["w"]),
            h=int(doc["h"]),
            score=float(score) if score is not None else None,
        )


@dataclass(frozen=True, slots=True)
class AnnotationSet:
    """One source's complete labeling of one image."""

    image_id: str
    source: AnnotationSource
    masks: tuple[MaskAnnotation, ...] = ()
    boxes: tuple[BoxAnnotation, ...] = ()
    review_state: ReviewState = ReviewState.DRAFT
    elapsed_labeling_seconds: Optional[float] = None
    seeded_from: Optional[AnnotationSource] = None

    def __post_init__(self):
        object.__setattr__(self, "masks", tuple(self.masks))
        object.__setattr__(self, "boxes", tuple(self.boxes))
        classes = [m.defect_class for m in self.masks]
        if len(classes) != len(set(classes)):
            raise ValueError("at most one mask per segmentation class")
        if self.elapsed_labeling_seconds is not None:
            if self.source.kind is not SourceKind.HUMAN:
                raise ValueError("elapsed time only recorded for human labelers")
            if self.elapsed_labeling_seconds < 0:
                raise ValueError("elapsed time must be non-negative")

    def mask_for(self, defect_class: DefectClass) -> Optional[MaskAnnotation]:
        for m in self.masks:
            if m.defect_class is defect_class:
                return m
        return None

    def boxes_for(self, defect_class: DefectClass) -> tuple[BoxAnnotation, ...]:
        return tuple(b for b in self.boxes if b.defect_class is defect_class)

    def with_review_state(self, state: ReviewState) -> "AnnotationSet":
        return replace(self, review_state=state)

    def is_blank(self) -> bool:
        return not self.masks and not self.boxes

    def to_json_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "image_id": self.image_id,
            "source": self.source.to_json_dict(),
            "masks": [m.to_json_dict() for m in self.masks],
            "boxes": [b.to_json_dict() for b in self.boxes],
            "review_state": self.review_state.value,
        }
        if self.elapsed_labeling_seconds is not None:
            doc["elapsed_labeling_seconds"] = self.elapsed_labeling_seconds
        if self.seeded_from is not None:
            doc["seeded_from"] = self.seeded_from.to_json_dict()
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict[str, Any]) -> "AnnotationSet":
        elapsed = doc.get("elapsed_labeling_seconds")
        seeded = doc.get("seeded_from")
        return cls(
            image_id=doc["image_id"],
            source=AnnotationSource.from_json_dict(doc["source"]),
            masks=tuple(MaskAnnotation.from_json_dict(m) for m in doc.get("masks", [])),
            boxes=tuple(BoxAnnotation.from_json_dict(b) for b in doc.get("boxes", [])),
            review_state=ReviewState(doc.get("review_state", "draft")),
            elapsed_labeling_seconds=float(elapsed) if elapsed is not None else None,
            seeded_from=AnnotationSource.from_json_dict(seeded) if seeded else None,
        )


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------


def mask_to_bbox(mask: "MaskAnnotation | np.ndarray") -> Optional[tuple[int, int, int, int]]:
    """Tightest (x, y, w, h) box around the foreground, or None when empty."""
    grid = mask.to_array() if isinstance(mask, MaskAnnotation) else np.asarray(mask, bool)
    rows = np.flatnonzero(grid.any(axis=1))
    cols = np.flatnonzero(grid.any(axis=0))
    if rows.size == 0:
        return None
    y0, y1 = int(rows[0]), int(rows[-1]) + 1
    x0, x1 = int(cols[0]), int(cols[-1]) + 1
    return (x0, y0, x1 - x0, y1 - y0)


def polygon_to_mask(
    vertices: Sequence[tuple[float, float]], width: int, height: int
) -> np.ndarray:
    """Rasterize a polygon; a pixel is set iff its center lies inside.

    Inside-ness uses the even-odd rule, so self-intersecting outlines and
    outlines with holes behave the way annotation tools draw them.
    """
    if len(vertices) < 3:
        raise DegeneratePolygonError(f"polygon needs >= 3 vertices, got {len(vertices)}")
    if width < 1 or height < 1:
        raise ValueError("target grid must be at least 1x1")
    xs = np.arange(width, dtype=float) + 0.5
    ys = np.arange(height, dtype=float) + 0.5
    px, py = np.meshgrid(xs, ys)
    inside = np.zeros((height, width), dtype=bool)
    n = len(vertices)
    for i in range(n):
        x1, y1 = vertices[i]
        x2, y2 = vertices[(i + 1) % n]
        if y1 == y2:
            continue
        straddles = (y1 > py) != (y2 > py)
        with np.errstate(invalid="ignore"):
            x_cross = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= straddles & (px < x_cross)
    return inside


def masks_by_class(masks: Iterable[MaskAnnotation]) -> dict[DefectClass, MaskAnnotation]:
    return {m.defect_class: m for m in masks}
