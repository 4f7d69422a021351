"""Uncertainty-driven choice of which images to label next.

Segmentation uncertainty is mean per-pixel binary entropy (normalized so a
coin-flip pixel scores 1); detection uncertainty peaks when box confidences
hover around 0.5.  Exact score ties are broken by farthest-first traversal
over feature descriptors so a tied batch still covers the data spread.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .annotations import DefectClass, Task
from .errors import MissingScoreError, ProbabilityOutOfRangeError


@dataclass(frozen=True, slots=True)
class UncertaintyScore:
    image_id: str
    per_class_scores: dict[DefectClass, float]
    score: float = field(init=False)

    def __post_init__(self):
        if not self.per_class_scores:
            raise ValueError("need at least one per-class score")
        for c, s in self.per_class_scores.items():
            if not 0.0 <= s <= 1.0:
                raise ValueError(f"score for {c.value} outside [0, 1]: {s}")
        object.__setattr__(
            self, "score", float(np.mean(list(self.per_class_scores.values())))
        )


def binary_entropy(p: np.ndarray) -> np.ndarray:
    """Entropy in bits, so p = 0.5 maps to exactly 1."""
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros_like(p)
    interior = (p > 0.0) & (p < 1.0)
    q = p[interior]
    out[interior] = -(q * np.log2(q) + (1 - q) * np.log2(1 - q))
    return out


def score_uncertainty(
    prediction,
    classes: Optional[Sequence[DefectClass]] = None,
) -> UncertaintyScore:
    """Score how unsure a prediction is, per class and overall.

    ``prediction`` is a model Prediction (probability maps plus scored
    boxes).  When ``classes`` is omitted, only classes the prediction
    touches are scored; a configured detection class with no boxes scores
    the agnostic 0.5.
    """
    per_class: dict[DefectClass, float] = {}
    wanted = list(classes) if classes is not None else None

    for defect_class, grid in sorted(
        prediction.probability_maps.items(), key=lambda kv: kv[0].value
    ):
        if wanted is not None and defect_class not in wanted:
            continue
        arr = np.asarray(grid, dtype=np.float64)
        if arr.size == 0 or np.min(arr) < 0.0 or np.max(arr) > 1.0:
            raise ProbabilityOutOfRangeError(
                f"probability map for {defect_class.value} outside [0, 1]"
            )
        per_class[defect_class] = float(binary_entropy(arr).mean())
    if wanted is not None:
        for defect_class in wanted:
            if defect_class.task is Task.SEGMENTATION and defect_class not in per_class:
                # model silent on a configured class: agnostic uncertainty
                per_class[defect_class] = 0.5

    detection_classes = set(
        c for c in (wanted or []) if c.task is Task.DETECTION
    ) | {b.defect_class for b in prediction.boxes}
    for defect_class in sorted(detection_classes, key=lambda c: c.value):
        if wanted is not None and defect_class not in wanted:
            continue
        scores = [b.score for b in prediction.boxes if b.defect_class is defect_class]
        if any(s is None for s in scores):
            raise ValueError("detection uncertainty needs scored boxes")
        if any(not 0.0 <= s <= 1.0 for s in scores):
            raise ProbabilityOutOfRangeError("box score outside [0, 1]")
        if scores:
            p_bar = float(np.mean(scores))
            per_class[defect_class] = 4.0 * p_bar * (1.0 - p_bar)
        else:
            # no detections: the model is silent, not confident
            per_class[defect_class] = 0.5

    return UncertaintyScore(image_id=prediction.image_id, per_class_scores=per_class)


def gray_histogram_features(image: np.ndarray, bins: int = 64) -> np.ndarray:
    """Backend-independent image descriptor: normalized gray histogram."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    counts, _ = np.histogram(arr.ravel(), bins=bins, range=(0.0, 1.0))
    return counts / max(1, arr.size)


def _argmax_by_distance(candidates: list[str], distance) -> str:
    """Largest distance wins; exact ties resolve to the smallest id."""
    best, best_d = None, -1.0
    for image_id in sorted(candidates):
        d = distance(image_id)
        if d > best_d:
            best, best_d = image_id, d
    return best


def _farthest_first(
    candidates: list[str], features: Mapping[str, np.ndarray], k: int
) -> list[str]:
    """Greedy max-min-distance pick of k candidates, seeded at the point
    farthest from the candidate centroid."""
    if k >= len(candidates):
        return sorted(candidates)
    vectors = {i: np.asarray(features[i], dtype=np.float64) for i in candidates}
    centroid = np.mean(list(vectors.values()), axis=0)
    start = _argmax_by_distance(
        list(candidates), lambda i: float(np.linalg.norm(vectors[i] - centroid))
    )
    chosen = [start]
    remaining = [c for c in candidates if c != start]
    while len(chosen) < k:
        best = _argmax_by_distance(
            remaining,
            lambda i: min(float(np.linalg.norm(vectors[i] - vectors[c])) for c in chosen),
        )
        chosen.append(best)
        remaining.remove(best)
    return chosen


def select_batch(
    pool: Sequence[str],
    scores: Mapping[str, "UncertaintyScore | float"],
    features: Optional[Mapping[str, np.ndarray]] = None,
    k: int = 100,
) -> list[str]:
    """Pick the k most uncertain images from the pool, deterministically.

    Exact ties at the selection boundary are broken by farthest-first
    traversal over ``features`` when given, else by ascending image id.
    Returns the whole pool when k covers it.
    """
    pool = list(pool)
    numeric: dict[str, float] = {}
    for image_id in pool:
        if image_id not in scores:
            raise MissingScoreError(image_id)
        value = scores[image_id]
        numeric[image_id] = value.score if isinstance(value, UncertaintyScore) else float(value)

    if k >= len(pool):
        return sorted(pool, key=lambda i: (-numeric[i], i))

    ranked = sorted(pool, key=lambda i: (-numeric[i], i))
    boundary_score = numeric[ranked[k - 1]]
    winners = [i for i in ranked if numeric[i] > boundary_score]
    tied = [i for i in ranked if numeric[i] == boundary_score]
    slots = k - len(winners)
    if slots == len(tied):
        chosen_tied = tied
    elif features is not None and all(i in features for i in tied):
        chosen_tied = _farthest_first(tied, features, slots)
    else:
        chosen_tied = sorted(tied)[:slots]
    selected = winners + chosen_tied
    return sorted(selected, key=lambda i: (-numeric[i], i))
