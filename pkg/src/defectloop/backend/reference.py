"""Built-in trainable backend with no deep-learning dependency.

Segmentation is a two-centroid color classifier: the pixel probability is
the normalized inverse distance to the foreground color centroid.  Center
defects are connected bright regions above a threshold fitted between
training peak and non-peak brightness.  Edge defects come from roughness
extrema along the largest bright component's boundary, thresholded
against roughness statistics fitted on the labeled boxes.

The point of this backend is to make the loop semantics real - it gets
better with more data and is fully deterministic - not to compete with
deep models on degraded imagery.
"""

from __future__ import annotations

import math
from typing import Any, Optional, Sequence

import numpy as np
from scipy import ndimage

from ..annotations import BoxAnnotation, DefectClass, Task
from ..errors import (
    ClassUnrepresentedError,
    EmptyTrainingSetError,
    ResolutionMismatchError,
)
from .base import (
    BackendKind,
    ModelHandle,
    Prediction,
    TrainingHyperparams,
    TrainingSample,
)
from .registry import ModelRegistry

DEFAULT_CLASSES = (DefectClass.POLYCRYSTALLINE, DefectClass.CENTER, DefectClass.EDGE)


def _to_features(image: np.ndarray) -> np.ndarray:
    """(H, W, C) float view of an image, C=1 for grayscale."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def _to_gray(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    return arr.mean(axis=2) if arr.ndim == 3 else arr


def _otsu_threshold(gray: np.ndarray) -> float:
    """Deterministic Otsu split over a 256-bin histogram of [0, 1] values."""
    counts, edges = np.histogram(gray.ravel(), bins=256, range=(0.0, 1.0))
    total = counts.sum()
    if total == 0:
        return 0.5
    centers = (edges[:-1] + edges[1:]) / 2.0
    weight_lo = np.cumsum(counts)
    weight_hi = total - weight_lo
    sum_lo = np.cumsum(counts * centers)
    sum_total = sum_lo[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mean_lo = sum_lo / weight_lo
        mean_hi = (sum_total - sum_lo) / weight_hi
        between = weight_lo * weight_hi * (mean_lo - mean_hi) ** 2
    between[~np.isfinite(between)] = -1.0
    return float(centers[int(np.argmax(between))])


def _box_slice(box: BoxAnnotation) -> tuple[slice, slice]:
    return slice(box.y, box.y + box.h), slice(box.x, box.x + box.w)


class ReferenceClassicalBackend:
    """Deterministic centroid + peak-detection backend."""

    kind = BackendKind.REFERENCE_CLASSICAL

    def __init__(
        self,
        registry: ModelRegistry,
        classes: Sequence[DefectClass] = DEFAULT_CLASSES,
    ):
        self.registry = registry
        self.classes = tuple(classes)

    # -- training -----------------------------------------------------------

    def train(
        self,
        samples: Sequence[TrainingSample],
        hyperparams: TrainingHyperparams = TrainingHyperparams(),
        model_id: Optional[str] = None,
        training_manifest_id: Optional[str] = None,
    ) -> ModelHandle:
        if not isinstance(hyperparams, TrainingHyperparams):
            raise TypeError("hyperparams must be a TrainingHyperparams")
        if not samples:
            raise EmptyTrainingSetError("training set is empty")

        shapes = {s.image.shape for s in samples}
        if len(shapes) > 1:
            raise ResolutionMismatchError(f"mixed training resolutions: {sorted(shapes)}")
        height, width = samples[0].image.shape[:2]
        if height != width:
            raise ResolutionMismatchError("training images must be square")
        channels = 1 if samples[0].image.ndim == 2 else samples[0].image.shape[2]

        self._check_representation(samples)

        params: dict[str, Any] = {
            "resolution": width,
            "channels": channels,
            "classes": [c.value for c in self.classes],
            "hyperparams": hyperparams.to_json_dict(),
        }
        for defect_class in self.classes:
            if defect_class.task is Task.SEGMENTATION:
                params.setdefault("segmentation", {})[defect_class.value] = (
                    self._fit_segmentation(samples, defect_class)
                )
        if DefectClass.CENTER in self.classes:
            params["center_detector"] = self._fit_center_detector(samples)
        if DefectClass.EDGE in self.classes:
            params["edge_detector"] = self._fit_edge_detector(samples)

        model_id = model_id or "reference-classical"
        return self.registry.save(
            model_id, self.kind, params, training_manifest_id=training_manifest_id
        )

    def _check_representation(self, samples: Sequence[TrainingSample]) -> None:
        for defect_class in self.classes:
            if defect_class.task is Task.SEGMENTATION:
                represented = any(
                    (m := s.annotation.mask_for(defect_class)) is not None
                    and m.foreground_pixels > 0
                    for s in samples
                )
            else:
                represented = any(s.annotation.boxes_for(defect_class) for s in samples)
            if not represented:
                raise ClassUnrepresentedError(defect_class.value)

    def _fit_segmentation(
        self, samples: Sequence[TrainingSample], defect_class: DefectClass
    ) -> dict[str, Any]:
        fg_sum = bg_sum = None
        fg_n = bg_n = 0
        for sample in samples:
            features = _to_features(sample.image)
            mask = sample.annotation.mask_for(defect_class)
            grid = (
                mask.to_array()
                if mask is not None
                else np.zeros(features.shape[:2], dtype=bool)
            )
            fg = features[grid]
            bg = features[~grid]
            if fg_sum is None:
                fg_sum = np.zeros(features.shape[2])
                bg_sum = np.zeros(features.shape[2])
            fg_sum += fg.sum(axis=0)
            bg_sum += bg.sum(axis=0)
            fg_n += fg.shape[0]
            bg_n += bg.shape[0]
        fg_centroid = (fg_sum / fg_n) if fg_n else bg_sum / max(bg_n, 1)
        bg_centroid = (bg_sum / bg_n) if bg_n else fg_centroid
        return {"fg_centroid": fg_centroid.tolist(), "bg_centroid": bg_centroid.tolist()}

    def _fit_center_detector(self, samples: Sequence[TrainingSample]) -> dict[str, Any]:
        # median aggregation throughout: photometric augmentation (emboss,
        # sharpen, heavy noise) must not be able to drag the threshold past
        # the peaks it is meant to catch
        peaks: list[float] = []
        non_center_high: list[float] = []
        areas: list[int] = []
        for sample in samples:
            gray = _to_gray(sample.image)
            inside = np.zeros(gray.shape, dtype=bool)
            for box in sample.annotation.boxes_for(DefectClass.CENTER):
                ys, xs = _box_slice(box)
                peaks.append(float(gray[ys, xs].max()))
                areas.append(box.area)
                inside[ys, xs] = True
            outside = gray[~inside]
            if outside.size:
                non_center_high.append(float(np.percentile(outside, 99.9)))
        median_peak = float(np.median(peaks))
        floor = float(np.median(non_center_high)) if non_center_high else 0.0
        threshold = (median_peak + floor) / 2.0
        return {
            "threshold": threshold,
            "score_scale": max(1e-9, 1.0 - threshold),
            "min_area": max(1, int(math.floor(np.percentile(areas, 10) * 0.25))),
            "max_area": int(math.ceil(np.percentile(areas, 90) * 3.0)),
        }

    def _fit_edge_detector(self, samples: Sequence[TrainingSample]) -> dict[str, Any]:
        positives: list[float] = []
        negatives: list[float] = []
        substrate_thresholds: list[float] = []
        for sample in samples:
            gray = _to_gray(sample.image)
            substrate_threshold = _otsu_threshold(gray)
            substrate_thresholds.append(substrate_threshold)
            boundary = _substrate_boundary(gray, substrate_threshold)
            if boundary is None:
                continue
            xs, ys, roughness = boundary["xs"], boundary["ys"], boundary["roughness"]
            inside = np.zeros(len(xs), dtype=bool)
            for box in sample.annotation.boxes_for(DefectClass.EDGE):
                hit = (
                    (xs >= box.x)
                    & (xs < box.x + box.w)
                    & (ys >= box.y)
                    & (ys < box.y + box.h)
                )
                inside |= hit
            positives.extend(roughness[inside].tolist())
            negatives.extend(roughness[~inside].tolist())
        mean_pos = float(np.mean(positives)) if positives else 1.0
        mean_neg = float(np.mean(negatives)) if negatives else 0.0
        return {
            "substrate_threshold": float(np.median(substrate_thresholds)),
            "roughness_threshold": (mean_pos + mean_neg) / 2.0,
            "score_scale": max(mean_pos, 1e-9),
        }

    # -- prediction ---------------------------------------------------------

    def predict(self, handle: ModelHandle, image_id: str, image: np.ndarray) -> Prediction:
        params = self.registry.load_params(handle.model_id)
        arr = np.asarray(image, dtype=np.float64)
        height, width = arr.shape[:2]
        channels = 1 if arr.ndim == 2 else arr.shape[2]
        if (width, height) != (params["resolution"], params["resolution"]):
            raise ResolutionMismatchError(
                f"model trained at {params['resolution']}, image is {width}x{height}"
            )
        if channels != params["channels"]:
            raise ResolutionMismatchError(
                f"model trained on {params['channels']}-channel images, got {channels}"
            )

        probability_maps: dict[DefectClass, np.ndarray] = {}
        for class_name, centroids in params.get("segmentation", {}).items():
            probability_maps[DefectClass(class_name)] = self._segment(arr, centroids)

        boxes: list[BoxAnnotation] = []
        if "center_detector" in params:
            boxes.extend(self._detect_centers(arr, params["center_detector"]))
        if "edge_detector" in params:
            boxes.extend(self._detect_edges(arr, params["edge_detector"]))

        prediction = Prediction(
            image_id=image_id,
            probability_maps=probability_maps,
            boxes=tuple(sorted(boxes, key=lambda b: (b.defect_class.value, b.xywh))),
        )
        return prediction.validate(width, height)

    def _segment(self, image: np.ndarray, centroids: dict[str, Any]) -> np.ndarray:
        features = _to_features(image)
        fg = np.asarray(centroids["fg_centroid"], dtype=np.float64)
        bg = np.asarray(centroids["bg_centroid"], dtype=np.float64)
        d_fg = np.linalg.norm(features - fg, axis=2)
        d_bg = np.linalg.norm(features - bg, axis=2)
        total = d_fg + d_bg
        with np.errstate(invalid="ignore"):
            prob = np.where(total > 0, d_bg / np.where(total > 0, total, 1.0), 0.5)
        return prob

    def _detect_centers(self, image: np.ndarray, det: dict[str, Any]) -> list[BoxAnnotation]:
        gray = _to_gray(image)
        above = gray > det["threshold"]
        labeled, count = ndimage.label(above)
        boxes: list[BoxAnnotation] = []
        for index in range(1, count + 1):
            component = labeled == index
            area = int(component.sum())
            if not det["min_area"] <= area <= det["max_area"]:
                continue
            ys, xs = np.nonzero(component)
            peak = float(gray[component].max())
            score = min(1.0, max(0.05, (peak - det["threshold"]) / det["score_scale"]))
            boxes.append(
                BoxAnnotation(
                    defect_class=DefectClass.CENTER,
                    x=int(xs.min()),
                    y=int(ys.min()),
                    w=int(xs.max() - xs.min() + 1),
                    h=int(ys.max() - ys.min() + 1),
                    score=score,
                )
            )
        return boxes

    def _detect_edges(self, image: np.ndarray, det: dict[str, Any]) -> list[BoxAnnotation]:
        gray = _to_gray(image)
        height, width = gray.shape
        boundary = _substrate_boundary(gray, det["substrate_threshold"])
        if boundary is None:
            return []
        xs, ys = boundary["xs"], boundary["ys"]
        roughness, baseline = boundary["roughness"], boundary["baseline"]
        cx, cy = boundary["center"]
        threshold = det["roughness_threshold"]
        hot = roughness > threshold
        if not hot.any():
            return []
        angles = np.arctan2(ys - cy, xs - cx)
        boxes: list[BoxAnnotation] = []
        for core in _angular_runs(hot):
            if core.size < 3:
                continue
            peak_roughness = float(roughness[core].max())
            floor = max(0.6, 0.08 * peak_roughness)
            run = _extend_run(core, roughness, floor)
            # cover the full deviation, not just the displaced crest: project
            # each run point back to the local baseline radius
            base_xs = cx + baseline[run] * np.cos(angles[run])
            base_ys = cy + baseline[run] * np.sin(angles[run])
            all_xs = np.concatenate([xs[run], base_xs])
            all_ys = np.concatenate([ys[run], base_ys])
            x0 = max(0, int(np.floor(all_xs.min())))
            y0 = max(0, int(np.floor(all_ys.min())))
            x1 = min(width, int(np.ceil(all_xs.max())) + 1)
            y1 = min(height, int(np.ceil(all_ys.max())) + 1)
            if x1 - x0 < 1 or y1 - y0 < 1:
                continue
            score_scale = max(det["score_scale"] - threshold, 1e-9)
            score = min(1.0, max(0.05, (peak_roughness - threshold) / score_scale))
            boxes.append(
                BoxAnnotation(
                    defect_class=DefectClass.EDGE,
                    x=x0,
                    y=y0,
                    w=x1 - x0,
                    h=y1 - y0,
                    score=score,
                )
            )
        return boxes


def _substrate_boundary(gray: np.ndarray, threshold: float):
    """Boundary of the largest bright component, angle-sorted, with a
    roughness profile.

    Roughness is each boundary point's absolute radial deviation from a
    wide circular-median baseline; the wide window follows slow drift
    (eccentricity, gentle ovals) while local bumps stand out.  Returns
    None when nothing exceeds the threshold.
    """
    bright = gray > threshold
    labeled, count = ndimage.label(bright)
    if count == 0:
        return None
    sizes = ndimage.sum_labels(np.ones_like(gray), labeled, index=range(1, count + 1))
    component = labeled == (int(np.argmax(sizes)) + 1)
    eroded = ndimage.binary_erosion(component, border_value=0)
    boundary = component & ~eroded
    ys, xs = np.nonzero(boundary)
    if xs.size < 16:
        return None
    cx, cy = xs.mean(), ys.mean()
    angles = np.arctan2(ys - cy, xs - cx)
    order = np.argsort(angles, kind="stable")
    xs, ys = xs[order], ys[order]
    radii = np.hypot(xs - cx, ys - cy)
    window = max(9, int(0.15 * radii.size) | 1)
    baseline = ndimage.median_filter(radii, size=window, mode="wrap")
    roughness = np.abs(radii - baseline)
    return {
        "xs": xs,
        "ys": ys,
        "radii": radii,
        "baseline": baseline,
        "roughness": roughness,
        "center": (float(cx), float(cy)),
    }


def _extend_run(
    core: np.ndarray, roughness: np.ndarray, floor: float, gap_tolerance: int = 6
) -> np.ndarray:
    """Grow a hot run along the boundary while roughness stays above the
    floor, so the box covers the defect's full extent, not just the crest.

    Staircase pixelation makes the profile dip briefly even inside a
    defect, so the walk only stops after ``gap_tolerance`` consecutive
    below-floor points (which are then excluded)."""
    n = roughness.size
    limit = n // 4

    def walk(start: int, step: int) -> int:
        last_above = start
        cursor = start
        low_streak = 0
        for _ in range(limit):
            cursor = (cursor + step) % n
            if cursor == int(core[0]) or cursor == int(core[-1]):
                break
            if roughness[cursor] > floor:
                last_above = cursor
                low_streak = 0
            else:
                low_streak += 1
                if low_streak >= gap_tolerance:
                    break
        return last_above

    lo = walk(int(core[0]), -1)
    hi = walk(int(core[-1]), +1)
    if lo <= hi:
        return np.arange(lo, hi + 1)
    return np.concatenate([np.arange(lo, n), np.arange(0, hi + 1)])


def _angular_runs(hot: np.ndarray, max_gap: int = 5) -> list[np.ndarray]:
    """Split hot boundary indices into runs, merging across small gaps and
    across the angular wrap-around."""
    indices = np.flatnonzero(hot)
    if indices.size == 0:
        return []
    runs: list[list[int]] = [[int(indices[0])]]
    for idx in indices[1:]:
        if idx - runs[-1][-1] <= max_gap:
            runs[-1].append(int(idx))
        else:
            runs.append([int(idx)])
    # wrap-around: first and last run may be one feature crossing -pi/pi
    if len(runs) > 1 and (runs[0][0] + (len(hot) - runs[-1][-1])) <= max_gap:
        runs[0] = runs.pop() + runs[0]
    return [np.asarray(run, dtype=np.int64) for run in runs]
