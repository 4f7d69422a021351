"""Second preprocessing stage: crop, denoise, resize, normalize, split.

Output images are real-valued in [0, 1].  Downscaling uses exact area
averaging so block-constant inputs resize without drift, and the train/test
assignment is persisted in the dataset manifest so reproducibility never
depends on PRNG portability.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import (
    CropOutOfBoundsError,
    DegenerateRatioError,
    TooFewImagesError,
)

SUPPORTED_RESOLUTIONS = (256, 512)


@dataclass(frozen=True, slots=True)
class PreprocessConfig:
    window_seconds: int = 900
    blackout_luminance_max: float = 0.02
    noise_variance_max: float = 0.01
    target_resolutions: tuple[int, ...] = SUPPORTED_RESOLUTIONS
    pool_size: int = 300
    split_ratio: float = 0.9
    split_seed: int = 0
    denoise: bool = True

    def __post_init__(self):
        if self.window_seconds <= 0:
            raise ValueError("window_seconds must be positive")
        if not 0.0 <= self.blackout_luminance_max <= 1.0:
            raise ValueError("blackout_luminance_max must lie in [0, 1]")
        if self.noise_variance_max < 0:
            raise ValueError("noise_variance_max must be >= 0")
        resolutions = tuple(sorted(set(int(r) for r in self.target_resolutions)))
        if not resolutions:
            raise ValueError("target_resolutions must be non-empty")
        unknown = [r for r in resolutions if r not in SUPPORTED_RESOLUTIONS]
        if unknown:
            raise ValueError(f"unsupported resolutions: {unknown}")
        object.__setattr__(self, "target_resolutions", resolutions)
        if self.pool_size <= 0:
            raise ValueError("pool_size must be positive")
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError("split_ratio must lie strictly between 0 and 1")


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


class LineageKind(str, Enum):
    ORIGINAL = "original"
    AUGMENTED = "augmented"


@dataclass(frozen=True, slots=True)
class Lineage:
    kind: LineageKind = LineageKind.ORIGINAL
    parent_image_id: Optional[str] = None
    transform_specs: tuple[dict[str, Any], ...] = ()

    def __post_init__(self):
        if self.kind is LineageKind.AUGMENTED and not self.parent_image_id:
            raise ValueError("augmented lineage requires a parent image id")
        if self.kind is LineageKind.ORIGINAL and self.parent_image_id:
            raise ValueError("original lineage carries no parent")
        object.__setattr__(self, "transform_specs", tuple(self.transform_specs))

    def to_json_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"kind": self.kind.value}
        if self.kind is LineageKind.AUGMENTED:
            doc["parent_image_id"] = self.parent_image_id
            doc["transform_specs"] = list(self.transform_specs)
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict[str, Any]) -> "Lineage":
        return cls(
            kind=LineageKind(doc["kind"]),
            parent_image_id=doc.get("parent_image_id"),
            transform_specs=tuple(doc.get("transform_specs", [])),
        )


ORIGINAL_LINEAGE = Lineage()


@dataclass(frozen=True, slots=True)
class ManifestEntry:
    image_id: str
    resolution: int
    crop_region: tuple[int, int, int, int]
    lineage: Lineage = ORIGINAL_LINEAGE

    def __post_init__(self):
        object.__setattr__(self, "crop_region", tuple(int(v) for v in self.crop_region))

    @property
    def is_original(self) -> bool:
        return self.lineage.kind is LineageKind.ORIGINAL

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "image_id": self.image_id,
            "resolution": self.resolution,
            "crop_region": list(self.crop_region),
            "lineage": self.lineage.to_json_dict(),
        }

    @classmethod
    def from_json_dict(cls, doc: dict[str, Any]) -> "ManifestEntry":
        return cls(
            image_id=doc["image_id"],
            resolution=int(doc["resolution"]),
            crop_region=tuple(doc["crop_region"]),
            lineage=Lineage.from_json_dict(doc["lineage"]),
        )


@dataclass(frozen=True, slots=True)
class DatasetManifest:
    """Versioned record of dataset membership, provenance, and split."""

    dataset_id: str
    entries: tuple[ManifestEntry, ...]
    split: dict[str, Split]
    split_seed: int

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        original_ids = {e.image_id for e in self.entries if e.is_original}
        if set(self.split) != original_ids:
            raise ValueError("split must assign exactly the original image ids")
        for entry in self.entries:
            if not entry.is_original and self.split.get(entry.image_id) is Split.TEST:
                raise ValueError("augmented entries must never enter the test split")
            if not entry.is_original:
                parent = entry.lineage.parent_image_id
                if self.split.get(parent) is Split.TEST:
                    raise ValueError(
                        f"augmented entry {entry.image_id} derives from a test image"
                    )

    def entries_at(self, resolution: int) -> tuple[ManifestEntry, ...]:
        return tuple(e for e in self.entries if e.resolution == resolution)

    def split_of(self, entry: ManifestEntry) -> Split:
        if entry.is_original:
            return self.split[entry.image_id]
        return self.split[entry.lineage.parent_image_id]

    def image_ids(self, split: Split | None = None) -> list[str]:
        ids = sorted({e.image_id for e in self.entries if e.is_original})
        if split is None:
            return ids
        return [i for i in ids if self.split[i] is split]

    @property
    def resolutions(self) -> tuple[int, ...]:
        return tuple(sorted({e.resolution for e in self.entries}))

    def with_entries(self, entries: Iterable[ManifestEntry]) -> "DatasetManifest":
        return replace(self, entries=tuple(entries))

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "dataset_id": self.dataset_id,
            "entries": [e.to_json_dict() for e in self.entries],
            "split": {k: v.value for k, v in sorted(self.split.items())},
            "split_seed": self.split_seed,
        }

    @classmethod
    def from_json_dict(cls, doc: dict[str, Any]) -> "DatasetManifest":
        return cls(
            dataset_id=doc["dataset_id"],
            entries=tuple(ManifestEntry.from_json_dict(e) for e in doc["entries"]),
            split={k: Split(v) for k, v in doc["split"].items()},
            split_seed=int(doc["split_seed"]),
        )

    def save(self, path: Path) -> None:
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_json_dict(), indent=2), encoding="utf-8")
        tmp.replace(path)

    @classmethod
    def load(cls, path: Path) -> "DatasetManifest":
        return cls.from_json_dict(json.loads(path.read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Pixel operations
# ---------------------------------------------------------------------------


def area_average_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize by exact box averaging of source pixel coverage.

    Each output pixel averages the source pixels its footprint overlaps,
    weighted by overlap area, so the global mean is preserved and integer
    downscale factors reduce to plain block means.
    """
    a = np.asarray(image, dtype=np.float64)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[:, :, None]
    h, w = a.shape[:2]
    rows = _overlap_matrix(h, out_h)
    cols = _overlap_matrix(w, out_w)
    out = np.einsum("ih,hwc,jw->ijc", rows, a, cols, optimize=True)
    return out[:, :, 0] if squeeze else out


def _overlap_matrix(src: int, dst: int) -> np.ndarray:
    """Row-stochastic (dst, src) matrix of box-overlap weights."""
    scale = src / dst
    weights = np.zeros((dst, src))
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        first, last = int(np.floor(lo)), int(np.ceil(hi))
        for s in range(first, min(last, src)):
            weights[i, s] = min(hi, s + 1) - max(lo, s)
    return weights / scale


def median_denoise_3x3(image: np.ndarray) -> np.ndarray:
    """3x3 median filter; edge-preserving for impulsive sensor noise."""
    a = np.asarray(image)
    if a.ndim == 3:
        size = (3, 3, 1)
    else:
        size = (3, 3)
    return ndimage.median_filter(a, size=size, mode="nearest")


def preprocess_image(
    image: np.ndarray,
    crop_region: tuple[int, int, int, int],
    target_resolution: int,
    denoise: bool = False,
) -> np.ndarray:
    """Crop, optionally denoise, resize, and normalize one 8-bit image.

    Returns a float array in [0, 1] of shape (target, target) or
    (target, target, channels).
    """
    arr = np.asarray(image)
    height, width = arr.shape[:2]
    x, y, w, h = (int(v) for v in crop_region)
    if w < 1 or h < 1 or x < 0 or y < 0 or x + w > width or y + h > height:
        raise CropOutOfBoundsError(
            f"crop {crop_region} does not fit inside {width}x{height}"
        )
    cropped = arr[y : y + h, x : x + w]
    if denoise:
        cropped = median_denoise_3x3(cropped)
    resized = area_average_resize(
        cropped.astype(np.float64), target_resolution, target_resolution
    )
    return np.clip(resized / 255.0, 0.0, 1.0)


def split_dataset(
    image_ids: Sequence[str], split_ratio: float, split_seed: int
) -> tuple[list[str], list[str]]:
    """Deterministically partition ids into (train, test), sizes by round().

    The same (ids, ratio, seed) triple always yields the same partition;
    downstream code must still persist the result in the manifest.
    """
    ids = list(image_ids)
    if len(ids) != len(set(ids)):
        raise ValueError("image ids must be unique")
    n = len(ids)
    if n < 2:
        raise TooFewImagesError(f"need at least 2 images, got {n}")
    if not 0.0 < split_ratio < 1.0:
        raise ValueError("split_ratio must lie strictly between 0 and 1")
    n_train = round(split_ratio * n)
    if n_train == 0 or n_train == n:
        raise DegenerateRatioError(
            f"ratio {split_ratio} on {n} images would empty one side"
        )
    shuffled = sorted(ids)
    random.Random(split_seed).shuffle(shuffled)
    train = sorted(shuffled[:n_train])
    test = sorted(shuffled[n_train:])
    return train, test


def build_split_map(train: Iterable[str], test: Iterable[str]) -> dict[str, Split]:
    split = {i: Split.TRAIN for i in train}
    split.update({i: Split.TEST for i in test})
    return split
