"""Label-co-transforming augmentation and dataset expansion.

Geometric transforms move the image, every mask, and every box through the
same mapping; photometric transforms never touch a label byte.  Axis-exact
kinds (flips, quarter turns, integer translation) are implemented with
array slicing so involution and composition hold bit-for-bit; the remaining
geometric kinds resample with an inverse affine map, bilinear for pixels
and nearest-neighbor at pixel centers for masks.

Boxes follow their four corners: transform, re-take the axis-aligned hull,
round outward, clip to the frame.  A box clipped to nothing is dropped and
recorded in the caller's transform log rather than raised.
"""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .annotations import AnnotationSet, BoxAnnotation, MaskAnnotation
from .errors import RateTooSmallError
from .preprocess import Lineage, LineageKind, ManifestEntry

DEFAULT_AUGMENTATION_RATES = (2, 5, 10)


class TransformKind(str, Enum):
    ROTATE90 = "rotate90"
    ROTATE_SMALL = "rotate_small"
    SHEAR = "shear"
    FLIP_H = "flip_h"
    FLIP_V = "flip_v"
    SCALE = "scale"
    TRANSLATE = "translate"
    GAUSSIAN_NOISE = "gaussian_noise"
    JPEG_COMPRESS = "jpeg_compress"
    BLUR = "blur"
    SHARPEN = "sharpen"
    EMBOSS = "emboss"


GEOMETRIC_KINDS = frozenset(
    {
        TransformKind.ROTATE90,
        TransformKind.ROTATE_SMALL,
        TransformKind.SHEAR,
        TransformKind.FLIP_H,
        TransformKind.FLIP_V,
        TransformKind.SCALE,
        TransformKind.TRANSLATE,
    }
)
PHOTOMETRIC_KINDS = frozenset(TransformKind) - GEOMETRIC_KINDS


@dataclass(frozen=True, slots=True)
class TransformSpec:
    kind: TransformKind
    quarter_turns: Optional[int] = None
    angle_degrees: Optional[float] = None
    factor: Optional[float] = None
    dx: Optional[int] = None
    dy: Optional[int] = None
    sigma: Optional[float] = None
    quality: Optional[int] = None
    radius: Optional[float] = None
    seed: Optional[int] = None

    def __post_init__(self):
        k = self.kind
        if k is TransformKind.ROTATE90 and self.quarter_turns not in (1, 2, 3):
            raise ValueError("rotate90 needs quarter_turns in 1..3")
        if k is TransformKind.ROTATE_SMALL and self.angle_degrees is None:
            raise ValueError("rotate_small needs angle_degrees")
        if k is TransformKind.SHEAR and self.factor is None:
            raise ValueError("shear needs a factor")
        if k is TransformKind.SCALE and (self.factor is None or self.factor <= 0):
            raise ValueError("scale needs a positive factor")
        if k is TransformKind.TRANSLATE and (self.dx is None or self.dy is None):
            raise ValueError("translate needs dx and dy")
        if k is TransformKind.GAUSSIAN_NOISE and (self.sigma is None or self.sigma < 0):
            raise ValueError("gaussian_noise needs sigma >= 0")
        if k is TransformKind.JPEG_COMPRESS and not (
            self.quality is not None and 1 <= self.quality <= 100
        ):
            raise ValueError("jpeg_compress needs quality in 1..100")
        if k is TransformKind.BLUR and (self.radius is None or self.radius <= 0):
            raise ValueError("blur needs a positive radius")

    @property
    def is_geometric(self) -> bool:
        return self.kind in GEOMETRIC_KINDS

    def to_json_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"kind": self.kind.value}
        for name in (
            "quarter_turns",
            "angle_degrees",
            "factor",
            "dx",
            "dy",
            "sigma",
            "quality",
            "radius",
            "seed",
        ):
            value = getattr(self, name)
            if value is not None:
                doc[name] = value
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict[str, Any]) -> "TransformSpec":
        params = {k: v for k, v in doc.items() if k != "kind"}
        return cls(kind=TransformKind(doc["kind"]), **params)


def rotate90(quarter_turns: int) -> TransformSpec:
    return TransformSpec(TransformKind.ROTATE90, quarter_turns=quarter_turns)


def flip_h() -> TransformSpec:
    return TransformSpec(TransformKind.FLIP_H)


def flip_v() -> TransformSpec:
    return TransformSpec(TransformKind.FLIP_V)


def translate(dx: int, dy: int) -> TransformSpec:
    return TransformSpec(TransformKind.TRANSLATE, dx=dx, dy=dy)


# ---------------------------------------------------------------------------
# Geometric machinery
# ---------------------------------------------------------------------------


def _affine_for(spec: TransformSpec, width: int, height: int):
    """Forward map p' = A @ p + t on continuous coordinates, plus the
    output canvas size.  Origin is the top-left corner, y grows downward."""
    cx, cy = width / 2.0, height / 2.0
    k = spec.kind
    if k is TransformKind.FLIP_H:
        return np.array([[-1.0, 0.0], [0.0, 1.0]]), np.array([float(width), 0.0]), width, height
    if k is TransformKind.FLIP_V:
        return np.array([[1.0, 0.0], [0.0, -1.0]]), np.array([0.0, float(height)]), width, height
    if k is TransformKind.ROTATE90:
        # one clockwise quarter turn maps (x, y) -> (H - y, x)
        a = np.array([[0.0, -1.0], [1.0, 0.0]])
        t = np.array([float(height), 0.0])
        out_w, out_h = height, width
        for _ in range(spec.quarter_turns - 1):
            a2 = np.array([[0.0, -1.0], [1.0, 0.0]])
            t2 = np.array([float(out_h), 0.0])
            a, t = a2 @ a, a2 @ t + t2
            out_w, out_h = out_h, out_w
        return a, t, out_w, out_h
    if k is TransformKind.TRANSLATE:
        return np.eye(2), np.array([float(spec.dx), float(spec.dy)]), width, height
    if k is TransformKind.SCALE:
        f = float(spec.factor)
        return f * np.eye(2), np.array([(1 - f) * cx, (1 - f) * cy]), width, height
    if k is TransformKind.ROTATE_SMALL:
        theta = math.radians(float(spec.angle_degrees))
        a = np.array(
            [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
        )
        c = np.array([cx, cy])
        return a, c - a @ c, width, height
    if k is TransformKind.SHEAR:
        f = float(spec.factor)
        a = np.array([[1.0, f], [0.0, 1.0]])
        return a, np.array([-f * cy, 0.0]), width, height
    raise ValueError(f"{k.value} is not geometric")


def _transform_grid_exact(grid: np.ndarray, spec: TransformSpec) -> np.ndarray:
    k = spec.kind
    if k is TransformKind.FLIP_H:
        return np.ascontiguousarray(grid[:, ::-1])
    if k is TransformKind.FLIP_V:
        return np.ascontiguousarray(grid[::-1])
    if k is TransformKind.ROTATE90:
        return np.ascontiguousarray(np.rot90(grid, k=-spec.quarter_turns))
    if k is TransformKind.TRANSLATE:
        out = np.zeros_like(grid)
        h, w = grid.shape[:2]
        dx, dy = spec.dx, spec.dy
        src_x0, src_y0 = max(0, -dx), max(0, -dy)
        dst_x0, dst_y0 = max(0, dx), max(0, dy)
        cw, ch = w - abs(dx), h - abs(dy)
        if cw > 0 and ch > 0:
            out[dst_y0 : dst_y0 + ch, dst_x0 : dst_x0 + cw] = grid[
                src_y0 : src_y0 + ch, src_x0 : src_x0 + cw
            ]
        return out
    raise ValueError(f"{k.value} is not an exact kind")


_EXACT_KINDS = frozenset(
    {TransformKind.FLIP_H, TransformKind.FLIP_V, TransformKind.ROTATE90, TransformKind.TRANSLATE}
)


def _inverse_map_coords(spec: TransformSpec, width: int, height: int):
    """Continuous source coordinates for every output pixel center."""
    a, t, out_w, out_h = _affine_for(spec, width, height)
    inv = np.linalg.inv(a)
    xs = np.arange(out_w, dtype=np.float64) + 0.5
    ys = np.arange(out_h, dtype=np.float64) + 0.5
    px, py = np.meshgrid(xs, ys)
    sx = inv[0, 0] * (px - t[0]) + inv[0, 1] * (py - t[1])
    sy = inv[1, 0] * (px - t[0]) + inv[1, 1] * (py - t[1])
    return sx, sy, out_w, out_h


def _resample_mask(grid: np.ndarray, spec: TransformSpec, width: int, height: int) -> np.ndarray:
    """Nearest-neighbor at pixel centers; out-of-frame is background."""
    sx, sy, _, _ = _inverse_map_coords(spec, width, height)
    col = np.floor(sx).astype(np.int64)
    row = np.floor(sy).astype(np.int64)
    valid = (col >= 0) & (col < width) & (row >= 0) & (row < height)
    out = np.zeros(sx.shape, dtype=bool)
    out[valid] = grid[row[valid], col[valid]]
    return out


def _resample_image(image: np.ndarray, spec: TransformSpec, width: int, height: int) -> np.ndarray:
    """Bilinear sampling of the pixel-center field; out-of-frame is zero."""
    sx, sy, _, _ = _inverse_map_coords(spec, width, height)
    inside = (sx >= 0.0) & (sx < width) & (sy >= 0.0) & (sy < height)
    u = np.clip(sx - 0.5, 0.0, width - 1.0)
    v = np.clip(sy - 0.5, 0.0, height - 1.0)
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = (u - x0)[..., None] if image.ndim == 3 else u - x0
    fy = (v - y0)[..., None] if image.ndim == 3 else v - y0
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bottom = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    out = top * (1 - fy) + bottom * fy
    mask = inside[..., None] if image.ndim == 3 else inside
    return np.where(mask, out, 0.0)


def _transform_box(
    box: BoxAnnotation, spec: TransformSpec, width: int, height: int
) -> Optional[BoxAnnotation]:
    a, t, out_w, out_h = _affine_for(spec, width, height)
    corners = np.array(
        [
            [box.x, box.y],
            [box.x + box.w, box.y],
            [box.x, box.y + box.h],
            [box.x + box.w, box.y + box.h],
        ],
        dtype=np.float64,
    )
    mapped = corners @ a.T + t
    x0 = math.floor(mapped[:, 0].min())
    y0 = math.floor(mapped[:, 1].min())
    x1 = math.ceil(mapped[:, 0].max())
    y1 = math.ceil(mapped[:, 1].max())
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(out_w, x1), min(out_h, y1)
    if x1 - x0 < 1 or y1 - y0 < 1:
        return None
    return replace(box, x=x0, y=y0, w=x1 - x0, h=y1 - y0)


# ---------------------------------------------------------------------------
# Photometric kinds
# ---------------------------------------------------------------------------

_SHARPEN_KERNEL = np.array([[0, -1, 0], [-1, 5, -1], [0, -1, 0]], dtype=np.float64)
_EMBOSS_KERNEL = np.array([[-2, -1, 0], [-1, 1, 1], [0, 1, 2]], dtype=np.float64)


def _convolve_per_channel(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    if image.ndim == 3:
        return np.stack(
            [ndimage.convolve(image[..., c], kernel, mode="nearest") for c in range(image.shape[2])],
            axis=2,
        )
    return ndimage.convolve(image, kernel, mode="nearest")


def _apply_photometric(image: np.ndarray, spec: TransformSpec) -> np.ndarray:
    k = spec.kind
    if k is TransformKind.GAUSSIAN_NOISE:
        rng = np.random.default_rng(spec.seed if spec.seed is not None else 0)
        return np.clip(image + rng.normal(0.0, spec.sigma, image.shape), 0.0, 1.0)
    if k is TransformKind.JPEG_COMPRESS:
        eight_bit = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
        pil = Image.fromarray(eight_bit, mode="RGB" if eight_bit.ndim == 3 else "L")
        buffer = io.BytesIO()
        pil.save(buffer, format="JPEG", quality=int(spec.quality))
        buffer.seek(0)
        decoded = np.asarray(Image.open(buffer), dtype=np.float64) / 255.0
        return decoded
    if k is TransformKind.BLUR:
        sigma = (spec.radius, spec.radius, 0) if image.ndim == 3 else spec.radius
        return ndimage.gaussian_filter(image, sigma=sigma, mode="nearest")
    if k is TransformKind.SHARPEN:
        return np.clip(_convolve_per_channel(image, _SHARPEN_KERNEL), 0.0, 1.0)
    if k is TransformKind.EMBOSS:
        return np.clip(_convolve_per_channel(image, _EMBOSS_KERNEL) + 0.5, 0.0, 1.0)
    raise ValueError(f"{k.value} is not photometric")


# ---------------------------------------------------------------------------
# Public entry points
# ---------------------------------------------------------------------------


def apply_transform(
    image: np.ndarray,
    labels: AnnotationSet,
    spec: "TransformSpec | Sequence[TransformSpec]",
    drop_log: Optional[list[dict[str, Any]]] = None,
) -> tuple[np.ndarray, AnnotationSet]:
    """Apply one transform (or an ordered composite) to an image and its labels.

    Boxes clipped entirely out of frame are dropped; when ``drop_log`` is
    given, each drop appends a record so the expansion step can persist a
    transform log.
    """
    if not isinstance(spec, TransformSpec):
        for step in spec:
            image, labels = apply_transform(image, labels, step, drop_log)
        return image, labels

    image = np.asarray(image, dtype=np.float64)
    if not spec.is_geometric:
        return _apply_photometric(image, spec), labels

    height, width = image.shape[:2]
    if spec.kind in _EXACT_KINDS:
        new_image = _transform_grid_exact(image, spec)
        new_masks = tuple(
            MaskAnnotation.from_array(m.defect_class, _transform_grid_exact(m.to_array(), spec))
            for m in labels.masks
        )
    else:
        new_image = _resample_image(image, spec, width, height)
        new_masks = tuple(
            MaskAnnotation.from_array(
                m.defect_class, _resample_mask(m.to_array(), spec, width, height)
            )
            for m in labels.masks
        )

    new_boxes: list[BoxAnnotation] = []
    for box in labels.boxes:
        moved = _transform_box(box, spec, width, height)
        if moved is None:
            if drop_log is not None:
                drop_log.append(
                    {
                        "image_id": labels.image_id,
                        "class": box.defect_class.value,
                        "box": list(box.xywh),
                        "spec": spec.to_json_dict(),
                    }
                )
            continue
        new_boxes.append(moved)

    return new_image, replace(labels, masks=new_masks, boxes=tuple(new_boxes))


# ---------------------------------------------------------------------------
# Expansion planning
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class AugmentRanges:
    """Parameter ranges the plan samples from; kinds come from the paperless
    defaults below unless narrowed."""

    rotate_small_degrees: tuple[float, float] = (-5.0, 5.0)
    shear_factor: tuple[float, float] = (-0.1, 0.1)
    scale_factor: tuple[float, float] = (0.9, 1.1)
    translate_px: tuple[int, int] = (-10, 10)
    noise_sigma: tuple[float, float] = (0.0, 0.05)
    jpeg_quality: tuple[int, int] = (60, 95)
    blur_radius: tuple[float, float] = (0.5, 1.5)


_GEOMETRIC_POOL = (
    TransformKind.ROTATE90,
    TransformKind.ROTATE_SMALL,
    TransformKind.SHEAR,
    TransformKind.FLIP_H,
    TransformKind.FLIP_V,
    TransformKind.SCALE,
    TransformKind.TRANSLATE,
)
_PHOTOMETRIC_POOL = (
    TransformKind.GAUSSIAN_NOISE,
    TransformKind.JPEG_COMPRESS,
    TransformKind.BLUR,
    TransformKind.SHARPEN,
    TransformKind.EMBOSS,
)


@dataclass(frozen=True, slots=True)
class AugmentationPlan:
    rate: int
    seed: int = 0
    ranges: AugmentRanges = AugmentRanges()
    photometric_probability: float = 0.5

    def __post_init__(self):
        if self.rate < 1:
            raise RateTooSmallError(f"rate must be >= 1, got {self.rate}")

    def specs_for(self, parent_image_id: str, index: int) -> tuple[TransformSpec, ...]:
        """Deterministic composite for the index-th copy of a parent image."""
        rng = np.random.default_rng(_derive_seed(self.seed, parent_image_id, index))
        geometric = _GEOMETRIC_POOL[int(rng.integers(len(_GEOMETRIC_POOL)))]
        specs = [_sample_spec(geometric, rng, self.ranges)]
        if rng.random() < self.photometric_probability:
            photometric = _PHOTOMETRIC_POOL[int(rng.integers(len(_PHOTOMETRIC_POOL)))]
            specs.append(_sample_spec(photometric, rng, self.ranges))
        return tuple(specs)


def _derive_seed(plan_seed: int, parent_image_id: str, index: int) -> int:
    digest = hashlib.sha256(
        f"{plan_seed}/{parent_image_id}/{index}".encode("utf-8")
    ).digest()
    return int.from_bytes(digest[:8], "big")


def _sample_spec(kind: TransformKind, rng: np.random.Generator, r: AugmentRanges) -> TransformSpec:
    kind = TransformKind(kind)
    if kind is TransformKind.ROTATE90:
        return TransformSpec(kind, quarter_turns=int(rng.integers(1, 4)))
    if kind is TransformKind.ROTATE_SMALL:
        return TransformSpec(kind, angle_degrees=float(rng.uniform(*r.rotate_small_degrees)))
    if kind is TransformKind.SHEAR:
        return TransformSpec(kind, factor=float(rng.uniform(*r.shear_factor)))
    if kind in (TransformKind.FLIP_H, TransformKind.FLIP_V):
        return TransformSpec(kind)
    if kind is TransformKind.SCALE:
        return TransformSpec(kind, factor=float(rng.uniform(*r.scale_factor)))
    if kind is TransformKind.TRANSLATE:
        lo, hi = r.translate_px
        return TransformSpec(
            kind, dx=int(rng.integers(lo, hi + 1)), dy=int(rng.integers(lo, hi + 1))
        )
    if kind is TransformKind.GAUSSIAN_NOISE:
        return TransformSpec(
            kind,
            sigma=float(rng.uniform(*r.noise_sigma)),
            seed=int(rng.integers(0, 2**31)),
        )
    if kind is TransformKind.JPEG_COMPRESS:
        lo, hi = r.jpeg_quality
        return TransformSpec(kind, quality=int(rng.integers(lo, hi + 1)))
    if kind is TransformKind.BLUR:
        return TransformSpec(kind, radius=float(rng.uniform(*r.blur_radius)))
    return TransformSpec(kind)


def augmented_image_id(parent_image_id: str, resolution: int, index: int) -> str:
    return f"{parent_image_id}.r{resolution}.aug{index:03d}"


def expand_dataset(
    base: Sequence[ManifestEntry], plan: AugmentationPlan
) -> list[ManifestEntry]:
    """Expand original train entries to ``rate`` times their count.

    Every original is kept; each gains rate - 1 augmented siblings whose
    lineage records the parent and the exact transform composite, so the
    pixel data can be re-derived on demand.
    """
    if plan.rate < 1:
        raise RateTooSmallError(f"rate must be >= 1, got {plan.rate}")
    for entry in base:
        if not entry.is_original:
            raise ValueError(f"entry {entry.image_id} is not original lineage")
    out = list(base)
    for entry in base:
        for index in range(plan.rate - 1):
            specs = plan.specs_for(entry.image_id, index)
            out.append(
                ManifestEntry(
                    image_id=augmented_image_id(entry.image_id, entry.resolution, index),
                    resolution=entry.resolution,
                    crop_region=entry.crop_region,
                    lineage=Lineage(
                        kind=LineageKind.AUGMENTED,
                        parent_image_id=entry.image_id,
                        transform_specs=tuple(s.to_json_dict() for s in specs),
                    ),
                )
            )
    return out


def select_for_augmentation(
    accuracy_by_image: Mapping[str, float], threshold: float
) -> list[str]:
    """Images scoring below the threshold, worst first."""
    if not accuracy_by_image:
        raise ValueError("per-image accuracy map is empty")
    below = [(a, i) for i, a in accuracy_by_image.items() if a < threshold]
    return [i for _, i in sorted(below)]
