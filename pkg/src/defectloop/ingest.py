"""Growth-run capture manifests and the first preprocessing stage.

A growth run is a time-sorted sequence of frames captured at a fixed
cadence.  This module thins the sequence to one frame per time window and
drops frames that are blacked out or too noisy to annotate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .annotations import ImageRecord, ImageStatus, RejectReason
from .errors import UnreadableImageError, UnsortedInputError

ImageLoader = Callable[[ImageRecord], np.ndarray]


@dataclass(frozen=True, slots=True)
class GrowthRunManifest:
    """Capture record for one reactor run."""

    growth_run_id: str
    capture_interval_seconds: int
    duration_hours: float
    frames: tuple[ImageRecord, ...] = ()

    def __post_init__(self):
        if self.capture_interval_seconds <= 0:
            raise ValueError("capture interval must be positive")
        object.__setattr__(self, "frames", tuple(self.frames))
        times = [f.captured_at for f in self.frames]
        if times != sorted(times):
            raise UnsortedInputError("frames must be sorted by captured_at")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "growth_run_id": self.growth_run_id,
            "capture_interval_seconds": self.capture_interval_seconds,
            "duration_hours": self.duration_hours,
            "frames": [f.to_json_dict() for f in self.frames],
        }

    @classmethod
    def from_json_dict(cls, doc: dict[str, Any]) -> "GrowthRunManifest":
        return cls(
            growth_run_id=doc["growth_run_id"],
            capture_interval_seconds=int(doc["capture_interval_seconds"]),
            duration_hours=float(doc["duration_hours"]),
            frames=tuple(ImageRecord.from_json_dict(f) for f in doc.get("frames", [])),
        )


def resample_sequence(
    frames: Sequence[ImageRecord], window_seconds: int
) -> list[ImageRecord]:
    """Keep the first frame of each non-empty time window.

    Windows are anchored at the first frame's timestamp:
    ``[t0 + k*window, t0 + (k+1)*window)``.  The earliest frame per window
    is the least affected by within-window drift, and the rule is
    deterministic.
    """
    if window_seconds <= 0:
        raise ValueError("window must be positive")
    times = [f.captured_at for f in frames]
    if times != sorted(times):
        raise UnsortedInputError("frames must be sorted by captured_at")
    if not frames:
        return []
    t0 = frames[0].captured_at
    kept: list[ImageRecord] = []
    seen_windows: set[int] = set()
    for frame in frames:
        k = (frame.captured_at - t0) // window_seconds
        if k not in seen_windows:
            seen_windows.add(k)
            kept.append(frame)
    return kept


def _to_gray(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    if arr.ndim != 2:
        raise ValueError("expected a HxW or HxWxC image")
    return arr


def box_mean_3x3(image: np.ndarray) -> np.ndarray:
    """Mean over each pixel's 3x3 neighborhood clipped to the frame."""
    a = np.asarray(image, dtype=np.float64)
    padded = np.pad(a, 1, mode="constant")
    ones = np.pad(np.ones_like(a), 1, mode="constant")
    total = np.zeros_like(a)
    count = np.zeros_like(a)
    h, w = a.shape
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            total += padded[dy : dy + h, dx : dx + w]
            count += ones[dy : dy + h, dx : dx + w]
    return total / count


def noise_residual_variance(image: np.ndarray) -> float:
    """Variance of the image minus its 3x3 mean-filtered self.

    High-frequency residual energy is monotone in impulsive sensor noise
    and cheap to threshold.
    """
    gray = _to_gray(image) / 255.0
    residual = gray - box_mean_3x3(gray)
    return float(np.var(residual))


def mean_luminance(image: np.ndarray) -> float:
    """Mean luminance normalized to [0, 1] for 8-bit input."""
    return float(np.mean(_to_gray(image)) / 255.0)


def filter_frames(
    frames: Sequence[ImageRecord],
    *,
    blackout_luminance_max: float,
    noise_variance_max: float,
    loader: ImageLoader,
) -> tuple[list[ImageRecord], list[ImageRecord]]:
    """Partition frames into kept and rejected (with reject reasons).

    Blackout is checked first: a frame whose mean luminance falls below
    the blackout threshold is rejected regardless of its noise level.
    """
    kept: list[ImageRecord] = []
    rejected: list[ImageRecord] = []
    for frame in frames:
        try:
            pixels = loader(frame)
        except Exception as exc:  # noqa: BLE001 - loader failures map to one error
            raise UnreadableImageError(frame.image_id, str(exc)) from exc
        if mean_luminance(pixels) < blackout_luminance_max:
            rejected.append(
                _with_status(frame, ImageStatus.REJECTED, RejectReason.BLACKOUT)
            )
        elif noise_residual_variance(pixels) > noise_variance_max:
            rejected.append(_with_status(frame, ImageStatus.REJECTED, RejectReason.NOISE))
        else:
            kept.append(_with_status(frame, ImageStatus.FILTERED, None))
    return kept, rejected


def _with_status(
    frame: ImageRecord, status: ImageStatus, reason: RejectReason | None
) -> ImageRecord:
    return ImageRecord(
        image_id=frame.image_id,
        growth_run_id=frame.growth_run_id,
        captured_at=frame.captured_at,
        width=frame.width,
        height=frame.height,
        storage_path=frame.storage_path,
        status=status,
        reject_reason=reason,
    )
