"""Procedural corpus with exact ground truth.

Scenes mimic the in-situ view the reactor camera gives: a dark field, a
bright substrate disk, extended mid-bright parasitic patches (mask labels),
small very bright dots (center boxes), and optional rough arcs on the disk
boundary (edge boxes).  One scene renders at any target resolution, so the
same corpus supports multi-resolution experiments with per-resolution
exact labels.

Brightness bands are well separated on purpose: the corpus exists to
exercise loop semantics and metric plumbing, not to stress classifiers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .annotations import (
    CONSENSUS_SOURCE,
    AnnotationSet,
    BoxAnnotation,
    DefectClass,
    MaskAnnotation,
    ReviewState,
    mask_to_bbox,
)
from .preprocess import (
    DatasetManifest,
    ManifestEntry,
    ORIGINAL_LINEAGE,
    build_split_map,
    split_dataset,
)
from .storage import DataStore

BACKGROUND_LEVEL = 0.08
SUBSTRATE_LEVEL = 0.35
PATCH_LEVEL = 0.75
DOT_LEVEL = 0.95
NOISE_SIGMA = 0.006


@dataclass(frozen=True, slots=True)
class DiskScene:
    """Resolution-independent description of one synthetic frame.

    All geometry is in unit coordinates ([0, 1] across the frame).
    """

    background: float
    substrate_center: tuple[float, float]
    substrate_radius: float
    patches: tuple[tuple[float, float, float, float], ...]  # (x, y, w, h) unit rects
    dots: tuple[tuple[float, float, float], ...]  # (x, y, radius)
    edge_bumps: tuple[tuple[float, float, float], ...]  # (angle, width, amplitude)
    noise_seed: int


def sample_scene(
    rng: np.random.Generator,
    classes: Sequence[DefectClass],
    noise_seed: int,
) -> DiskScene:
    cx = float(rng.uniform(0.45, 0.55))
    cy = float(rng.uniform(0.45, 0.55))
    radius = float(rng.uniform(0.28, 0.36))

    patches: list[tuple[float, float, float, float]] = []
    if DefectClass.POLYCRYSTALLINE in classes:
        for _ in range(int(rng.integers(1, 4))):
            w = float(rng.uniform(0.08, 0.18))
            h = float(rng.uniform(0.08, 0.18))
            # keep patches inside the disk so the boundary stays clean
            r_max = radius - math.hypot(w, h) / 2 - 0.02
            rho = float(rng.uniform(0.0, max(0.01, r_max)))
            phi = float(rng.uniform(0.0, 2 * math.pi))
            px = cx + rho * math.cos(phi) - w / 2
            py = cy + rho * math.sin(phi) - h / 2
            patches.append((px, py, w, h))

    dots: list[tuple[float, float, float]] = []
    if DefectClass.CENTER in classes:
        for _ in range(int(rng.integers(1, 5))):
            for _attempt in range(20):
                r_dot = float(rng.uniform(0.008, 0.016))
                rho = float(rng.uniform(0.0, radius - 4 * r_dot))
                phi = float(rng.uniform(0.0, 2 * math.pi))
                dx = cx + rho * math.cos(phi)
                dy = cy + rho * math.sin(phi)
                inside_patch = any(
                    px - r_dot <= dx <= px + pw + r_dot and py - r_dot <= dy <= py + ph + r_dot
                    for px, py, pw, ph in patches
                )
                far_from_others = all(
                    math.hypot(dx - ox, dy - oy) > 3 * (r_dot + orad)
                    for ox, oy, orad in dots
                )
                if not inside_patch and far_from_others:
                    dots.append((dx, dy, r_dot))
                    break

    bumps: list[tuple[float, float, float]] = []
    if DefectClass.EDGE in classes:
        for _ in range(int(rng.integers(1, 3))):
            angle = float(rng.uniform(-math.pi, math.pi))
            if all(abs(_wrap(angle - a)) > 0.9 for a, _, _ in bumps):
                bumps.append(
                    (
                        angle,
                        float(rng.uniform(0.18, 0.30)),
                        float(rng.uniform(0.05, 0.09)) * radius,
                    )
                )

    return DiskScene(
        background=BACKGROUND_LEVEL,
        substrate_center=(cx, cy),
        substrate_radius=radius,
        patches=tuple(patches),
        dots=tuple(dots),
        edge_bumps=tuple(bumps),
        noise_seed=noise_seed,
    )


def _wrap(angle: float) -> float:
    return math.atan2(math.sin(angle), math.cos(angle))


def render_scene(scene: DiskScene, resolution: int) -> tuple[np.ndarray, AnnotationSet]:
    """Rasterize a scene and its exact labels at one resolution."""
    n = resolution
    ys, xs = np.mgrid[0:n, 0:n]
    px = (xs + 0.5) / n
    py = (ys + 0.5) / n

    cx, cy = scene.substrate_center
    dist = np.hypot(px - cx, py - cy)
    angle = np.arctan2(py - cy, px - cx)
    radius_at = np.full_like(dist, scene.substrate_radius)
    for bump_angle, bump_width, bump_amplitude in scene.edge_bumps:
        delta = np.arctan2(np.sin(angle - bump_angle), np.cos(angle - bump_angle))
        radius_at = radius_at + bump_amplitude * np.exp(-((delta / (bump_width / 2)) ** 2))
    substrate = dist <= radius_at

    image = np.full((n, n), scene.background)
    image[substrate] = SUBSTRATE_LEVEL

    patch_mask = np.zeros((n, n), dtype=bool)
    for rect_x, rect_y, rect_w, rect_h in scene.patches:
        inside = (px >= rect_x) & (px < rect_x + rect_w) & (py >= rect_y) & (py < rect_y + rect_h)
        patch_mask |= inside
    image[patch_mask] = PATCH_LEVEL

    boxes: list[BoxAnnotation] = []
    for dot_x, dot_y, dot_r in scene.dots:
        dot = np.hypot(px - dot_x, py - dot_y) <= dot_r
        if not dot.any():
            continue
        image[dot] = DOT_LEVEL
        bbox = mask_to_bbox(dot)
        boxes.append(BoxAnnotation(DefectClass.CENTER, *bbox))

    if scene.edge_bumps:
        clean = dist <= scene.substrate_radius
        deviation = substrate & ~clean
        # a bump's labeled extent is where it visibly displaces the
        # boundary (>= ~0.7 px), not every sub-pixel rasterization speck
        visible_px = 0.7 / n
        for bump_angle, bump_width, bump_amplitude in scene.edge_bumps:
            delta = np.arctan2(np.sin(angle - bump_angle), np.cos(angle - bump_angle))
            profile = bump_amplitude * np.exp(-((delta / (bump_width / 2)) ** 2))
            local = deviation & (np.abs(delta) <= bump_width) & (profile >= visible_px)
            bbox = mask_to_bbox(local)
            if bbox is not None and bbox[2] >= 2 and bbox[3] >= 2:
                boxes.append(BoxAnnotation(DefectClass.EDGE, *bbox))

    rng = np.random.default_rng(scene.noise_seed)
    image = np.clip(image + rng.normal(0.0, NOISE_SIGMA, image.shape), 0.0, 1.0)

    masks = ()
    if scene.patches:
        masks = (MaskAnnotation.from_array(DefectClass.POLYCRYSTALLINE, patch_mask),)
    annotation = AnnotationSet(
        image_id="",  # set by the caller
        source=CONSENSUS_SOURCE,
        masks=masks,
        boxes=tuple(sorted(boxes, key=lambda b: (b.defect_class.value, b.xywh))),
        review_state=ReviewState.EXPERT_APPROVED,
    )
    return image, annotation


@dataclass(frozen=True, slots=True)
class SyntheticCorpusConfig:
    n_images: int = 60
    resolutions: tuple[int, ...] = (256, 512)
    classes: tuple[DefectClass, ...] = (DefectClass.POLYCRYSTALLINE, DefectClass.CENTER)
    seed: int = 7
    split_ratio: float = 0.9
    dataset_id: str = "synthetic"


def generate_corpus(store: DataStore, config: SyntheticCorpusConfig) -> DatasetManifest:
    """Render a corpus into a data store, with per-resolution ground truth.

    Each image id maps to one scene rendered at every configured
    resolution; ground truth goes in as expert-approved consensus sets.
    """
    from dataclasses import replace as dc_replace

    rng = np.random.default_rng(config.seed)
    image_ids: list[str] = []
    entries: list[ManifestEntry] = []
    for index in range(config.n_images):
        image_id = f"synth-{index:04d}"
        image_ids.append(image_id)
        scene = sample_scene(rng, config.classes, noise_seed=config.seed * 100003 + index)
        for resolution in config.resolutions:
            image, truth = render_scene(scene, resolution)
            store.save_image(image_id, resolution, image)
            store.save_truth(dc_replace(truth, image_id=image_id), resolution)
            entries.append(
                ManifestEntry(
                    image_id=image_id,
                    resolution=resolution,
                    crop_region=(0, 0, resolution, resolution),
                    lineage=ORIGINAL_LINEAGE,
                )
            )
    train, test = split_dataset(image_ids, config.split_ratio, config.seed)
    manifest = DatasetManifest(
        dataset_id=config.dataset_id,
        entries=tuple(entries),
        split=build_split_map(train, test),
        split_seed=config.seed,
    )
    store.save_manifest(manifest)
    return manifest
