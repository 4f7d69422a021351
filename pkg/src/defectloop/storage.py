"""Directory-tree + JSON-file persistence for one data root.

No database: everything is diffable files under a single root, with
write-temp-then-rename semantics for every JSON document.

Layout::

    <root>/
      manifest.json                     dataset manifest
      runs/<growth_run_id>.json         capture manifests
      images/<res>/<image_id>.png       preprocessed images per resolution
      annotations/<res>/<image_id>/<source_key>.json
      batches/<batch_id>.json
      models/<model_id>/{params.json, meta.json}
      reports/                          grid CSV, relabel reports, figures
      pipeline_state.json
      labelers.json
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np
from PIL import Image

from .annotations import AnnotationSet
from .ingest import GrowthRunManifest
from .preprocess import DatasetManifest

DATA_ROOT_ENV = "DEFECTLOOP_DATA_ROOT"
TRUTH_SOURCE_KEY = "truth"


def resolve_data_root(explicit: "str | Path | None" = None) -> Path:
    if explicit is not None:
        return Path(explicit)
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return Path(env)
    return Path.cwd() / "data"


def atomic_write_json(path: Path, doc: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    tmp.replace(path)


def read_json(path: Path) -> Any:
    return json.loads(path.read_text(encoding="utf-8"))


class DataStore:
    def __init__(self, root: "str | Path"):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    # -- paths ---------------------------------------------------------------

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    @property
    def models_root(self) -> Path:
        return self.root / "models"

    @property
    def reports_root(self) -> Path:
        return self.root / "reports"

    @property
    def pipeline_state_path(self) -> Path:
        return self.root / "pipeline_state.json"

    @property
    def labelers_path(self) -> Path:
        return self.root / "labelers.json"

    def image_path(self, image_id: str, resolution: int) -> Path:
        return self.root / "images" / str(resolution) / f"{image_id}.png"

    def annotation_path(self, image_id: str, resolution: int, source_key: str) -> Path:
        return self.root / "annotations" / str(resolution) / image_id / f"{source_key}.json"

    def batch_path(self, batch_id: str) -> Path:
        return self.root / "batches" / f"{batch_id}.json"

    def run_manifest_path(self, growth_run_id: str) -> Path:
        return self.root / "runs" / f"{growth_run_id}.json"

    # -- images ---------------------------------------------------------------

    def save_image(self, image_id: str, resolution: int, image: np.ndarray) -> Path:
        """Store a [0, 1] float (or uint8) image as 8-bit PNG."""
        arr = np.asarray(image)
        if arr.dtype != np.uint8:
            arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
        path = self.image_path(image_id, resolution)
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr, mode="RGB" if arr.ndim == 3 else "L").save(path)
        return path

    def load_image(self, image_id: str, resolution: int) -> np.ndarray:
        """Load as float in [0, 1]."""
        path = self.image_path(image_id, resolution)
        return np.asarray(Image.open(path), dtype=np.float64) / 255.0

    def has_image(self, image_id: str, resolution: int) -> bool:
        return self.image_path(image_id, resolution).exists()

    # -- annotations ------------------------------------------------------------

    def save_annotation(
        self, annotation: AnnotationSet, resolution: int, source_key: Optional[str] = None
    ) -> Path:
        key = source_key or annotation.source.key
        path = self.annotation_path(annotation.image_id, resolution, key)
        atomic_write_json(path, annotation.to_json_dict())
        return path

    def load_annotation(
        self, image_id: str, resolution: int, source_key: str
    ) -> AnnotationSet:
        path = self.annotation_path(image_id, resolution, source_key)
        return AnnotationSet.from_json_dict(read_json(path))

    def has_annotation(self, image_id: str, resolution: int, source_key: str) -> bool:
        return self.annotation_path(image_id, resolution, source_key).exists()

    def annotation_sources(self, image_id: str, resolution: int) -> list[str]:
        folder = self.root / "annotations" / str(resolution) / image_id
        if not folder.exists():
            return []
        return sorted(p.stem for p in folder.glob("*.json"))

    def save_truth(self, annotation: AnnotationSet, resolution: int) -> Path:
        """Ground truth for synthetic corpora and oracle labelers."""
        return self.save_annotation(annotation, resolution, TRUTH_SOURCE_KEY)

    def load_truth(self, image_id: str, resolution: int) -> AnnotationSet:
        return self.load_annotation(image_id, resolution, TRUTH_SOURCE_KEY)

    # -- documents -----------------------------------------------------------

    def save_manifest(self, manifest: DatasetManifest) -> None:
        atomic_write_json(self.manifest_path, manifest.to_json_dict())

    def load_manifest(self) -> DatasetManifest:
        return DatasetManifest.from_json_dict(read_json(self.manifest_path))

    def save_run_manifest(self, manifest: GrowthRunManifest) -> None:
        atomic_write_json(self.run_manifest_path(manifest.growth_run_id), manifest.to_json_dict())

    def load_run_manifest(self, growth_run_id: str) -> GrowthRunManifest:
        return GrowthRunManifest.from_json_dict(read_json(self.run_manifest_path(growth_run_id)))

    def save_report_json(self, name: str, doc: Any) -> Path:
        path = self.reports_root / name
        atomic_write_json(path, doc)
        return path

    def save_report_text(self, name: str, text: str) -> Path:
        path = self.reports_root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(text, encoding="utf-8")
        tmp.replace(path)
        return path
