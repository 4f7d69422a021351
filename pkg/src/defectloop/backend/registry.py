"""Versioned on-disk model registry.

Layout: ``models/<model_id>/params.json`` plus ``meta.json``.  Writes go
through a temp file and an atomic rename so a crashed trainer never leaves
a half-written model behind.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Optional

from ..errors import UntrainedModelError
from .base import BackendKind, ModelHandle


def _atomic_write_json(path: Path, doc: Any) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    tmp.replace(path)


class ModelRegistry:
    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _model_dir(self, model_id: str) -> Path:
        return self.root / model_id

    def save(
        self,
        model_id: str,
        backend_kind: BackendKind,
        params: dict[str, Any],
        training_manifest_id: Optional[str] = None,
    ) -> ModelHandle:
        """Persist parameters; the version counter bumps on every save."""
        model_dir = self._model_dir(model_id)
        model_dir.mkdir(parents=True, exist_ok=True)
        version = 1
        meta_path = model_dir / "meta.json"
        if meta_path.exists():
            version = int(json.loads(meta_path.read_text())["version"]) + 1
        handle = ModelHandle(
            model_id=model_id,
            backend_kind=backend_kind,
            version=version,
            training_manifest_id=training_manifest_id,
        )
        _atomic_write_json(model_dir / "params.json", params)
        _atomic_write_json(meta_path, handle.to_json_dict())
        return handle

    def load_params(self, model_id: str) -> dict[str, Any]:
        params_path = self._model_dir(model_id) / "params.json"
        if not params_path.exists():
            raise UntrainedModelError(f"model {model_id!r} has no trained parameters")
        return json.loads(params_path.read_text(encoding="utf-8"))

    def load_handle(self, model_id: str) -> ModelHandle:
        meta_path = self._model_dir(model_id) / "meta.json"
        if not meta_path.exists():
            raise UntrainedModelError(f"model {model_id!r} is not in the registry")
        return ModelHandle.from_json_dict(json.loads(meta_path.read_text(encoding="utf-8")))

    def list_models(self) -> list[str]:
        if not self.root.exists():
            return []
        return sorted(p.name for p in self.root.iterdir() if (p / "meta.json").exists())
