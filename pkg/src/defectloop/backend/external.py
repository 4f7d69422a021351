"""HTTP client for out-of-process model backends.

Protocol (JSON bodies, grids row-major, numbers as doubles):

* ``POST /train``   {dataset_uri, classes, hyperparams} -> {model_id}
* ``POST /predict`` {model_id, image} -> {probability_maps, boxes}
* ``GET /health``   -> {status}

Images travel as base64 PNG.  Deep architectures stay out of process so
the pipeline itself is testable standalone; hyperparameters are validated
here and forwarded opaquely.
"""

from __future__ import annotations

import base64
import io
from typing import Any, Optional, Sequence

import httpx
import numpy as np
from PIL import Image

from ..annotations import BoxAnnotation, DefectClass
from ..errors import (
    BackendTimeoutError,
    BackendUnavailableError,
    MalformedResponseError,
    RemoteError,
)
from .base import BackendKind, ModelHandle, Prediction, TrainingHyperparams

DEFAULT_TIMEOUT_SECONDS = 10.0
DEFAULT_RETRIES = 3


def encode_image_png_base64(image: np.ndarray) -> str:
    """Float [0, 1] (or uint8) image -> base64 PNG string."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    pil = Image.fromarray(arr, mode="RGB" if arr.ndim == 3 else "L")
    buffer = io.BytesIO()
    pil.save(buffer, format="PNG")
    return base64.b64encode(buffer.getvalue()).decode("ascii")


def decode_image_png_base64(payload: str) -> np.ndarray:
    raw = base64.b64decode(payload)
    return np.asarray(Image.open(io.BytesIO(raw)), dtype=np.float64) / 255.0


class ExternalBackend:
    """Talks the external-backend wire protocol with timeout and retry."""

    kind = BackendKind.EXTERNAL

    def __init__(
        self,
        endpoint: str,
        timeout_seconds: float = DEFAULT_TIMEOUT_SECONDS,
        retries: int = DEFAULT_RETRIES,
        client: Optional[httpx.Client] = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.timeout_seconds = timeout_seconds
        self.retries = max(1, retries)
        self._client = client or httpx.Client(timeout=timeout_seconds)

    # -- transport ----------------------------------------------------------

    def _request(self, method: str, path: str, json_body: Any = None) -> Any:
        url = f"{self.endpoint}{path}"
        last_exc: Exception | None = None
        for _ in range(self.retries):
            try:
                response = self._client.request(method, url, json=json_body)
            except httpx.TimeoutException as exc:
                last_exc = exc
                continue
            except httpx.TransportError as exc:
                last_exc = exc
                continue
            if response.status_code >= 400:
                message = self._error_message(response)
                raise RemoteError(f"{path} failed ({response.status_code}): {message}")
            try:
                return response.json()
            except ValueError as exc:
                raise MalformedResponseError(f"{path} returned non-JSON body") from exc
        if isinstance(last_exc, httpx.TimeoutException):
            raise BackendTimeoutError(
                f"{url} timed out after {self.retries} attempts"
            ) from last_exc
        raise BackendUnavailableError(f"{url} unreachable: {last_exc}") from last_exc

    @staticmethod
    def _error_message(response: httpx.Response) -> str:
        try:
            doc = response.json()
            return str(doc.get("error", doc))
        except ValueError:
            return response.text[:200]

    # -- protocol ------------------------------------------------------------

    def health(self) -> dict[str, Any]:
        doc = self._request("GET", "/health")
        if not isinstance(doc, dict) or "status" not in doc:
            raise MalformedResponseError("/health must return {status}")
        return doc

    def train(
        self,
        dataset_uri: str,
        classes: Sequence[DefectClass],
        hyperparams: TrainingHyperparams,
        training_manifest_id: Optional[str] = None,
    ) -> ModelHandle:
        doc = self._request(
            "POST",
            "/train",
            {
                "dataset_uri": dataset_uri,
                "classes": [c.value for c in classes],
                "hyperparams": hyperparams.to_json_dict(),
            },
        )
        if not isinstance(doc, dict) or not doc.get("model_id"):
            raise MalformedResponseError("/train must return {model_id}")
        return ModelHandle(
            model_id=str(doc["model_id"]),
            backend_kind=BackendKind.EXTERNAL,
            version=int(doc.get("version", 1)),
            training_manifest_id=training_manifest_id,
            endpoint=self.endpoint,
        )

    def predict(self, handle: ModelHandle, image_id: str, image: np.ndarray) -> Prediction:
        arr = np.asarray(image)
        height, width = arr.shape[:2]
        doc = self._request(
            "POST",
            "/predict",
            {"model_id": handle.model_id, "image": encode_image_png_base64(arr)},
        )
        return self._parse_prediction(doc, image_id, width, height)

    @staticmethod
    def _parse_prediction(doc: Any, image_id: str, width: int, height: int) -> Prediction:
        if not isinstance(doc, dict):
            raise MalformedResponseError("prediction body must be an object")
        maps: dict[DefectClass, np.ndarray] = {}
        for class_name, grid in (doc.get("probability_maps") or {}).items():
            try:
                defect_class = DefectClass(class_name)
            except ValueError as exc:
                raise MalformedResponseError(f"unknown class {class_name!r}") from exc
            try:
                grid_w, grid_h = int(grid["width"]), int(grid["height"])
                values = np.asarray(grid["values"], dtype=np.float64)
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedResponseError(
                    f"probability map for {class_name} malformed"
                ) from exc
            if values.size != grid_w * grid_h:
                raise MalformedResponseError(
                    f"map for {class_name} has {values.size} values, expected {grid_w * grid_h}"
                )
            maps[defect_class] = values.reshape(grid_h, grid_w)
        boxes = []
        for box_doc in doc.get("boxes") or []:
            try:
                boxes.append(BoxAnnotation.from_json_dict(box_doc))
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedResponseError(f"box malformed: {box_doc}") from exc
        prediction = Prediction(image_id=image_id, probability_maps=maps, boxes=tuple(boxes))
        return prediction.validate(width, height)
