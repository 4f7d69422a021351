"""HTTP service: task distribution, annotation intake, pipeline control.

Storage is the same directory tree the CLI uses, so the service is just a
concurrent front door over it.  Leases guarantee an image is never handed
to two labelers at once; a lease that times out silently returns the image
to the pool.  Any payload violating the annotation data model comes back
as a 4xx with a machine-readable reason.
"""

from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import FileResponse, JSONResponse, PlainTextResponse, Response
from fastapi.staticfiles import StaticFiles

from . import errors
from .annotations import (
    AnnotationSet,
    DefectClass,
    ReviewState,
    SourceKind,
    human_source,
)
from .backend import ModelRegistry, ReferenceClassicalBackend
from .consensus import (
    ConsensusConfig,
    LabelingBatch,
    ReviewDecision,
    apply_review,
    correction_cost,
    create_batch,
    merge_consensus,
)
from .orchestrator import (
    OracleLabelProvider,
    PipelineConfig,
    PipelineRunner,
    PipelineState,
)
from .preprocess import Split
from .storage import DataStore, atomic_write_json, read_json

DEFAULT_LEASE_SECONDS = 30 * 60  # unassisted labeling runs ~15 min/image


@dataclass
class ServiceConfig:
    resolution: int = 512
    batch_size: int = 100
    labelers_per_image: int = 1
    lease_seconds: float = DEFAULT_LEASE_SECONDS
    consensus: ConsensusConfig = ConsensusConfig()
    classes: tuple[DefectClass, ...] = (DefectClass.POLYCRYSTALLINE, DefectClass.CENTER)
    pipeline: Optional[PipelineConfig] = None
    ui_dist: Optional[Path] = None


@dataclass
class Lease:
    task_id: str
    image_id: str
    labeler_id: str
    batch_id: str
    expires_at: float
    pre_annotation: Optional[AnnotationSet] = None

    def expired(self, now: float) -> bool:
        return now > self.expires_at


class LabelingService:
    """In-process state machine behind the HTTP surface.

    One re-entrant lock serializes assignment and submission mutations;
    reads of immutable annotation files stay lock-free.
    """

    def __init__(self, store: DataStore, config: ServiceConfig):
        self.store = store
        self.config = config
        self.lock = threading.RLock()
        self.labelers: set[str] = set()
        self.leases: dict[str, Lease] = {}
        self.submissions: dict[str, set[str]] = {}  # image_id -> labeler ids done
        self.batches: list[LabelingBatch] = []
        self.consensus_results: dict[str, dict[str, Any]] = {}  # batch_id -> report
        self.pre_annotations: dict[str, AnnotationSet] = {}
        self.runner: Optional[PipelineRunner] = None
        self.pipeline_thread: Optional[threading.Thread] = None
        self.pipeline_error: Optional[str] = None
        self._load_labelers()
        self._open_batches()

    # -- setup ------------------------------------------------------------------

    def _load_labelers(self) -> None:
        if self.store.labelers_path.exists():
            self.labelers = set(read_json(self.store.labelers_path))

    def _save_labelers(self) -> None:
        atomic_write_json(self.store.labelers_path, sorted(self.labelers))

    def _open_batches(self) -> None:
        if not self.store.manifest_path.exists():
            return
        manifest = self.store.load_manifest()
        pool = manifest.image_ids(Split.TRAIN)
        index = 0
        while pool:
            batch, pool = create_batch(pool, self.config.batch_size, batch_id=f"batch-{index:04d}")
            self.batches.append(batch)
            atomic_write_json(self.store.batch_path(batch.batch_id), batch.to_json_dict())
            index += 1

    # -- labelers -----------------------------------------------------------------

    def register_labeler(self, labeler_id: str) -> None:
        with self.lock:
            self.labelers.add(labeler_id)
            self._save_labelers()

    # -- task leasing ---------------------------------------------------------------

    def _active_leases_by_image(self, now: float) -> dict[str, Lease]:
        for task_id in [t for t, lease in self.leases.items() if lease.expired(now)]:
            del self.leases[task_id]
        return {lease.image_id: lease for lease in self.leases.values()}

    def _current_batch(self) -> Optional[LabelingBatch]:
        for batch in self.batches:
            done = all(
                len(self.submissions.get(i, ())) >= self.config.labelers_per_image
                for i in batch.image_ids
            )
            if not done:
                return batch
        return None

    def next_task(self, labeler_id: str) -> Optional[dict[str, Any]]:
        with self.lock:
            if labeler_id not in self.labelers:
                raise errors.UnknownLabelerError(labeler_id)
            now = time.monotonic()
            leased = self._active_leases_by_image(now)
            batch = self._current_batch()
            if batch is None:
                return None
            for image_id in batch.image_ids:
                submitted = self.submissions.get(image_id, set())
                if len(submitted) >= self.config.labelers_per_image:
                    continue
                if labeler_id in submitted:
                    continue
                if image_id in leased:
                    continue
                task_id = uuid.uuid4().hex
                pre = self._pre_annotation_for(image_id)
                self.leases[task_id] = Lease(
                    task_id=task_id,
                    image_id=image_id,
                    labeler_id=labeler_id,
                    batch_id=batch.batch_id,
                    expires_at=now + self.config.lease_seconds,
                    pre_annotation=pre,
                )
                return self._envelope(task_id, image_id, batch.batch_id, pre)
            return None

    def _envelope(
        self, task_id: str, image_id: str, batch_id: str, pre: Optional[AnnotationSet]
    ) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "task_id": task_id,
            "image_id": image_id,
            "image_uri": f"/images/{image_id}.png",
            "batch_id": batch_id,
            "class_catalog": [
                {"id": c.value, "task": c.task.value} for c in self.config.classes
            ],
        }
        if pre is not None:
            doc["pre_annotation"] = pre.to_json_dict()
        return doc

    def _pre_annotation_for(self, image_id: str) -> Optional[AnnotationSet]:
        """Model overlay for the labeler; active from the MAL phase on
        (or whenever one was seeded directly and no pipeline runs)."""
        seeded = self.pre_annotations.get(image_id)
        if self.runner is None:
            return seeded
        if self.runner.state.phase.value == "baseline_training":
            return None
        if seeded is not None:
            return seeded
        handle = self.runner.handle
        if handle is None:
            return None
        try:
            image = self.store.load_image(image_id, self.config.resolution)
            prediction = self.runner.backend.predict(handle, image_id, image)
        except errors.DefectLoopError:
            return None
        return prediction.to_annotation_set(handle.model_id)

    # -- submission -------------------------------------------------------------------

    def submit_annotation(
        self, task_id: str, payload: dict[str, Any], elapsed_seconds: Optional[float]
    ) -> dict[str, Any]:
        with self.lock:
            lease = self.leases.get(task_id)
            if lease is None:
                raise errors.UnknownTaskError(task_id)
            if lease.expired(time.monotonic()):
                del self.leases[task_id]
                raise errors.LeaseExpiredError(f"lease for task {task_id} expired")
            try:
                annotation = AnnotationSet.from_json_dict(payload)
            except errors.DefectLoopError as exc:
                raise errors.ValidationFailedError(str(exc)) from exc
            except (KeyError, TypeError, ValueError) as exc:
                raise errors.ValidationFailedError(str(exc)) from exc
            if annotation.image_id != lease.image_id:
                raise errors.ValidationFailedError(
                    f"annotation is for {annotation.image_id}, task covers {lease.image_id}"
                )
            if annotation.source.kind is not SourceKind.HUMAN:
                annotation = replace(annotation, source=human_source(lease.labeler_id))
            self._validate_geometry(annotation)
            if elapsed_seconds is not None:
                annotation = replace(annotation, elapsed_labeling_seconds=float(elapsed_seconds))
            annotation = replace(annotation, review_state=ReviewState.DRAFT)
            if lease.pre_annotation is not None:
                annotation = replace(annotation, seeded_from=lease.pre_annotation.source)
            self.store.save_annotation(annotation, self.config.resolution)
            self.submissions.setdefault(lease.image_id, set()).add(lease.labeler_id)
            del self.leases[task_id]
            ack: dict[str, Any] = {"status": "accepted", "image_id": lease.image_id}
            if lease.pre_annotation is not None:
                cost = correction_cost(lease.pre_annotation, annotation)
                ack["correction_cost"] = cost.to_json_dict()
            if len(self.submissions[lease.image_id]) >= self.config.labelers_per_image:
                self._merge_image(lease.batch_id, lease.image_id)
            return ack

    def _validate_geometry(self, annotation: AnnotationSet) -> None:
        res = self.config.resolution
        for mask in annotation.masks:
            if (mask.width, mask.height) != (res, res):
                raise errors.ValidationFailedError(
                    f"mask is {mask.width}x{mask.height}, dataset resolution is {res}"
                )
        for box in annotation.boxes:
            if not box.fits_within(res, res):
                raise errors.ValidationFailedError(f"box {box.xywh} outside {res}x{res} frame")

    def _merge_image(self, batch_id: str, image_id: str) -> None:
        res = self.config.resolution
        sets = []
        for labeler_id in sorted(self.submissions[image_id]):
            key = human_source(labeler_id).key
            sets.append(self.store.load_annotation(image_id, res, key))
        result = merge_consensus(sets, self.config.consensus)
        merged = apply_review(result.merged, ReviewDecision.CROWD_APPROVE)
        self.store.save_annotation(merged, res, "consensus")
        report = self.consensus_results.setdefault(
            batch_id, {"batch_id": batch_id, "results": []}
        )
        report["results"].append(result.to_json_dict())
        atomic_write_json(
            self.store.reports_root / f"consensus_{batch_id}.json", report
        )

    def consensus_report(self, batch_id: str) -> dict[str, Any]:
        with self.lock:
            if batch_id in self.consensus_results:
                return self.consensus_results[batch_id]
        path = self.store.reports_root / f"consensus_{batch_id}.json"
        if path.exists():
            return read_json(path)
        if any(b.batch_id == batch_id for b in self.batches):
            return {"batch_id": batch_id, "results": []}
        raise errors.UnknownTaskError(batch_id)

    # -- pipeline control ----------------------------------------------------------------

    def pipeline_control(self, command: str, config: Optional[dict[str, Any]] = None) -> dict[str, Any]:
        if command == "start":
            return self._pipeline_start(config or {})
        if command == "status":
            return self._pipeline_status()
        if command == "abort":
            return self._pipeline_abort()
        if command == "advance":
            return self._pipeline_status()  # phases advance on their own
        raise ValueError(f"unknown pipeline command {command!r}")

    def _pipeline_start(self, overrides: dict[str, Any]) -> dict[str, Any]:
        with self.lock:
            if self.pipeline_thread is not None and self.pipeline_thread.is_alive():
                raise errors.AlreadyRunningError("a pipeline run is already active")
            manifest = self.store.load_manifest()
            base = self.config.pipeline or PipelineConfig(
                classes=self.config.classes, resolution=self.config.resolution
            )
            fields: dict[str, Any] = {}
            for name in ("batch_size", "max_batches", "baseline_threshold", "final_threshold", "seed"):
                if name in overrides:
                    fields[name] = overrides[name]
            config = replace(base, **fields) if fields else base
            backend = ReferenceClassicalBackend(
                ModelRegistry(self.store.models_root), classes=config.classes
            )
            provider = OracleLabelProvider(self.store, config.resolution)
            runner = PipelineRunner(
                self.store, backend, config, provider, manifest=manifest
            )
            self.runner = runner
            self.pipeline_error = None
            pool = manifest.image_ids(Split.TRAIN)

            def run() -> None:
                try:
                    runner.run_all(pool)
                except Exception as exc:  # noqa: BLE001 - surfaced via status
                    self.pipeline_error = str(exc)

            self.pipeline_thread = threading.Thread(target=run, daemon=True)
            self.pipeline_thread.start()
            return self._pipeline_status()

    def _pipeline_status(self) -> dict[str, Any]:
        if self.runner is None:
            if self.store.pipeline_state_path.exists():
                return read_json(self.store.pipeline_state_path)
            raise errors.NoActiveRunError("no pipeline run to report on")
        doc = self.runner.state.to_json_dict()
        if self.pipeline_error:
            doc["error"] = self.pipeline_error
        return doc

    def _pipeline_abort(self) -> dict[str, Any]:
        if self.runner is None:
            raise errors.NoActiveRunError("no pipeline run to abort")
        self.runner.abort_requested = True
        return self._pipeline_status()


# ---------------------------------------------------------------------------
# FastAPI wiring
# ---------------------------------------------------------------------------

_ERROR_STATUS: list[tuple[type, int]] = [
    (errors.UnknownLabelerError, 404),
    (errors.UnknownTaskError, 404),
    (errors.NoActiveRunError, 404),
    (errors.LeaseExpiredError, 409),
    (errors.AlreadyRunningError, 409),
    (errors.ValidationFailedError, 422),
    (errors.DefectLoopError, 400),
]


def _error_response(exc: errors.DefectLoopError) -> JSONResponse:
    status = next(code for kind, code in _ERROR_STATUS if isinstance(exc, kind))
    return JSONResponse(
        status_code=status,
        content={"error": type(exc).__name__.removesuffix("Error"), "detail": str(exc)},
    )


def create_app(store: DataStore, config: Optional[ServiceConfig] = None) -> FastAPI:
    config = config or ServiceConfig()
    service = LabelingService(store, config)
    app = FastAPI(title="defectloop", version="0.1.0")
    app.state.service = service

    @app.exception_handler(errors.DefectLoopError)
    async def handle_domain_error(request: Request, exc: errors.DefectLoopError):
        return _error_response(exc)

    @app.post("/labelers")
    async def register_labeler(body: dict):
        labeler_id = body.get("labeler_id") or body.get("id")
        if not labeler_id:
            raise errors.ValidationFailedError("labeler_id is required")
        service.register_labeler(str(labeler_id))
        return {"status": "registered", "labeler_id": labeler_id}

    @app.get("/tasks/next")
    async def next_task(labeler: str):
        envelope = service.next_task(labeler)
        if envelope is None:
            return Response(status_code=204)
        return envelope

    @app.post("/tasks/{task_id}/annotation")
    async def submit_annotation(task_id: str, body: dict):
        annotation = body.get("annotation", body)
        elapsed = body.get("elapsed_seconds")
        return service.submit_annotation(task_id, annotation, elapsed)

    @app.get("/annotations/{image_id}/{source_key}")
    async def get_annotation(image_id: str, source_key: str):
        path = service.store.annotation_path(image_id, config.resolution, source_key)
        if not path.exists():
            raise errors.UnknownTaskError(f"{image_id}/{source_key}")
        return read_json(path)

    @app.get("/batches/{batch_id}/consensus")
    async def batch_consensus(batch_id: str):
        return service.consensus_report(batch_id)

    @app.post("/pipeline/start")
    async def pipeline_start(body: Optional[dict] = None):
        return service.pipeline_control("start", body or {})

    @app.get("/pipeline/status")
    async def pipeline_status():
        return service.pipeline_control("status")

    @app.post("/pipeline/abort")
    async def pipeline_abort():
        return service.pipeline_control("abort")

    @app.get("/reports/grid.csv")
    async def grid_report():
        path = service.store.reports_root / "grid_report.csv"
        if not path.exists():
            raise errors.UnknownTaskError("grid_report.csv")
        return PlainTextResponse(path.read_text(encoding="utf-8"), media_type="text/csv")

    @app.get("/images/{image_id}.png")
    async def image(image_id: str):
        path = service.store.image_path(image_id, config.resolution)
        if not path.exists():
            raise errors.UnknownTaskError(image_id)
        return FileResponse(path, media_type="image/png")

    ui_dist = config.ui_dist
    if ui_dist is None:
        candidate = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        ui_dist = candidate if candidate.exists() else None
    if ui_dist is not None and ui_dist.exists():
        app.mount("/ui", StaticFiles(directory=str(ui_dist), html=True), name="ui")

    return app
