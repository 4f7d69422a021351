"""Two-step training loop and the resolution x dataset-size experiment grid.

Phase machine: BaselineTraining until the model clears the baseline
threshold, then model-assisted labeling over the remaining pool, then a
Final refinement loop until the final threshold (or the safety cap, in
which case the run is recorded Incomplete rather than spinning forever).

Selective augmentation (SAL) runs between the phases: up to a fixed number
of iterations, each augmenting only the currently low-scoring images,
retraining, and emitting a relabel report of persistent low performers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional, Protocol, Sequence

import numpy as np

from .annotations import AnnotationSet, DefectClass, ReviewState
from .augment import AugmentationPlan, TransformSpec, apply_transform, select_for_augmentation
from .backend.base import ModelHandle, PredictorBackend, TrainingHyperparams, TrainingSample
from .consensus import (
    ConsensusConfig,
    ReviewDecision,
    apply_review,
    attach_preannotations,
    correction_cost,
    create_batch,
    merge_consensus,
)
from .errors import MaxBatchesExceededError
from .metrics import CSV_HEADER, EvalConfig, MetricsReport, evaluate, per_image_accuracy
from .preprocess import DatasetManifest, ManifestEntry, Split
from .storage import DataStore, atomic_write_json, read_json

logger = logging.getLogger(__name__)

CONSENSUS_SOURCE_KEY = "consensus"


class PipelinePhase(str, Enum):
    BASELINE_TRAINING = "baseline_training"
    MAL_ASSISTED = "mal_assisted"
    FINAL = "final"
    DONE = "done"


_PHASE_ORDER = {
    PipelinePhase.BASELINE_TRAINING: 0,
    PipelinePhase.MAL_ASSISTED: 1,
    PipelinePhase.FINAL: 2,
    PipelinePhase.DONE: 3,
}


@dataclass
class PipelineState:
    phase: PipelinePhase = PipelinePhase.BASELINE_TRAINING
    current_accuracy: float = 0.0
    baseline_threshold: float = 0.80
    final_threshold: float = 0.95
    sal_iterations_done: int = 0
    batches_processed: int = 0
    max_batches: int = 50
    incomplete: bool = False
    model_id: Optional[str] = None
    model_version: int = 0

    def advance_phase(self, phase: PipelinePhase) -> None:
        if _PHASE_ORDER[phase] < _PHASE_ORDER[self.phase]:
            raise ValueError(f"phase cannot regress {self.phase.value} -> {phase.value}")
        self.phase = phase

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "phase": self.phase.value,
            "current_accuracy": self.current_accuracy,
            "baseline_threshold": self.baseline_threshold,
            "final_threshold": self.final_threshold,
            "sal_iterations_done": self.sal_iterations_done,
            "batches_processed": self.batches_processed,
            "max_batches": self.max_batches,
            "incomplete": self.incomplete,
            "model_id": self.model_id,
            "model_version": self.model_version,
        }

    @classmethod
    def from_json_dict(cls, doc: dict[str, Any]) -> "PipelineState":
        return cls(
            phase=PipelinePhase(doc["phase"]),
            current_accuracy=float(doc["current_accuracy"]),
            baseline_threshold=float(doc["baseline_threshold"]),
            final_threshold=float(doc["final_threshold"]),
            sal_iterations_done=int(doc["sal_iterations_done"]),
            batches_processed=int(doc["batches_processed"]),
            max_batches=int(doc["max_batches"]),
            incomplete=bool(doc.get("incomplete", False)),
            model_id=doc.get("model_id"),
            model_version=int(doc.get("model_version", 0)),
        )


@dataclass(frozen=True, slots=True)
class RelabelReport:
    iteration: int
    image_ids: tuple[str, ...]
    per_image_accuracy: dict[str, float]
    generated_at: str

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "iteration": self.iteration,
            "image_ids": list(self.image_ids),
            "per_image_accuracy": dict(sorted(self.per_image_accuracy.items())),
            "generated_at": self.generated_at,
        }


@dataclass(frozen=True)
class PipelineConfig:
    classes: tuple[DefectClass, ...] = (DefectClass.POLYCRYSTALLINE, DefectClass.CENTER)
    resolution: int = 512
    batch_size: int = 100
    baseline_threshold: float = 0.80
    final_threshold: float = 0.95
    sal_threshold: float = 0.5
    sal_iterations: int = 5
    sal_augment_rate: int = 3
    max_batches: int = 50
    seed: int = 0
    model_id: str = "pipeline-model"
    hyperparams: TrainingHyperparams = TrainingHyperparams()
    consensus: ConsensusConfig = ConsensusConfig()
    eval_iou_threshold: float = 0.5
    prob_threshold: float = 0.5

    def eval_config(self) -> EvalConfig:
        return EvalConfig(
            iou_threshold=self.eval_iou_threshold,
            prob_threshold=self.prob_threshold,
            classes=self.classes,
        )


class LabelProvider(Protocol):
    """Supplies one annotation set per labeler for a single image."""

    def provide(
        self, image_id: str, pre_annotation: Optional[AnnotationSet]
    ) -> list[AnnotationSet]: ...


class Evaluator(Protocol):
    def report(self, handle: ModelHandle) -> MetricsReport: ...

    def per_image(self, handle: ModelHandle, image_ids: Sequence[str]) -> dict[str, float]: ...


class OracleLabelProvider:
    """Simulated labelers that return the stored ground truth.

    Each configured labeler hands back a copy of the truth annotation,
    as a human who corrected the pre-annotation perfectly would.
    """

    def __init__(
        self,
        store: DataStore,
        resolution: int,
        labeler_ids: Sequence[str] = ("labeler-1", "labeler-2", "labeler-3"),
    ):
        self.store = store
        self.resolution = resolution
        self.labeler_ids = tuple(labeler_ids)

    def provide(
        self, image_id: str, pre_annotation: Optional[AnnotationSet]
    ) -> list[AnnotationSet]:
        from .annotations import human_source

        truth = self.store.load_truth(image_id, self.resolution)
        seeded = pre_annotation.source if pre_annotation is not None else None
        return [
            replace(
                truth,
                source=human_source(labeler_id),
                review_state=ReviewState.DRAFT,
                seeded_from=seeded,
            )
            for labeler_id in self.labeler_ids
        ]


class TestSetEvaluator:
    """Evaluates a model on the held-out test split with stored truth."""

    def __init__(
        self,
        store: DataStore,
        backend: PredictorBackend,
        manifest: DatasetManifest,
        config: PipelineConfig,
    ):
        self.store = store
        self.backend = backend
        self.manifest = manifest
        self.config = config
        self.test_ids = manifest.image_ids(Split.TEST)

    def _predict(self, handle: ModelHandle, image_ids: Sequence[str]):
        res = self.config.resolution
        return {
            image_id: self.backend.predict(handle, image_id, self.store.load_image(image_id, res))
            for image_id in image_ids
        }

    def report(self, handle: ModelHandle) -> MetricsReport:
        res = self.config.resolution
        truth = {i: self.store.load_truth(i, res) for i in self.test_ids}
        return evaluate(
            self._predict(handle, self.test_ids),
            truth,
            self.config.eval_config(),
            dataset_id=self.manifest.dataset_id,
            resolution=res,
            dataset_size=len(self.test_ids),
        )

    def per_image(self, handle: ModelHandle, image_ids: Sequence[str]) -> dict[str, float]:
        res = self.config.resolution
        truth = {i: self.store.load_truth(i, res) for i in image_ids}
        return per_image_accuracy(
            self._predict(handle, image_ids), truth, self.config.eval_config()
        )


class StoreBackedSamples(Sequence[TrainingSample]):
    """Lazy training-sample sequence; keeps memory flat on big expansions."""

    def __init__(self, store: DataStore, image_ids: Sequence[str], resolution: int, source_key: str):
        self.store = store
        self.image_ids = list(image_ids)
        self.resolution = resolution
        self.source_key = source_key

    def __len__(self) -> int:
        return len(self.image_ids)

    def __getitem__(self, index):
        if isinstance(index, slice):
            clone = StoreBackedSamples(
                self.store, self.image_ids[index], self.resolution, self.source_key
            )
            return clone
        image_id = self.image_ids[index]
        return TrainingSample(
            image_id=image_id,
            image=self.store.load_image(image_id, self.resolution),
            annotation=self.store.load_annotation(image_id, self.resolution, self.source_key),
        )


def _require_expert_approved(samples: Iterable[TrainingSample]) -> None:
    for sample in samples:
        if sample.annotation.review_state is not ReviewState.EXPERT_APPROVED:
            raise ValueError(
                f"training input for {sample.image_id} is not expert-approved"
            )


@dataclass
class BatchOutcome:
    batch_id: str
    image_ids: tuple[str, ...]
    accuracy: float
    mean_correction_cost: Optional[float] = None


class PipelineRunner:
    """Drives one pipeline run over a data store.

    The runner is the single logical writer of the pipeline state; it
    persists the state after every step so `status` calls and restarts
    see a consistent snapshot.
    """

    def __init__(
        self,
        store: DataStore,
        backend: PredictorBackend,
        config: PipelineConfig,
        label_provider: LabelProvider,
        evaluator: Optional[Evaluator] = None,
        manifest: Optional[DatasetManifest] = None,
        expert_policy: Optional[Callable[[AnnotationSet], ReviewDecision]] = None,
        initial_handle: Optional[ModelHandle] = None,
    ):
        self.store = store
        self.backend = backend
        self.config = config
        self.label_provider = label_provider
        self.manifest = manifest or store.load_manifest()
        self.evaluator = evaluator or TestSetEvaluator(store, backend, self.manifest, config)
        self.expert_policy = expert_policy or (lambda _: ReviewDecision.EXPERT_APPROVE)
        self.handle = initial_handle
        self.labeled_ids: list[str] = []
        self.augment_ids: list[str] = []
        self.state = PipelineState(
            baseline_threshold=config.baseline_threshold,
            final_threshold=config.final_threshold,
            max_batches=config.max_batches,
            model_id=config.model_id,
        )
        self.abort_requested = False
        self._persist()

    # -- persistence -----------------------------------------------------------

    def _persist(self) -> None:
        atomic_write_json(self.store.pipeline_state_path, self.state.to_json_dict())

    def _mark_incomplete(self) -> None:
        self.state.incomplete = True
        self._persist()

    # -- loop building blocks ---------------------------------------------------

    def label_batch(self, image_ids: Sequence[str], preannotate: bool) -> Optional[float]:
        """Collect labels for a batch, merge consensus, approve, persist.

        Returns the mean correction cost per image when pre-annotation was
        active, else None.
        """
        res = self.config.resolution
        drafts: dict[str, Optional[AnnotationSet]] = {i: None for i in image_ids}
        if preannotate and self.handle is not None:
            batch, _ = create_batch(list(image_ids), len(image_ids))
            predictions = {}
            for image_id in image_ids:
                prediction = self.backend.predict(
                    self.handle, image_id, self.store.load_image(image_id, res)
                )
                predictions[image_id] = prediction.to_annotation_set(
                    self.handle.model_id, self.config.prob_threshold
                )
            drafts = attach_preannotations(batch, predictions)

        costs: list[float] = []
        for image_id in image_ids:
            draft = drafts[image_id]
            labeler_sets = self.label_provider.provide(image_id, draft)
            result = merge_consensus(labeler_sets, self.config.consensus)
            merged = apply_review(result.merged, ReviewDecision.CROWD_APPROVE)
            decision = self.expert_policy(merged)
            if decision is ReviewDecision.RETURN_FOR_RELABEL:
                apply_review(merged, decision)  # recorded transition
                labeler_sets = self.label_provider.provide(image_id, None)
                result = merge_consensus(labeler_sets, self.config.consensus)
                merged = apply_review(result.merged, ReviewDecision.CROWD_APPROVE)
            approved = apply_review(merged, ReviewDecision.EXPERT_APPROVE)
            self.store.save_annotation(approved, res, CONSENSUS_SOURCE_KEY)
            if image_id not in self.labeled_ids:
                self.labeled_ids.append(image_id)
            if draft is not None:
                costs.append(float(correction_cost(draft, approved).total_edits))
        return float(np.mean(costs)) if costs else None

    def _train(self) -> ModelHandle:
        samples = StoreBackedSamples(
            self.store, self.labeled_ids + self.augment_ids, self.config.resolution,
            CONSENSUS_SOURCE_KEY,
        )
        _require_expert_approved(samples)
        self.handle = self.backend.train(
            samples,
            self.config.hyperparams,
            model_id=self.config.model_id,
            training_manifest_id=self.manifest.dataset_id,
        )
        self.state.model_version = self.handle.version
        return self.handle

    def _evaluate(self) -> float:
        report = self.evaluator.report(self.handle)
        self.state.current_accuracy = report.mean_accuracy
        self._persist()
        return report.mean_accuracy

    def _check_batch_budget(self) -> None:
        if self.abort_requested:
            self._mark_incomplete()
            raise MaxBatchesExceededError("run aborted")
        if self.state.batches_processed >= self.state.max_batches:
            self._mark_incomplete()
            raise MaxBatchesExceededError(
                f"cap of {self.state.max_batches} batches reached at accuracy "
                f"{self.state.current_accuracy:.4f}"
            )

    def _run_training_loop(
        self,
        pool: list[str],
        threshold: float,
        preannotate: bool,
        drain_pool: bool,
    ) -> tuple[list[str], list[BatchOutcome]]:
        """Shared loop: batch, label, train, evaluate, until threshold.

        With ``drain_pool`` the loop keeps going until the pool is empty
        even after the threshold is met (MAL over the remaining data);
        with an empty pool it retrains on the accumulated set.
        """
        log: list[BatchOutcome] = []
        while True:
            met = self.state.current_accuracy >= threshold and (
                self.handle is not None
            )
            if met and not (drain_pool and pool):
                break
            self._check_batch_budget()
            if pool:
                batch, pool = create_batch(
                    pool, self.config.batch_size, batch_id=f"auto-{self.state.batches_processed:04d}"
                )
                batch_ids = batch.image_ids
                atomic_write_json(self.store.batch_path(batch.batch_id), batch.to_json_dict())
                batch_id = batch.batch_id
            else:
                batch_ids = ()
                batch_id = f"refine-{self.state.batches_processed:04d}"
            cost = None
            if batch_ids:
                cost = self.label_batch(batch_ids, preannotate)
            self._train()
            accuracy = self._evaluate()
            self.state.batches_processed += 1
            self._persist()
            log.append(
                BatchOutcome(
                    batch_id=batch_id,
                    image_ids=tuple(batch_ids),
                    accuracy=accuracy,
                    mean_correction_cost=cost,
                )
            )
        return pool, log

    # -- phases -------------------------------------------------------------------

    def run_baseline_phase(self, pool: Sequence[str]) -> tuple[ModelHandle, list[BatchOutcome]]:
        """Train until the baseline threshold; returns the handle and a log
        with one entry (and one accuracy) per batch iteration."""
        self.state.advance_phase(PipelinePhase.BASELINE_TRAINING)
        self._persist()
        remaining = list(pool)
        if self.handle is not None:
            self._evaluate()
        remaining, log = self._run_training_loop(
            remaining,
            self.config.baseline_threshold,
            preannotate=True,  # uses the model only once one exists
            drain_pool=False,
        )
        self._remaining_pool = remaining
        self.state.advance_phase(PipelinePhase.MAL_ASSISTED)
        self._persist()
        return self.handle, log

    def run_sal_loop(
        self, sal_threshold: Optional[float] = None
    ) -> tuple[ModelHandle, list[RelabelReport]]:
        """Selective-augmentation retraining, at most the configured number
        of iterations, stopping early once nothing scores below threshold."""
        if self.handle is None:
            raise ValueError("SAL loop needs a trained model")
        threshold = self.config.sal_threshold if sal_threshold is None else sal_threshold
        reports: list[RelabelReport] = []
        res = self.config.resolution
        for iteration in range(1, self.config.sal_iterations + 1):
            per_image = self.evaluator.per_image(self.handle, sorted(self.labeled_ids))
            low = select_for_augmentation(per_image, threshold)
            if not low:
                break
            plan = AugmentationPlan(
                rate=self.config.sal_augment_rate,
                seed=self.config.seed * 1000 + iteration,
            )
            for image_id in low:
                image = self.store.load_image(image_id, res)
                annotation = self.store.load_annotation(image_id, res, CONSENSUS_SOURCE_KEY)
                for index in range(plan.rate - 1):
                    specs = plan.specs_for(image_id, index)
                    aug_image, aug_labels = apply_transform(image, annotation, specs)
                    aug_id = f"{image_id}.sal{iteration}.{index}"
                    self.store.save_image(aug_id, res, aug_image)
                    self.store.save_annotation(
                        replace(aug_labels, image_id=aug_id), res, CONSENSUS_SOURCE_KEY
                    )
                    self.augment_ids.append(aug_id)
            self._train()
            self._evaluate()
            per_image = self.evaluator.per_image(self.handle, sorted(self.labeled_ids))
            still_low = select_for_augmentation(per_image, threshold)
            report = RelabelReport(
                iteration=iteration,
                image_ids=tuple(still_low),
                per_image_accuracy={i: per_image[i] for i in still_low},
                generated_at=datetime.now(timezone.utc).isoformat(),
            )
            reports.append(report)
            self.store.save_report_json(f"relabel_{iteration}.json", report.to_json_dict())
            # newline-delimited queue of the latest persistent low performers
            self.store.save_report_text(
                "relabel_queue.txt", "".join(f"{i}\n" for i in still_low)
            )
            self.state.sal_iterations_done = iteration
            self._persist()
        return self.handle, reports

    def run_final_phase(self, pool: Optional[Sequence[str]] = None) -> ModelHandle:
        """MAL over the remaining pool, then refine until the final
        threshold or the batch cap (recorded Incomplete)."""
        if self.handle is None:
            raise ValueError("final phase needs the baseline model")
        remaining = list(pool if pool is not None else getattr(self, "_remaining_pool", []))
        self.state.advance_phase(PipelinePhase.MAL_ASSISTED)
        self._persist()
        remaining, _ = self._run_training_loop(
            remaining, self.config.final_threshold, preannotate=True, drain_pool=True
        )
        self.state.advance_phase(PipelinePhase.FINAL)
        self._persist()
        if self.state.current_accuracy < self.config.final_threshold:
            _, _ = self._run_training_loop(
                [], self.config.final_threshold, preannotate=True, drain_pool=False
            )
        self.state.advance_phase(PipelinePhase.DONE)
        self._persist()
        return self.handle

    def run_all(self, pool: Sequence[str]) -> ModelHandle:
        self.run_baseline_phase(pool)
        self.run_sal_loop()
        return self.run_final_phase()


# ---------------------------------------------------------------------------
# Experiment grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class GridConfig:
    resolutions: tuple[int, ...] = (256, 512)
    rates: tuple[int, ...] = (2, 5, 10)
    seed: int = 0
    classes: tuple[DefectClass, ...] = (DefectClass.POLYCRYSTALLINE, DefectClass.CENTER)
    hyperparams: TrainingHyperparams = TrainingHyperparams()
    eval_iou_threshold: float = 0.5
    prob_threshold: float = 0.5
    model_prefix: str = "grid"


@dataclass(frozen=True, slots=True)
class ExperimentGrid:
    resolutions: tuple[int, ...]
    rates: tuple[int, ...]
    cells: dict[tuple[int, int], MetricsReport]

    def __post_init__(self):
        expected = len(self.resolutions) * len(self.rates)
        if len(self.cells) != expected:
            raise ValueError(f"grid needs {expected} cells, got {len(self.cells)}")

    def to_csv(self) -> str:
        # Larger datasets first within each resolution block
        lines = [CSV_HEADER]
        for resolution in sorted(self.resolutions):
            cells = [self.cells[(resolution, rate)] for rate in self.rates]
            for report in sorted(cells, key=lambda r: -r.dataset_size):
                lines.append(report.csv_row())
        return "\n".join(lines) + "\n"


def materialize_entry(
    store: DataStore,
    entry: ManifestEntry,
    drop_log: Optional[list[dict[str, Any]]] = None,
    truth_key: str = "truth",
) -> None:
    """Render an augmented entry's image and labels into the store.

    Original entries are assumed present; augmented ones are derived from
    the parent via the lineage's recorded transform composite, so this is
    deterministic and idempotent.
    """
    if entry.is_original:
        return
    res = entry.resolution
    if store.has_image(entry.image_id, res) and store.has_annotation(
        entry.image_id, res, truth_key
    ):
        return
    parent = entry.lineage.parent_image_id
    image = store.load_image(parent, res)
    annotation = store.load_annotation(parent, res, truth_key)
    specs = [TransformSpec.from_json_dict(doc) for doc in entry.lineage.transform_specs]
    aug_image, aug_labels = apply_transform(image, annotation, specs, drop_log)
    store.save_image(entry.image_id, res, aug_image)
    store.save_annotation(replace(aug_labels, image_id=entry.image_id), res, truth_key)


def run_experiment_grid(
    store: DataStore,
    backend_factory: Callable[[], PredictorBackend],
    manifest: DatasetManifest,
    config: GridConfig = GridConfig(),
) -> ExperimentGrid:
    """Train and evaluate one model per (resolution, rate) cell.

    Writes ``reports/grid_report.csv`` with one row per cell; re-running
    with the same seeds reproduces the file byte for byte.
    """
    from .augment import expand_dataset

    cells: dict[tuple[int, int], MetricsReport] = {}
    drop_log: list[dict[str, Any]] = []
    eval_config = EvalConfig(
        iou_threshold=config.eval_iou_threshold,
        prob_threshold=config.prob_threshold,
        classes=config.classes,
    )
    for resolution in config.resolutions:
        originals = [
            e
            for e in manifest.entries_at(resolution)
            if e.is_original and manifest.split[e.image_id] is Split.TRAIN
        ]
        test_ids = manifest.image_ids(Split.TEST)
        truth = {i: store.load_truth(i, resolution) for i in test_ids}
        for rate in config.rates:
            plan = AugmentationPlan(rate=rate, seed=config.seed)
            expanded = expand_dataset(originals, plan)
            for entry in expanded:
                materialize_entry(store, entry, drop_log)
            backend = backend_factory()
            samples = StoreBackedSamples(
                store, [e.image_id for e in expanded], resolution, "truth"
            )
            handle = backend.train(
                samples,
                config.hyperparams,
                model_id=f"{config.model_prefix}-r{resolution}-x{rate}",
                training_manifest_id=manifest.dataset_id,
            )
            predictions = {
                i: backend.predict(handle, i, store.load_image(i, resolution))
                for i in test_ids
            }
            report = evaluate(
                predictions,
                truth,
                eval_config,
                dataset_id=manifest.dataset_id,
                resolution=resolution,
                dataset_size=len(expanded),
            )
            cells[(resolution, rate)] = report
            logger.info(
                "grid cell r%d x%d: mean accuracy %.4f", resolution, rate, report.mean_accuracy
            )
    grid = ExperimentGrid(
        resolutions=tuple(config.resolutions), rates=tuple(config.rates), cells=cells
    )
    store.save_report_text("grid_report.csv", grid.to_csv())
    if drop_log:
        store.save_report_json("transform_log.json", drop_log)
    return grid
