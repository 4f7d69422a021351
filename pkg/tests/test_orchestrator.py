import numpy as np
import pytest

from defectloop.annotations import DefectClass, MaskAnnotation
from defectloop.backend import ModelRegistry, ReferenceClassicalBackend
from defectloop.backend.base import BackendKind, ModelHandle, Prediction
from defectloop.errors import MaxBatchesExceededError
from defectloop.metrics import build_report
from defectloop.orchestrator import (
    GridConfig,
    OracleLabelProvider,
    PipelineConfig,
    PipelinePhase,
    PipelineRunner,
    PipelineState,
    run_experiment_grid,
)
from defectloop.preprocess import Split
from defectloop.storage import DataStore
from defectloop.synthetic import SyntheticCorpusConfig, generate_corpus

POLY = (DefectClass.POLYCRYSTALLINE,)


class DummyBackend:
    """Training is a version bump; predictions are blank."""

    def __init__(self):
        self.version = 0

    def train(self, samples, hyperparams=None, model_id=None, training_manifest_id=None):
        list(samples)  # force the expert-approval check to run
        self.version += 1
        return ModelHandle(model_id or "dummy", BackendKind.REFERENCE_CLASSICAL, self.version)

    def predict(self, handle, image_id, image):
        return Prediction(image_id=image_id)


class ScriptedEvaluator:
    """Pops scripted values; repeats the final one when exhausted."""

    def __init__(self, accuracies, per_image_maps=None):
        self.accuracies = list(accuracies)
        self.per_image_maps = list(per_image_maps or [])

    def _next(self, series):
        return series.pop(0) if len(series) > 1 else series[0]

    def report(self, handle):
        value = self._next(self.accuracies)
        return build_report("scripted", 64, 0, {DefectClass.POLYCRYSTALLINE: value})

    def per_image(self, handle, image_ids):
        if not self.per_image_maps:
            return {i: 1.0 for i in image_ids}
        return dict(self._next(self.per_image_maps))


@pytest.fixture
def mini_corpus(tmp_path):
    store = DataStore(tmp_path / "data")
    manifest = generate_corpus(
        store,
        SyntheticCorpusConfig(n_images=14, resolutions=(64,), classes=POLY, seed=5),
    )
    return store, manifest


def make_runner(store, manifest, evaluator, backend=None, **config_kwargs):
    defaults = dict(classes=POLY, resolution=64, batch_size=2, max_batches=50)
    defaults.update(config_kwargs)
    config = PipelineConfig(**defaults)
    return PipelineRunner(
        store,
        backend or DummyBackend(),
        config,
        OracleLabelProvider(store, 64),
        evaluator=evaluator,
        manifest=manifest,
    )


class TestBaselinePhase:
    def test_scripted_rising_accuracy(self, mini_corpus):
        store, manifest = mini_corpus
        runner = make_runner(store, manifest, ScriptedEvaluator([0.5, 0.7, 0.85]))
        handle, log = runner.run_baseline_phase(manifest.image_ids(Split.TRAIN))
        assert len(log) == 3
        assert [round(o.accuracy, 2) for o in log] == [0.5, 0.7, 0.85]
        assert runner.state.phase is PipelinePhase.MAL_ASSISTED

    def test_pretrained_handle_skips_loop(self, mini_corpus):
        store, manifest = mini_corpus
        runner = make_runner(store, manifest, ScriptedEvaluator([0.85]))
        runner.handle = ModelHandle("pre", BackendKind.REFERENCE_CLASSICAL, 1)
        handle, log = runner.run_baseline_phase(manifest.image_ids(Split.TRAIN))
        assert log == []
        assert runner.state.batches_processed == 0

    def test_stuck_accuracy_hits_cap(self, mini_corpus):
        store, manifest = mini_corpus
        runner = make_runner(store, manifest, ScriptedEvaluator([0.4]), max_batches=5)
        with pytest.raises(MaxBatchesExceededError):
            runner.run_baseline_phase(manifest.image_ids(Split.TRAIN))
        assert runner.state.batches_processed == 5
        assert runner.state.incomplete
        # persisted snapshot agrees
        persisted = PipelineState.from_json_dict(
            __import__("json").loads(store.pipeline_state_path.read_text())
        )
        assert persisted.incomplete

    def test_training_inputs_must_be_expert_approved(self, mini_corpus):
        store, manifest = mini_corpus
        runner = make_runner(store, manifest, ScriptedEvaluator([0.9]))
        image_id = manifest.image_ids(Split.TRAIN)[0]
        truth = store.load_truth(image_id, 64)
        from defectloop.annotations import ReviewState

        store.save_annotation(
            truth.with_review_state(ReviewState.DRAFT), 64, "consensus"
        )
        runner.labeled_ids = [image_id]
        with pytest.raises(ValueError, match="expert-approved"):
            runner._train()


class TestSalLoop:
    def _seed_labeled(self, runner, store, manifest):
        ids = manifest.image_ids(Split.TRAIN)
        for image_id in ids:
            store.save_annotation(store.load_truth(image_id, 64), 64, "consensus")
        runner.labeled_ids = list(ids)
        runner.handle = ModelHandle("m", BackendKind.REFERENCE_CLASSICAL, 1)
        return ids

    def test_nothing_low_means_zero_iterations(self, mini_corpus):
        store, manifest = mini_corpus
        runner = make_runner(store, manifest, ScriptedEvaluator([0.9]))
        self._seed_labeled(runner, store, manifest)
        _, reports = runner.run_sal_loop()
        assert reports == []
        assert runner.state.sal_iterations_done == 0

    def test_improving_accuracy_shrinks_reports(self, mini_corpus):
        store, manifest = mini_corpus
        ids = manifest.image_ids(Split.TRAIN)
        a, b = ids[0], ids[1]
        high = {i: 0.9 for i in ids}
        per_image_script = [
            {**high, a: 0.2, b: 0.3},   # selection, iteration 1
            {**high, a: 0.4, b: 0.7},   # report, iteration 1 -> [a]
            {**high, a: 0.4, b: 0.7},   # selection, iteration 2
            {**high, a: 0.8, b: 0.9},   # report, iteration 2 -> []
            {**high, a: 0.8, b: 0.9},   # selection, iteration 3 -> stop
        ]
        runner = make_runner(
            store, manifest, ScriptedEvaluator([0.9], per_image_script)
        )
        self._seed_labeled(runner, store, manifest)
        _, reports = runner.run_sal_loop()
        assert len(reports) <= 5
        assert set(reports[-1].image_ids) <= set(reports[0].image_ids)
        assert reports[0].image_ids == (a,)
        assert reports[1].image_ids == ()

    def test_fixed_point_runs_all_iterations(self, mini_corpus):
        store, manifest = mini_corpus
        ids = manifest.image_ids(Split.TRAIN)
        stuck = {i: 0.9 for i in ids}
        stuck[ids[0]] = 0.1
        runner = make_runner(store, manifest, ScriptedEvaluator([0.9], [stuck]))
        self._seed_labeled(runner, store, manifest)
        _, reports = runner.run_sal_loop()
        assert len(reports) == 5
        assert all(r.image_ids == reports[0].image_ids for r in reports)
        assert runner.state.sal_iterations_done == 5

    def test_report_lists_only_below_threshold(self, mini_corpus):
        store, manifest = mini_corpus
        ids = manifest.image_ids(Split.TRAIN)
        scores = {i: 0.9 for i in ids}
        scores[ids[0]] = 0.3
        runner = make_runner(store, manifest, ScriptedEvaluator([0.9], [scores]))
        self._seed_labeled(runner, store, manifest)
        _, reports = runner.run_sal_loop(sal_threshold=0.5)
        for report in reports:
            assert all(report.per_image_accuracy[i] < 0.5 for i in report.image_ids)


class TestFinalPhase:
    def test_two_batches_to_threshold(self, mini_corpus):
        store, manifest = mini_corpus
        runner = make_runner(store, manifest, ScriptedEvaluator([0.9, 0.96]), batch_size=6)
        runner.handle = ModelHandle("m", BackendKind.REFERENCE_CLASSICAL, 1)
        runner.state.current_accuracy = 0.85
        pool = manifest.image_ids(Split.TRAIN)[:12]
        runner.run_final_phase(pool)
        assert runner.state.phase is PipelinePhase.DONE
        assert runner.state.batches_processed == 2

    def test_plateau_hits_cap_incomplete(self, mini_corpus):
        store, manifest = mini_corpus
        runner = make_runner(
            store, manifest, ScriptedEvaluator([0.94]),
            max_batches=4, final_threshold=0.95, batch_size=6,
        )
        runner.handle = ModelHandle("m", BackendKind.REFERENCE_CLASSICAL, 1)
        runner.state.current_accuracy = 0.9
        pool = manifest.image_ids(Split.TRAIN)[:6]
        with pytest.raises(MaxBatchesExceededError):
            runner.run_final_phase(pool)
        assert runner.state.batches_processed == 4
        assert runner.state.incomplete

    def test_empty_pool_and_met_threshold_completes_immediately(self, mini_corpus):
        store, manifest = mini_corpus
        runner = make_runner(store, manifest, ScriptedEvaluator([0.96]))
        runner.handle = ModelHandle("m", BackendKind.REFERENCE_CLASSICAL, 1)
        runner.state.current_accuracy = 0.96
        runner.run_final_phase([])
        assert runner.state.phase is PipelinePhase.DONE
        assert runner.state.batches_processed == 0


class TestPhaseMachine:
    def test_never_regresses(self):
        state = PipelineState()
        state.advance_phase(PipelinePhase.MAL_ASSISTED)
        state.advance_phase(PipelinePhase.FINAL)
        state.advance_phase(PipelinePhase.DONE)
        with pytest.raises(ValueError):
            state.advance_phase(PipelinePhase.BASELINE_TRAINING)

    def test_same_phase_is_fine(self):
        state = PipelineState()
        state.advance_phase(PipelinePhase.BASELINE_TRAINING)

    def test_json_round_trip(self):
        state = PipelineState(
            phase=PipelinePhase.FINAL, current_accuracy=0.9, batches_processed=7
        )
        assert PipelineState.from_json_dict(state.to_json_dict()) == state


class TestExperimentGrid:
    def test_single_cell_grid(self, tmp_path):
        store = DataStore(tmp_path / "data")
        manifest = generate_corpus(
            store,
            SyntheticCorpusConfig(n_images=10, resolutions=(256,), classes=POLY, seed=5),
        )
        registry = ModelRegistry(store.models_root)
        grid = run_experiment_grid(
            store,
            lambda: ReferenceClassicalBackend(registry, classes=POLY),
            manifest,
            GridConfig(resolutions=(256,), rates=(1,), classes=POLY),
        )
        csv = grid.to_csv()
        lines = csv.strip().splitlines()
        assert len(lines) == 2
        train_count = len(manifest.image_ids(Split.TRAIN))
        assert lines[1].startswith(f"{train_count},256,")

    def test_csv_determinism(self, tmp_path):
        store = DataStore(tmp_path / "data")
        manifest = generate_corpus(
            store,
            SyntheticCorpusConfig(n_images=10, resolutions=(256,), classes=POLY, seed=5),
        )
        registry = ModelRegistry(store.models_root)

        def run():
            return run_experiment_grid(
                store,
                lambda: ReferenceClassicalBackend(registry, classes=POLY),
                manifest,
                GridConfig(resolutions=(256,), rates=(1, 2), classes=POLY, seed=3),
            ).to_csv()

        assert run() == run()

    def test_cell_count_enforced(self, tmp_path):
        from defectloop.orchestrator import ExperimentGrid

        with pytest.raises(ValueError):
            ExperimentGrid(resolutions=(256, 512), rates=(2, 5, 10), cells={})


class TestMalCostTrend:
    def test_costs_decrease_with_improving_backend(self, tmp_path):
        store = DataStore(tmp_path / "data")
        manifest = generate_corpus(
            store,
            SyntheticCorpusConfig(n_images=20, resolutions=(64,), classes=POLY, seed=9),
        )

        class ImprovingBackend(DummyBackend):
            """Predictions converge on the truth as the version grows."""

            def __init__(self, store):
                super().__init__()
                self.store = store

            def predict(self, handle, image_id, image):
                truth = self.store.load_truth(image_id, 64)
                grid = truth.mask_for(DefectClass.POLYCRYSTALLINE).to_array()
                flat = grid.ravel().copy()
                wrong = max(0, 40 // handle.version**2)
                flat[:wrong] = ~flat[:wrong]
                return Prediction(
                    image_id=image_id,
                    probability_maps={
                        DefectClass.POLYCRYSTALLINE: flat.reshape(grid.shape).astype(float)
                    },
                )

        backend = ImprovingBackend(store)
        runner = make_runner(
            store, manifest, ScriptedEvaluator([0.9]), backend=backend, batch_size=4
        )
        runner.handle = backend.train([])
        pool = manifest.image_ids(Split.TRAIN)
        costs = []
        for start in range(0, 12, 4):
            cost = runner.label_batch(pool[start : start + 4], preannotate=True)
            costs.append(cost)
            runner.handle = backend.train([])
        assert costs[0] > costs[1] > costs[2]
