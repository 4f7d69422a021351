"""Release acceptance suite.

One test per criterion; the conftest hook prints an ACCEPTANCE PASS/FAIL
line for each.  Wall-clock budgets are asserted where a criterion carries
one.
"""

import itertools
import time

import numpy as np
import pytest

from defectloop.annotations import (
    AnnotationSet,
    BoxAnnotation,
    DefectClass,
    MaskAnnotation,
    human_source,
    mask_to_bbox,
)
from defectloop.augment import (
    AugmentationPlan,
    TransformKind,
    TransformSpec,
    apply_transform,
    expand_dataset,
    flip_h,
    flip_v,
    rotate90,
    translate,
)
from defectloop.backend import ModelRegistry, ReferenceClassicalBackend
from defectloop.backend.base import BackendKind, ModelHandle, Prediction
from defectloop.consensus import merge_consensus, merge_mask_consensus
from defectloop.metrics import (
    Detection,
    average_precision,
    box_iou,
    build_report,
    class_iou,
    pixel_accuracy,
)
from defectloop.orchestrator import (
    GridConfig,
    OracleLabelProvider,
    PipelineConfig,
    PipelineRunner,
    run_experiment_grid,
)
from defectloop.preprocess import (
    DatasetManifest,
    Lineage,
    LineageKind,
    ManifestEntry,
    Split,
    split_dataset,
)
from defectloop.storage import DataStore
from defectloop.synthetic import SyntheticCorpusConfig, generate_corpus

from conftest import human_set, random_mask
from test_metrics import (
    oracle_average_precision,
    oracle_box_iou,
    oracle_mask_overlap,
    random_detection_instance,
)

CORPUS_CLASSES = (DefectClass.POLYCRYSTALLINE, DefectClass.CENTER)


@pytest.fixture(scope="module")
def acceptance_corpus(tmp_path_factory):
    """Shared 60-image synthetic corpus with exact ground truth."""
    store = DataStore(tmp_path_factory.mktemp("acceptance") / "data")
    manifest = generate_corpus(
        store,
        SyntheticCorpusConfig(
            n_images=60, resolutions=(256, 512), classes=CORPUS_CLASSES, seed=7
        ),
    )
    return store, manifest


def test_metrics_match_bruteforce_oracles(rng):
    started = time.perf_counter()
    for _ in range(500):
        h, w = int(rng.integers(1, 17)), int(rng.integers(1, 17))
        pred = random_mask(rng, h, w, p=float(rng.random()))
        gt = random_mask(rng, h, w, p=float(rng.random()))
        inter, union, agree = oracle_mask_overlap(pred, gt)
        assert pixel_accuracy(pred, gt) == pytest.approx(agree / (h * w), abs=1e-9)
        iou = class_iou(pred, gt)
        if union == 0:
            assert iou is None
        else:
            assert iou == pytest.approx(inter / union, abs=1e-9)

        def rand_box(score=None):
            bw, bh = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            return BoxAnnotation(
                DefectClass.CENTER,
                int(rng.integers(0, 16)), int(rng.integers(0, 16)), bw, bh,
                score=score,
            )

        a, b = rand_box(), rand_box()
        assert box_iou(a, b) == pytest.approx(oracle_box_iou(a, b), abs=1e-9)

        detections, ground_truth, n_gt = random_detection_instance(rng)
        if n_gt:
            threshold = float(rng.choice([0.25, 0.5, 0.75]))
            assert average_precision(detections, ground_truth, threshold) == pytest.approx(
                oracle_average_precision(detections, ground_truth, threshold), abs=1e-9
            )
    assert time.perf_counter() - started < 10.0


def test_reported_mean_accuracy_reproduced():
    report = build_report(
        "best-cell", 512, 3000,
        {
            DefectClass.CENTER: 0.9335,
            DefectClass.POLYCRYSTALLINE: 0.9283,
            DefectClass.EDGE: 0.9198,
        },
    )
    assert report.mean_accuracy == pytest.approx(0.9272, abs=1e-4)


def test_augmentation_invariants_hold(rng):
    started = time.perf_counter()

    def random_labeled(side=40):
        grid = random_mask(rng, side, side, p=0.3)
        bw, bh = int(rng.integers(2, 10)), int(rng.integers(2, 10))
        x = int(rng.integers(0, side - bw))
        y = int(rng.integers(0, side - bh))
        return (
            rng.random((side, side)),
            human_set("a", mask=grid, boxes=(BoxAnnotation(DefectClass.CENTER, x, y, bw, bh),)),
        )

    # involutions: flipping twice is the identity everywhere (250 pairs)
    for spec in (flip_h(), flip_v()):
        for _ in range(125):
            image, labels = random_labeled()
            once_img, once = apply_transform(image, labels, spec)
            twice_img, twice = apply_transform(once_img, once, spec)
            assert np.array_equal(twice_img, image)
            assert twice.masks == labels.masks and twice.boxes == labels.boxes

    # composition: two quarter turns equal a half turn exactly (150 pairs)
    for _ in range(150):
        image, labels = random_labeled()
        one_img, one = apply_transform(image, labels, rotate90(1))
        two_img, two = apply_transform(one_img, one, rotate90(1))
        direct_img, direct = apply_transform(image, labels, rotate90(2))
        assert np.array_equal(two_img, direct_img)
        assert two.masks == direct.masks and two.boxes == direct.boxes

    # photometric transforms never change a label byte (250 pairs)
    photometric = [
        TransformSpec(TransformKind.GAUSSIAN_NOISE, sigma=0.05, seed=1),
        TransformSpec(TransformKind.JPEG_COMPRESS, quality=80),
        TransformSpec(TransformKind.BLUR, radius=1.0),
        TransformSpec(TransformKind.SHARPEN),
        TransformSpec(TransformKind.EMBOSS),
    ]
    for spec in photometric:
        for _ in range(50):
            image, labels = random_labeled()
            _, out = apply_transform(image, labels, spec)
            assert out is labels

    # mask-box consistency within one pixel per edge (250 pairs)
    geometric = [
        lambda: rotate90(int(rng.integers(1, 4))),
        flip_h,
        flip_v,
        lambda: translate(int(rng.integers(-6, 7)), int(rng.integers(-6, 7))),
        lambda: TransformSpec(TransformKind.SCALE, factor=float(rng.uniform(0.9, 1.1))),
        lambda: TransformSpec(
            TransformKind.ROTATE_SMALL, angle_degrees=float(rng.uniform(-5, 5))
        ),
        lambda: TransformSpec(TransformKind.SHEAR, factor=float(rng.uniform(-0.1, 0.1))),
    ]
    for _ in range(250):
        side = 40
        bw, bh = int(rng.integers(3, 15)), int(rng.integers(3, 15))
        x = int(rng.integers(4, side - bw - 4))
        y = int(rng.integers(4, side - bh - 4))
        grid = np.zeros((side, side), bool)
        grid[y : y + bh, x : x + bw] = True
        labels = human_set(
            "a", mask=grid, boxes=(BoxAnnotation(DefectClass.CENTER, x, y, bw, bh),)
        )
        spec = geometric[int(rng.integers(len(geometric)))]()
        _, out = apply_transform(np.zeros((side, side)), labels, spec)
        from_mask = mask_to_bbox(out.masks[0])
        assert from_mask is not None and out.boxes
        from_box = out.boxes[0].xywh
        assert abs(from_mask[0] - from_box[0]) <= 1
        assert abs(from_mask[1] - from_box[1]) <= 1
        assert abs(from_mask[0] + from_mask[2] - (from_box[0] + from_box[2])) <= 1
        assert abs(from_mask[1] + from_mask[3] - (from_box[1] + from_box[3])) <= 1

    # exact transforms preserve the foreground count in frame (100 pairs)
    for _ in range(100):
        image, labels = random_labeled()
        count = labels.masks[0].foreground_pixels
        for spec in (rotate90(1), flip_h(), flip_v()):
            _, out = apply_transform(image, labels, spec)
            assert out.masks[0].foreground_pixels == count
        _, out = apply_transform(image, labels, translate(0, 0))
        assert out.masks[0].foreground_pixels == count

    assert time.perf_counter() - started < 30.0


def test_dataset_expansion_counts():
    originals = [
        ManifestEntry(f"i{k:03d}", 512, (0, 0, 512, 512)) for k in range(300)
    ]
    for rate, expected in ((2, 600), (5, 1500), (10, 3000)):
        expanded = expand_dataset(originals, AugmentationPlan(rate=rate, seed=1))
        assert len(expanded) == expected
        kept = [e for e in expanded if e.is_original]
        assert kept == originals

    # the manifest refuses augmentations derived from test images
    entries = (
        ManifestEntry("train-0", 512, (0, 0, 512, 512)),
        ManifestEntry("test-0", 512, (0, 0, 512, 512)),
        ManifestEntry(
            "test-0.aug", 512, (0, 0, 512, 512),
            lineage=Lineage(LineageKind.AUGMENTED, "test-0", ()),
        ),
    )
    with pytest.raises(ValueError):
        DatasetManifest(
            dataset_id="d",
            entries=entries,
            split={"train-0": Split.TRAIN, "test-0": Split.TEST},
            split_seed=0,
        )


def test_consensus_vote_semantics_exhaustive():
    started = time.perf_counter()
    for n in range(1, 6):
        patterns = list(itertools.product([False, True], repeat=n))
        for chunk_start in range(0, len(patterns), 16):
            chunk = patterns[chunk_start : chunk_start + 16]
            grids = [np.zeros((4, 4), bool) for _ in range(n)]
            for pixel, pattern in enumerate(chunk):
                r, c = divmod(pixel, 4)
                for labeler, vote in enumerate(pattern):
                    grids[labeler][r, c] = vote
            sets = [human_set(f"l{k}", mask=g) for k, g in enumerate(grids)]
            merged, agreement = merge_mask_consensus(sets, DefectClass.POLYCRYSTALLINE)
            out = merged.to_array()
            expected_agreement = 0.0
            for pixel in range(16):
                r, c = divmod(pixel, 4)
                votes = sum(chunk[pixel]) if pixel < len(chunk) else 0
                expected_fg = votes * 2 > n
                assert out[r, c] == expected_fg, (n, chunk[pixel] if pixel < len(chunk) else None)
                backing = votes if expected_fg else n - votes
                expected_agreement += backing / n
            assert agreement == pytest.approx(expected_agreement / 16, abs=1e-12)

            # permutation invariance
            reordered = merge_mask_consensus(sets[::-1], DefectClass.POLYCRYSTALLINE)
            assert reordered == (merged, agreement)

        # unanimity and idempotence for this n
        grid = np.zeros((4, 4), bool)
        grid[1:3, 1:3] = True
        sets = [human_set(f"l{k}", mask=grid) for k in range(n)]
        merged, agreement = merge_mask_consensus(sets, DefectClass.POLYCRYSTALLINE)
        assert np.array_equal(merged.to_array(), grid)
        assert agreement == 1.0
        result = merge_consensus(sets)
        again = merge_consensus([result.merged])
        assert again.merged.masks == result.merged.masks
        assert all(v == 1.0 for v in again.agreement.values())
    assert time.perf_counter() - started < 60.0


def test_end_to_end_pipeline_on_synthetic_corpus(acceptance_corpus):
    started = time.perf_counter()
    store, manifest = acceptance_corpus
    config = PipelineConfig(
        classes=CORPUS_CLASSES,
        resolution=256,
        batch_size=6,
        max_batches=10,
        seed=7,
        model_id="acceptance-model",
    )
    backend = ReferenceClassicalBackend(
        ModelRegistry(store.models_root), classes=CORPUS_CLASSES
    )
    runner = PipelineRunner(
        store, backend, config, OracleLabelProvider(store, 256), manifest=manifest
    )
    pool = manifest.image_ids(Split.TRAIN)
    handle, log = runner.run_baseline_phase(pool)
    assert len(log) <= 10
    assert runner.state.current_accuracy >= 0.80

    handle, reports = runner.run_sal_loop()
    assert runner.state.sal_iterations_done <= 5
    if reports:
        assert set(reports[-1].image_ids) <= set(reports[0].image_ids)

    assert time.perf_counter() - started < 300.0


def test_accuracy_trend_across_grid(acceptance_corpus):
    started = time.perf_counter()
    store, manifest = acceptance_corpus
    registry = ModelRegistry(store.models_root)
    grid = run_experiment_grid(
        store,
        lambda: ReferenceClassicalBackend(registry, classes=CORPUS_CLASSES),
        manifest,
        GridConfig(resolutions=(256, 512), rates=(2, 5, 10), seed=0, classes=CORPUS_CLASSES),
    )
    big_high_res = grid.cells[(512, 10)].mean_accuracy
    small_low_res = grid.cells[(256, 2)].mean_accuracy
    assert big_high_res >= small_low_res - 0.02
    csv = grid.to_csv()
    assert len(csv.strip().splitlines()) == 7  # header + 6 cells
    assert (store.reports_root / "grid_report.csv").read_text() == csv
    assert time.perf_counter() - started < 900.0


def test_mal_correction_cost_decreases(tmp_path):
    store = DataStore(tmp_path / "data")
    manifest = generate_corpus(
        store,
        SyntheticCorpusConfig(
            n_images=20, resolutions=(64,), classes=(DefectClass.POLYCRYSTALLINE,), seed=9
        ),
    )

    class ImprovingBackend:
        """Each retrain halves the error it injects into its predictions."""

        def __init__(self):
            self.version = 0

        def train(self, samples, hyperparams=None, model_id=None, training_manifest_id=None):
            list(samples)
            self.version += 1
            return ModelHandle("improving", BackendKind.REFERENCE_CLASSICAL, self.version)

        def predict(self, handle, image_id, image):
            truth = store.load_truth(image_id, 64)
            grid = truth.mask_for(DefectClass.POLYCRYSTALLINE).to_array()
            flat = grid.ravel().copy()
            wrong = max(0, 64 // 2 ** (handle.version - 1))
            flat[:wrong] = ~flat[:wrong]
            return Prediction(
                image_id=image_id,
                probability_maps={
                    DefectClass.POLYCRYSTALLINE: flat.reshape(grid.shape).astype(float)
                },
            )

    backend = ImprovingBackend()
    config = PipelineConfig(
        classes=(DefectClass.POLYCRYSTALLINE,), resolution=64, batch_size=4, seed=9
    )

    class FlatEvaluator:
        def report(self, handle):
            return build_report("e", 64, 0, {DefectClass.POLYCRYSTALLINE: 0.9})

        def per_image(self, handle, image_ids):
            return {i: 1.0 for i in image_ids}

    runner = PipelineRunner(
        store,
        backend,
        config,
        OracleLabelProvider(store, 64),
        evaluator=FlatEvaluator(),
        manifest=manifest,
    )
    runner.handle = backend.train([])
    pool = manifest.image_ids(Split.TRAIN)
    costs = []
    for start in (0, 4, 8):
        cost = runner.label_batch(pool[start : start + 4], preannotate=True)
        costs.append(cost)
        runner.handle = backend.train([])
    assert costs[0] > costs[1] > costs[2]


def test_split_determinism():
    ids = [f"img-{k:04d}" for k in range(300)]
    first = split_dataset(ids, 0.9, split_seed=123)
    second = split_dataset(ids, 0.9, split_seed=123)
    assert first == second
    train, test = first
    assert len(train) == 270
    assert len(test) == 30
    assert set(train) | set(test) == set(ids)
    assert not set(train) & set(test)
