import numpy as np
import pytest

from defectloop.annotations import BoxAnnotation, DefectClass
from defectloop.backend.base import Prediction
from defectloop.errors import MissingScoreError, ProbabilityOutOfRangeError
from defectloop.selection import (
    UncertaintyScore,
    binary_entropy,
    gray_histogram_features,
    score_uncertainty,
    select_batch,
)


def seg_prediction(image_id, probs):
    return Prediction(
        image_id=image_id,
        probability_maps={DefectClass.POLYCRYSTALLINE: np.asarray(probs, dtype=float)},
    )


class TestScoreUncertainty:
    def test_coin_flip_pixels_score_one(self):
        score = score_uncertainty(seg_prediction("i", np.full((4, 4), 0.5)))
        assert score.per_class_scores[DefectClass.POLYCRYSTALLINE] == pytest.approx(1.0)

    def test_confident_pixels_score_zero(self):
        score = score_uncertainty(seg_prediction("i", np.ones((4, 4))))
        assert score.per_class_scores[DefectClass.POLYCRYSTALLINE] == pytest.approx(0.0)

    def test_half_and_half(self):
        probs = np.concatenate([np.full(8, 0.5), np.ones(8)]).reshape(4, 4)
        score = score_uncertainty(seg_prediction("i", probs))
        assert score.per_class_scores[DefectClass.POLYCRYSTALLINE] == pytest.approx(0.5)

    def test_probability_out_of_range(self):
        with pytest.raises(ProbabilityOutOfRangeError):
            score_uncertainty(seg_prediction("i", np.full((2, 2), 1.2)))

    def test_symmetry_under_complement(self, rng):
        for _ in range(50):
            probs = rng.random((6, 6))
            a = score_uncertainty(seg_prediction("i", probs)).score
            b = score_uncertainty(seg_prediction("i", 1.0 - probs)).score
            assert a == pytest.approx(b, abs=1e-12)

    def test_detection_confidence_peaks_at_half(self):
        def with_scores(*scores):
            boxes = tuple(
                BoxAnnotation(DefectClass.CENTER, 4 * k, 0, 3, 3, score=s)
                for k, s in enumerate(scores)
            )
            return Prediction(image_id="i", boxes=boxes)

        hesitant = score_uncertainty(with_scores(0.5, 0.5))
        confident = score_uncertainty(with_scores(0.99, 0.98))
        assert hesitant.per_class_scores[DefectClass.CENTER] == pytest.approx(1.0)
        assert confident.per_class_scores[DefectClass.CENTER] < 0.1

    def test_silent_detection_class_scores_half(self):
        score = score_uncertainty(
            seg_prediction("i", np.ones((2, 2))),
            classes=(DefectClass.POLYCRYSTALLINE, DefectClass.CENTER),
        )
        assert score.per_class_scores[DefectClass.CENTER] == 0.5

    def test_overall_is_mean(self):
        score = UncertaintyScore(
            "i", {DefectClass.POLYCRYSTALLINE: 0.2, DefectClass.CENTER: 0.8}
        )
        assert score.score == pytest.approx(0.5)

    def test_entropy_endpoints(self):
        assert binary_entropy(np.array([0.0, 1.0])).tolist() == [0.0, 0.0]


class TestSelectBatch:
    def test_small_pool_returned_whole(self):
        pool = [f"i{k}" for k in range(50)]
        scores = {i: 0.5 for i in pool}
        assert sorted(select_batch(pool, scores, None, 100)) == sorted(pool)

    def test_top_k_by_score(self):
        scores = {"a": 0.9, "b": 0.5, "c": 0.1}
        assert set(select_batch(["a", "b", "c"], scores, None, 2)) == {"a", "b"}

    def test_tie_break_farthest_first(self):
        scores = {"a": 0.5, "b": 0.5, "c": 0.5}
        features = {
            "a": np.array([0.0]),
            "b": np.array([1.0]),
            "c": np.array([10.0]),
        }
        assert set(select_batch(["a", "b", "c"], scores, features, 2)) == {"a", "c"}

    def test_tie_break_by_id_without_features(self):
        scores = {"a": 0.5, "b": 0.5, "c": 0.5}
        assert set(select_batch(["c", "b", "a"], scores, None, 2)) == {"a", "b"}

    def test_missing_score(self):
        with pytest.raises(MissingScoreError):
            select_batch(["a", "b"], {"a": 0.1}, None, 1)

    def test_monotone_in_score(self, rng):
        for _ in range(100):
            n = int(rng.integers(3, 20))
            pool = [f"i{k}" for k in range(n)]
            scores = {i: float(rng.random()) for i in pool}
            k = int(rng.integers(1, n))
            chosen = select_batch(pool, scores, None, k)
            target = chosen[int(rng.integers(0, len(chosen)))]
            raised = dict(scores)
            raised[target] = min(1.0, raised[target] + float(rng.random()))
            assert target in select_batch(pool, raised, None, k)

    def test_output_shape_properties(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 30))
            pool = [f"i{k}" for k in range(n)]
            scores = {i: float(rng.random()) for i in pool}
            k = int(rng.integers(1, 40))
            chosen = select_batch(pool, scores, None, k)
            assert len(chosen) == min(k, n)
            assert len(set(chosen)) == len(chosen)
            assert set(chosen) <= set(pool)

    def test_accepts_uncertainty_objects(self):
        pool = ["a", "b"]
        scores = {
            "a": UncertaintyScore("a", {DefectClass.POLYCRYSTALLINE: 0.9}),
            "b": UncertaintyScore("b", {DefectClass.POLYCRYSTALLINE: 0.1}),
        }
        assert select_batch(pool, scores, None, 1) == ["a"]


def test_histogram_features_shape_and_norm(rng):
    image = rng.random((32, 32))
    features = gray_histogram_features(image, bins=64)
    assert features.shape == (64,)
    assert features.sum() == pytest.approx(1.0)
