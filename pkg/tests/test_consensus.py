import numpy as np
import pytest

from defectloop.annotations import (
    AnnotationSet,
    BoxAnnotation,
    DefectClass,
    MaskAnnotation,
    ReviewState,
    SourceKind,
    human_source,
    model_source,
)
from defectloop.consensus import (
    BatchStatus,
    ConsensusConfig,
    LabelingBatch,
    ReviewDecision,
    apply_review,
    attach_preannotations,
    correction_cost,
    create_batch,
    merge_box_consensus,
    merge_consensus,
    merge_mask_consensus,
)
from defectloop.errors import EmptyPoolError, IllegalTransitionError, MixedImagesError

from conftest import human_set, random_mask


def box(x, y, w, h, cls=DefectClass.CENTER, score=None):
    return BoxAnnotation(cls, x, y, w, h, score=score)


class TestCreateBatch:
    def test_paper_batching_with_remainder(self):
        pool = [f"i{k}" for k in range(250)]
        sizes = []
        while pool:
            batch, pool = create_batch(pool, 100)
            sizes.append(len(batch.image_ids))
        assert sizes == [100, 100, 50]

    def test_small_pool(self):
        batch, rest = create_batch(["only"], 100)
        assert batch.image_ids == ("only",)
        assert rest == []

    def test_empty_pool(self):
        with pytest.raises(EmptyPoolError):
            create_batch([], 100)

    def test_batch_status_flow(self):
        batch, _ = create_batch(["a"], 1)
        batch = batch.advance(BatchStatus.AWAITING_CONSENSUS)
        batch = batch.advance(BatchStatus.AWAITING_EXPERT)
        reopened = batch.advance(BatchStatus.OPEN)  # relabel path
        assert reopened.status is BatchStatus.OPEN
        done = batch.advance(BatchStatus.FINALIZED)
        with pytest.raises(IllegalTransitionError):
            done.advance(BatchStatus.OPEN)


class TestMaskConsensus:
    def test_unanimity(self, rng):
        grid = random_mask(rng, 4, 4)
        sets = [human_set(l, mask=grid) for l in ("a", "b", "c")]
        merged, agreement = merge_mask_consensus(sets, DefectClass.POLYCRYSTALLINE)
        assert np.array_equal(merged.to_array(), grid)
        assert agreement == 1.0

    def test_two_of_three_wins(self):
        grid = np.zeros((2, 2), bool)
        lit = grid.copy()
        lit[0, 0] = True
        sets = [
            human_set("a", mask=lit),
            human_set("b", mask=lit),
            human_set("c", mask=grid),
        ]
        merged, _ = merge_mask_consensus(sets, DefectClass.POLYCRYSTALLINE)
        assert merged.to_array()[0, 0]

    def test_one_of_three_loses(self):
        grid = np.zeros((2, 2), bool)
        lit = grid.copy()
        lit[0, 0] = True
        sets = [
            human_set("a", mask=lit),
            human_set("b", mask=grid),
            human_set("c", mask=grid),
        ]
        merged, _ = merge_mask_consensus(sets, DefectClass.POLYCRYSTALLINE)
        assert not merged.to_array().any()

    def test_tie_is_background_with_half_agreement(self):
        disputed = np.zeros((2, 2), bool)
        disputed[0, 0] = True
        sets = [human_set("a", mask=disputed), human_set("b", mask=np.zeros((2, 2), bool))]
        merged, agreement = merge_mask_consensus(sets, DefectClass.POLYCRYSTALLINE)
        assert not merged.to_array().any()
        assert agreement == pytest.approx((0.5 + 1 + 1 + 1) / 4)

    def test_permutation_invariance(self, rng):
        grids = [random_mask(rng, 4, 4) for _ in range(4)]
        sets = [human_set(f"l{k}", mask=g) for k, g in enumerate(grids)]
        forward = merge_mask_consensus(sets, DefectClass.POLYCRYSTALLINE)
        backward = merge_mask_consensus(sets[::-1], DefectClass.POLYCRYSTALLINE)
        assert forward == backward

    def test_idempotence(self, rng):
        sets = [human_set(l, mask=random_mask(rng, 4, 4)) for l in ("a", "b", "c")]
        result = merge_consensus(sets)
        again = merge_consensus([result.merged])
        assert again.merged.masks == result.merged.masks
        assert all(v == 1.0 for v in again.agreement.values())

    def test_mixed_images(self):
        sets = [human_set("a", image_id="x"), human_set("b", image_id="y")]
        with pytest.raises(MixedImagesError):
            merge_mask_consensus(sets, DefectClass.POLYCRYSTALLINE)


class TestBoxConsensus:
    def test_identical_boxes(self):
        b = box(4, 5, 10, 12)
        sets = [human_set(l, boxes=(b,)) for l in ("a", "b", "c")]
        merged = merge_box_consensus(sets, DefectClass.CENTER, 0.5, 0.5)
        assert [m.xywh for m in merged] == [(4, 5, 10, 12)]

    def test_disjoint_boxes_no_quorum(self):
        sets = [
            human_set("a", boxes=(box(0, 0, 5, 5),)),
            human_set("b", boxes=(box(20, 20, 5, 5),)),
            human_set("c", boxes=(box(40, 40, 5, 5),)),
        ]
        assert merge_box_consensus(sets, DefectClass.CENTER, 0.5, 0.5) == []

    def test_coordinate_median(self):
        sets = [
            human_set("a", boxes=(box(0, 0, 10, 10),)),
            human_set("b", boxes=(box(1, 0, 10, 10),)),
            human_set("c", boxes=(box(0, 1, 10, 10),)),
        ]
        merged = merge_box_consensus(sets, DefectClass.CENTER, 0.5, 0.5)
        assert [m.xywh for m in merged] == [(0, 0, 10, 10)]

    def test_never_more_boxes_than_any_labeler(self, rng):
        for _ in range(50):
            sets = []
            max_boxes = 0
            for l in ("a", "b", "c"):
                n = int(rng.integers(0, 5))
                max_boxes = max(max_boxes, n)
                boxes = tuple(
                    box(int(rng.integers(0, 40)), int(rng.integers(0, 40)),
                        int(rng.integers(2, 10)), int(rng.integers(2, 10)))
                    for _ in range(n)
                )
                sets.append(human_set(l, boxes=boxes))
            merged = merge_box_consensus(sets, DefectClass.CENTER, 0.3, 0.5)
            assert len(merged) <= max_boxes

    def test_unanimity_boxes(self, rng):
        for n in range(1, 6):
            boxes = tuple(
                box(int(rng.integers(0, 30)), int(rng.integers(0, 30)), 5, 5)
                for _ in range(3)
            )
            sets = [human_set(f"l{k}", boxes=boxes) for k in range(n)]
            merged = merge_box_consensus(sets, DefectClass.CENTER, 0.5, 1.0)
            assert sorted(m.xywh for m in merged) == sorted(b.xywh for b in boxes)


class TestReview:
    def test_crowd_approve(self):
        draft = human_set("a")
        reviewed = apply_review(draft, ReviewDecision.CROWD_APPROVE)
        assert reviewed.review_state is ReviewState.CROWD_REVIEWED

    def test_expert_approve(self):
        reviewed = human_set("a").with_review_state(ReviewState.CROWD_REVIEWED)
        approved = apply_review(reviewed, ReviewDecision.EXPERT_APPROVE)
        assert approved.review_state is ReviewState.EXPERT_APPROVED

    def test_expert_approve_from_draft_illegal(self):
        with pytest.raises(IllegalTransitionError):
            apply_review(human_set("a"), ReviewDecision.EXPERT_APPROVE)

    def test_exhaustive_table(self):
        legal = {
            (ReviewState.DRAFT, ReviewDecision.CROWD_APPROVE): ReviewState.CROWD_REVIEWED,
            (ReviewState.CROWD_REVIEWED, ReviewDecision.EXPERT_APPROVE): ReviewState.EXPERT_APPROVED,
            (ReviewState.CROWD_REVIEWED, ReviewDecision.RETURN_FOR_RELABEL): ReviewState.RETURNED_FOR_RELABEL,
        }
        for state in ReviewState:
            for decision in ReviewDecision:
                annotation = human_set("a").with_review_state(state)
                if (state, decision) in legal:
                    out = apply_review(annotation, decision)
                    assert out.review_state is legal[(state, decision)]
                else:
                    with pytest.raises(IllegalTransitionError):
                        apply_review(annotation, decision)


class TestPreannotations:
    def _batch(self):
        batch, _ = create_batch(["i1", "i2"], 10)
        return batch

    def test_empty_predictions(self):
        drafts = attach_preannotations(self._batch(), {})
        assert drafts == {"i1": None, "i2": None}

    def test_copy_is_byte_equal(self, rng):
        grid = random_mask(rng, 4, 4)
        prediction = AnnotationSet(
            image_id="i1",
            source=model_source("m1"),
            masks=(MaskAnnotation.from_array(DefectClass.POLYCRYSTALLINE, grid),),
        )
        drafts = attach_preannotations(self._batch(), {"i1": prediction})
        draft = drafts["i1"]
        assert draft.masks == prediction.masks
        assert draft.review_state is ReviewState.DRAFT
        assert draft.seeded_from == prediction.source

    def test_unknown_image_ignored(self, rng, caplog):
        prediction = AnnotationSet(image_id="other", source=model_source("m1"))
        with caplog.at_level("WARNING"):
            drafts = attach_preannotations(self._batch(), {"other": prediction})
        assert drafts == {"i1": None, "i2": None}
        assert any("ignored" in r.message for r in caplog.records)


class TestCorrectionCost:
    def test_identity_costs_nothing(self, rng):
        final = human_set("a", mask=random_mask(rng, 6, 6), boxes=(box(1, 1, 4, 4),))
        cost = correction_cost(final, final)
        assert cost.total_edits == 0

    def test_from_scratch_counts_mask_pixels(self, rng):
        grid = random_mask(rng, 6, 6)
        final = human_set("a", mask=grid)
        cost = correction_cost(None, final)
        assert cost.pixels_flipped == int(grid.sum())

    def test_moved_box(self):
        pre = human_set("a", boxes=(box(0, 0, 10, 10),))
        final = human_set("a", boxes=(box(2, 0, 10, 10),))
        cost = correction_cost(pre, final)
        assert (cost.boxes_moved, cost.boxes_added, cost.boxes_removed) == (1, 0, 0)

    def test_add_and_remove(self):
        pre = human_set("a", boxes=(box(0, 0, 5, 5),))
        final = human_set("a", boxes=(box(30, 30, 5, 5),))
        cost = correction_cost(pre, final)
        assert (cost.boxes_added, cost.boxes_removed, cost.boxes_moved) == (1, 1, 0)

    def test_pixel_symmetry(self, rng):
        a = human_set("a", mask=random_mask(rng, 8, 8))
        b = human_set("a", mask=random_mask(rng, 8, 8))
        assert correction_cost(a, b).pixels_flipped == correction_cost(b, a).pixels_flipped
