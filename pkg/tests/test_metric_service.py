"""Object-discovery metrics and the feature-distribution distance."""

import numpy as np
import pytest
import torch

from guided_slots.models.masks import SemanticMask
from guided_slots.services.metric_service import (
    EvalAccumulator,
    corloc,
    corloc_hit,
    detrate,
    frechet_distance,
    is_split,
    majority_classes,
    mbo,
    miou_semantic,
    predicted_partition,
)

from .helpers import labels, one_hot_masks

pytestmark = pytest.mark.unit


class TestMIoU:
    def test_prediction_equal_to_ground_truth(self):
        gt = labels([[0, 1, 1, 0, 0], [0, 1, 1, 0, 0], [2, 2, 0, 0, 0], [2, 2, 0, 3, 3], [0, 0, 0, 3, 3]])
        assert miou_semantic(gt, SemanticMask(gt)) == pytest.approx(1.0)

    def test_all_background_against_half_foreground(self):
        gt = SemanticMask(labels([[1, 1, 0, 0]] * 4))
        partition = torch.zeros(4, 4, dtype=torch.long)
        assert miou_semantic(partition, gt, slot_classes=[0]) == pytest.approx(0.25)

    def test_majority_vote_ties_to_lowest_class(self):
        partition = labels([[0, 0], [1, 1]])
        gt = SemanticMask(labels([[2, 2], [0, 2]]))
        assert majority_classes(partition, gt, 3) == [2, 0, 0]

    def test_invariant_to_slot_relabelling(self):
        generator = torch.Generator().manual_seed(0)
        for _ in range(20):
            partition = torch.randint(0, 4, (6, 6), generator=generator)
            gt = SemanticMask(torch.randint(0, 3, (6, 6), generator=generator))
            perm = torch.randperm(4, generator=generator)
            assert miou_semantic(perm[partition], gt, 4) == pytest.approx(miou_semantic(partition, gt, 4))


class TestBestOverlap:
    def test_one_third_example(self):
        partition = labels([[0, 1], [0, 1]])
        top_row = labels([[1, 1], [0, 0]]).bool()
        assert mbo(partition, [top_row], 2) == pytest.approx(1.0 / 3.0)

    def test_extra_slot_never_lowers_score(self):
        generator = torch.Generator().manual_seed(1)
        for _ in range(20):
            partition = torch.randint(0, 3, (5, 5), generator=generator)
            gts = [torch.rand(5, 5, generator=generator) > 0.5 for _ in range(2)]
            assert mbo(partition, gts, 4) >= mbo(partition, gts, 3)

    def test_invariant_to_slot_relabelling(self):
        partition = labels([[0, 0, 1], [2, 2, 1], [2, 2, 1]])
        gts = [labels([[1, 1, 0], [0, 0, 0], [0, 0, 0]]).bool(), labels([[0, 0, 0], [1, 1, 0], [1, 1, 0]]).bool()]
        perm = torch.tensor([2, 0, 1])
        assert mbo(perm[partition], gts, 3) == pytest.approx(mbo(partition, gts, 3))

    def test_needs_ground_truth(self):
        with pytest.raises(ValueError):
            mbo(torch.zeros(2, 2, dtype=torch.long), [])


class TestLocalisation:
    def test_corloc_fraction(self):
        assert corloc([True, False, True]) == pytest.approx(2.0 / 3.0)

    def test_corloc_hit_needs_strict_overlap(self):
        partition = labels([[0, 0], [1, 1]])
        half = labels([[1, 0], [0, 0]]).bool()
        assert not corloc_hit(partition, [half], 2)
        assert corloc_hit(partition, [labels([[1, 1], [0, 0]]).bool()], 2)

    def test_detection_rate(self):
        assert detrate([0.9, 0.1, 0.2, 0.3]) == pytest.approx(0.25)

    def test_detection_rate_falls_as_threshold_rises(self):
        ious = np.random.default_rng(0).random(50).tolist()
        rates = [detrate(ious, t) for t in np.linspace(0.0, 1.0, 11)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    @pytest.mark.parametrize("fn", [corloc, detrate])
    def test_empty_input(self, fn):
        with pytest.raises(ValueError):
            fn([])

    def test_split_objects(self):
        instance = labels([[1, 1], [1, 1]]).bool()
        assert is_split(labels([[0, 0], [1, 1]]), instance, 2)
        assert not is_split(labels([[0, 0], [0, 0]]), instance, 2)
        assert not is_split(labels([[0, 0], [0, 0]]), torch.zeros(2, 2, dtype=torch.bool), 2)


class TestEvalAccumulator:
    def _image(self, gt_rows):
        gt = labels(gt_rows)
        return one_hot_masks(gt, 3), SemanticMask(gt)

    def test_perfect_prediction_scores_one(self):
        accumulator = EvalAccumulator()
        accumulator.update(*self._image([[0, 1, 1], [0, 1, 1], [2, 2, 0]]))
        report = accumulator.report()
        assert report.miou == pytest.approx(1.0)
        assert report.mbo_c == pytest.approx(1.0)
        assert report.corloc == 1.0 and report.detrate == 1.0
        assert report.no_split_fraction == 1.0
        assert report.n_images == 1

    def test_merge_equals_single_pass(self):
        images = [self._image([[0, 1, 1], [0, 1, 1], [2, 2, 0]]), self._image([[2, 2, 2], [0, 0, 1], [0, 0, 1]])]
        # Slots that do not line up with the second image
        images[1] = (one_hot_masks(labels([[0, 0, 1], [0, 0, 1], [2, 2, 2]]), 3), images[1][1])
        single = EvalAccumulator()
        parts = [EvalAccumulator(), EvalAccumulator()]
        for part, (masks, gt) in zip(parts, images):
            single.update(masks, gt)
            part.update(masks, gt)
        assert parts[0].merge(parts[1]).report() == single.report()

    def test_empty_report_rejected(self):
        with pytest.raises(ValueError):
            EvalAccumulator().report()

    def test_partition_ties_go_to_lowest_slot(self):
        assert bool((predicted_partition(torch.full((3, 2, 2), 0.2)) == 0).all())


class TestFrechetDistance:
    def test_identical_sets(self):
        x = np.random.default_rng(0).normal(size=(500, 3))
        assert frechet_distance(x, x) == pytest.approx(0.0, abs=1e-5)

    def test_shifted_gaussians(self):
        rng = np.random.default_rng(1)
        a = rng.normal(0.0, 1.0, size=100_000)
        b = rng.normal(3.0, 1.0, size=100_000)
        assert frechet_distance(a, b) == pytest.approx(9.0, abs=0.2)

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(200, 4)), rng.normal(1.0, 2.0, size=(150, 4))
        assert frechet_distance(a, b) == frechet_distance(b, a)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            frechet_distance(np.zeros((5, 2)), np.zeros((5, 3)))

    def test_single_sample_rejected(self):
        with pytest.raises(ValueError):
            frechet_distance(np.zeros((1, 2)), np.zeros((5, 2)))
