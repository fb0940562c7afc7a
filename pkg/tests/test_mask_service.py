"""Pseudo masks from captured attention."""

import pytest
import torch

from guided_slots.models.diffusion import AttnStack, AttnStackMeta
from guided_slots.models.masks import ClassAttentionMap, SemanticMask
from guided_slots.services.mask_service import (
    MaskService,
    aggregate_cross_attention,
    aggregate_self_attention,
    normalize_min_max,
    refine_mask,
    split_segments,
    to_semantic_mask,
)

from .helpers import labels, random_row_stochastic

pytestmark = pytest.mark.unit


def _cam(values: torch.Tensor, class_ids=None) -> ClassAttentionMap:
    return ClassAttentionMap(values=values, class_ids=class_ids or tuple(range(1, values.shape[-1] + 1)))


class TestRefineMask:
    def test_identity_self_attention_is_exact(self):
        generator = torch.Generator().manual_seed(0)
        cam = _cam(torch.rand(4, 5, 3, generator=generator, dtype=torch.float64))
        for tau in (1, 2, 4, 7):
            refined = refine_mask(cam, torch.eye(20, dtype=torch.float64), tau)
            assert torch.equal(refined.values, cam.values)

    def test_uniform_self_attention_averages(self):
        cam = _cam(torch.rand(3, 3, 2, dtype=torch.float64))
        refined = refine_mask(cam, torch.full((9, 9), 1.0 / 9, dtype=torch.float64), 3)
        means = cam.values.reshape(9, 2).mean(0)
        assert torch.allclose(refined.values, means.expand(3, 3, 2), atol=1e-12)

    def test_doubly_stochastic_conserves_mass(self):
        generator = torch.Generator().manual_seed(1)
        n = 16
        # Average of permutation matrices is doubly stochastic
        a_sa = sum(torch.eye(n, dtype=torch.float64)[torch.randperm(n, generator=generator)] for _ in range(5)) / 5
        cam = _cam(torch.rand(4, 4, 3, generator=generator, dtype=torch.float64))
        refined = refine_mask(cam, a_sa, 4)
        assert torch.allclose(refined.values.sum((0, 1)), cam.values.sum((0, 1)), atol=1e-5)

    def test_tau_two_matches_two_matrix_vector_products(self):
        generator = torch.Generator().manual_seed(2)
        for _ in range(10):
            a_sa = random_row_stochastic(12, generator)
            cam = _cam(torch.rand(3, 4, 2, generator=generator, dtype=torch.float64))
            refined = refine_mask(cam, a_sa, 2)
            for c in range(2):
                m = cam.values[..., c].reshape(12)
                once = [sum(float(a_sa[p, q]) * float(m[q]) for q in range(12)) for p in range(12)]
                twice = [sum(float(a_sa[p, q]) * once[q] for q in range(12)) for p in range(12)]
                expected = torch.tensor(twice, dtype=torch.float64)
                assert torch.allclose(refined.values[..., c].reshape(12), expected, atol=1e-9)

    @pytest.mark.parametrize("tau", [0, -1, 1.5])
    def test_invalid_tau(self, tau):
        with pytest.raises(ValueError):
            refine_mask(_cam(torch.ones(2, 2, 1)), torch.eye(4), tau)

    def test_self_attention_must_be_row_stochastic(self):
        with pytest.raises(ValueError):
            refine_mask(_cam(torch.ones(2, 2, 1)), torch.eye(4) * 2, 1)

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            refine_mask(_cam(torch.ones(2, 2, 1)), torch.eye(9), 1)


class TestToSemanticMask:
    def test_single_class_everywhere(self):
        mask = to_semantic_mask(_cam(torch.ones(3, 3, 1), (4,)), (0.3, 0.6))
        assert bool((mask.labels == 4).all())

    def test_all_below_lower_threshold(self):
        mask = to_semantic_mask(_cam(torch.full((3, 3, 2), 0.1)), (0.3, 0.6))
        assert bool((mask.labels == 0).all())

    def test_ties_go_to_lowest_class(self):
        mask = to_semantic_mask(_cam(torch.ones(2, 2, 2), (5, 2)), (0.3, 0.6))
        assert bool((mask.labels == 2).all())

    def test_hysteresis_on_plateau_and_ring(self):
        # 0.9 plateau in the top-left 2x2, 0.5 ring around it, zero elsewhere
        values = torch.tensor(
            [
                [0.9, 0.9, 0.5, 0.0],
                [0.9, 0.9, 0.5, 0.0],
                [0.5, 0.5, 0.5, 0.0],
                [0.0, 0.0, 0.0, 0.0],
            ]
        ).unsqueeze(-1)
        mask = to_semantic_mask(_cam(values), (0.4, 0.8))
        # (0,2),(1,2),(2,0),(2,1) see two plateau pixels; (2,2) sees one
        expected = labels([[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]])
        assert torch.equal(mask.labels, expected)

    def test_uncertain_pixel_with_four_confident_neighbours_adopts_class(self):
        values = torch.full((3, 3, 1), 0.9)
        values[1, 1, 0] = 0.5
        values[0, 0, 0] = values[0, 2, 0] = values[2, 0, 0] = values[2, 2, 0] = 0.0
        mask = to_semantic_mask(_cam(values), (0.4, 0.8))
        assert int(mask.labels[1, 1]) == 1

    @pytest.mark.parametrize("thresholds", [(0.6, 0.3), (-0.1, 0.5), (0.2, 1.2)])
    def test_invalid_thresholds(self, thresholds):
        with pytest.raises(ValueError):
            to_semantic_mask(_cam(torch.ones(2, 2, 1)), thresholds)


class TestSplitSegments:
    def test_one_segment_per_class_plus_background(self):
        mask = SemanticMask(labels([[0, 2, 2], [5, 5, 0], [2, 0, 5]]))
        segments = split_segments(mask)
        assert len(segments) == 3
        assert segments.labels == (0, 2, 5)
        assert segments.is_partition()

    def test_all_background(self):
        segments = split_segments(SemanticMask(torch.zeros(3, 3, dtype=torch.long)))
        assert segments.labels == (0,)
        assert segments.is_partition()

    def test_random_masks_are_partitioned(self):
        generator = torch.Generator().manual_seed(3)
        for _ in range(20):
            segments = split_segments(SemanticMask(torch.randint(0, 4, (6, 6), generator=generator)))
            assert segments.is_partition()

    def test_background_segment_may_be_empty(self):
        segments = split_segments(SemanticMask(torch.ones(2, 2, dtype=torch.long)))
        assert segments.labels == (0, 1)
        assert not bool(segments.segments[0].any())


class TestAggregation:
    def _stack(self) -> AttnStack:
        cross_a = torch.zeros(2, 2, 3)
        cross_a[0, 0, 1] = 1.0
        cross_b = torch.zeros(4, 4, 3)
        cross_b[..., 2] = 0.5
        return AttnStack(
            cross=[cross_a, cross_b],
            self_=[torch.eye(4), torch.eye(16)],
            meta=AttnStackMeta(timesteps=[1, 1], resolutions=[(2, 2), (4, 4)], token_class_ids=(-1, 3, 1)),
        )

    def test_cross_attention_channels_follow_requested_classes(self):
        cam = aggregate_cross_attention(self._stack(), [1, 3], (4, 4))
        assert cam.class_ids == (1, 3)
        assert cam.size == (4, 4)
        # Class 1 is constant, so it normalises to zero; class 3 peaks top-left
        assert float(cam.values[..., 0].abs().max()) == 0.0
        assert float(cam.values[0, 0, 1]) == pytest.approx(1.0)

    def test_unknown_class(self):
        with pytest.raises(ValueError):
            aggregate_cross_attention(self._stack(), [2], (4, 4))

    def test_empty_stack(self):
        with pytest.raises(ValueError):
            aggregate_cross_attention(AttnStack(), [1], (4, 4))

    def test_self_attention_rows_stay_distributions(self):
        a_sa = aggregate_self_attention(self._stack(), (4, 4))
        assert a_sa.shape == (16, 16)
        assert torch.allclose(a_sa.sum(-1), torch.ones(16, dtype=torch.float64), atol=1e-12)

    def test_normalize_constant_maps_to_zero(self):
        maps = torch.stack([torch.full((2, 2), 3.0), torch.tensor([[0.0, 1.0], [2.0, 4.0]])], dim=-1)
        out = normalize_min_max(maps)
        assert float(out[..., 0].abs().max()) == 0.0
        assert float(out[..., 1].min()) == 0.0 and float(out[..., 1].max()) == 1.0

    def test_service_produces_mask_at_image_size(self):
        mask = MaskService(tau=2, thresholds=(0.3, 0.6)).pseudo_mask(self._stack(), [1, 3], (8, 8))
        assert mask.labels.shape == (8, 8)
        assert set(mask.class_ids) <= {1, 3}
