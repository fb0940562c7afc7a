"""
Training objective: reconstruction MSE plus binary cross-entropy between matched
slot masks and pseudo ground-truth segments.
"""

from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from guided_slots.logger import get_logger
from guided_slots.models.masks import MatchAssignment, SegmentSet
from guided_slots.models.reports import LossBreakdown
from guided_slots.services.matching_service import match_slots
from guided_slots.utils.validators import check_same_shape

logger = get_logger(__name__)


def reconstruction_mse(target: torch.Tensor, reconstruction: torch.Tensor) -> torch.Tensor:
    """
    Mean squared error over every element.

    Raises:
        ValueError: If the shapes differ
    """
    check_same_shape(target, reconstruction, what="target and reconstruction")
    return F.mse_loss(reconstruction, target)


def guidance_bce(
    slot_masks: torch.Tensor, assignment: MatchAssignment, segments: SegmentSet, eps: float = 1e-7
) -> torch.Tensor:
    """
    BCE between matched slot masks and their segments.

    Each pair contributes its per-pixel mean; pairs are averaged. Mask values are clamped
    to [eps, 1 - eps]. Without pairs the result is an exact zero that still belongs to the
    graph of ``slot_masks``, so unmatched slots receive zero gradient.

    Args:
        slot_masks: (O, H, W) soft masks in [0, 1]
        assignment: Slot -> segment pairs
        segments: (F, H, W) targets
        eps: Clamp margin
    """
    if slot_masks.shape[1:] != segments.segments.shape[1:]:
        raise ValueError(
            f"slot masks {tuple(slot_masks.shape[1:])} and segments {tuple(segments.segments.shape[1:])} differ in size"
        )
    if not assignment.pairs:
        return slot_masks.sum() * 0.0

    slot_idx = torch.tensor(assignment.matched_slots, dtype=torch.long, device=slot_masks.device)
    seg_idx = torch.tensor(assignment.matched_segments, dtype=torch.long)
    predictions = slot_masks.index_select(0, slot_idx).clamp(eps, 1.0 - eps)
    targets = segments.segments[seg_idx].to(device=slot_masks.device, dtype=slot_masks.dtype)
    per_pair = F.binary_cross_entropy(predictions, targets, reduction="none").flatten(1).mean(dim=1)
    return per_pair.mean()


def total_loss(
    target: torch.Tensor,
    reconstruction: torch.Tensor,
    slot_masks: torch.Tensor,
    assignment: MatchAssignment,
    segments: SegmentSet,
    mse_weight: float = 1.0,
    bce_weight: float = 1.0,
    eps: float = 1e-7,
) -> LossBreakdown:
    """``mse_weight * MSE + bce_weight * BCE`` for one image."""
    mse = reconstruction_mse(target, reconstruction)
    bce = guidance_bce(slot_masks, assignment, segments, eps)
    return LossBreakdown(
        mse=mse, bce=bce, total=mse_weight * mse + bce_weight * bce, matched_slot_count=len(assignment.pairs)
    )


def batch_guidance(
    slot_masks: torch.Tensor, segment_sets: Sequence[SegmentSet], eps: float = 1e-7
) -> Tuple[torch.Tensor, List[MatchAssignment]]:
    """
    Match and score every image of a batch.

    Matching uses detached masks; the returned BCE is the mean of the per-image values.

    Args:
        slot_masks: (B, O, H, W)
        segment_sets: One SegmentSet per image

    Returns:
        (mean BCE, assignments)
    """
    if slot_masks.shape[0] != len(segment_sets):
        raise ValueError(f"{slot_masks.shape[0]} mask sets for {len(segment_sets)} segment sets")
    assignments = []
    terms = []
    for masks, segments in zip(slot_masks, segment_sets):
        assignment = match_slots(masks.detach(), segments)
        assignments.append(assignment)
        terms.append(guidance_bce(masks, assignment, segments, eps))
    return torch.stack(terms).mean(), assignments


def batch_total_loss(
    target: torch.Tensor,
    reconstruction_loss: torch.Tensor,
    slot_masks: torch.Tensor,
    segment_sets: Optional[Sequence[SegmentSet]],
    mse_weight: float = 1.0,
    bce_weight: float = 1.0,
    eps: float = 1e-7,
) -> LossBreakdown:
    """
    Batched objective from an already computed reconstruction loss.

    Guidance is skipped, and contributes an exact zero, when ``bce_weight`` is 0 or no
    segments are given.
    """
    if bce_weight > 0 and segment_sets is not None:
        bce, assignments = batch_guidance(slot_masks, segment_sets, eps)
        matched = sum(len(a.pairs) for a in assignments)
    else:
        bce = slot_masks.sum() * 0.0
        matched = 0
    total = mse_weight * reconstruction_loss + bce_weight * bce
    return LossBreakdown(mse=reconstruction_loss, bce=bce, total=total, matched_slot_count=matched)


__all__ = ["reconstruction_mse", "guidance_bce", "total_loss", "batch_guidance", "batch_total_loss"]
