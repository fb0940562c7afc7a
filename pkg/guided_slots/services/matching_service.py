"""
Slot-to-segment matching.

Slot masks are turned into hard regions by a per-pixel argmax over slots, scored
against segments by negative IoU, and paired by a minimum-cost assignment. Among
optimal assignments the lexicographically smallest pair list is returned, so
equal-cost inputs always give the same pairs.
"""

from typing import List, Optional, Tuple

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from guided_slots.logger import get_logger
from guided_slots.models.masks import MatchAssignment, SegmentSet
from guided_slots.utils.validators import check_same_shape

logger = get_logger(__name__)

# Relative slack when comparing sums of float costs
COST_TOLERANCE = 1e-9


def mask_iou(a: torch.Tensor, b: torch.Tensor, threshold: float = 0.5) -> float:
    """
    Intersection over union of two (H, W) masks.

    Float masks are binarised with ``>= threshold``; boolean masks are used as is.
    Two empty masks have IoU 1.

    Example:
        >>> mask_iou(torch.ones(2, 2, dtype=torch.bool), torch.ones(2, 2, dtype=torch.bool))
        1.0

    Raises:
        ValueError: If the shapes differ
    """
    check_same_shape(a, b, what="masks")
    a = a if a.dtype == torch.bool else a >= threshold
    b = b if b.dtype == torch.bool else b >= threshold
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def argmax_regions(slot_masks: torch.Tensor) -> torch.Tensor:
    """(O, H, W) soft masks to (O, H, W) disjoint boolean regions; ties go to the lowest slot."""
    winner = slot_masks.argmax(dim=0)
    slots = torch.arange(slot_masks.shape[0], device=slot_masks.device)
    return winner.unsqueeze(0) == slots[:, None, None]


def region_iou_matrix(regions: torch.Tensor, segments: torch.Tensor) -> np.ndarray:
    """Pairwise IoU between (O, H, W) and (F, H, W) boolean masks; empty vs empty counts as 1."""
    if regions.shape[1:] != segments.shape[1:]:
        raise ValueError(
            f"slot masks are {tuple(regions.shape[1:])} but segments are {tuple(segments.shape[1:])}"
        )
    a = regions.reshape(regions.shape[0], -1).to(torch.float64)
    b = segments.reshape(segments.shape[0], -1).to(torch.float64).to(a.device)
    intersection = a @ b.t()
    union = a.sum(1, keepdim=True) + b.sum(1)[None, :] - intersection
    iou = torch.where(union > 0, intersection / union.clamp_min(1.0), torch.ones_like(union))
    return iou.cpu().numpy()


def cost_matrix(slot_masks: torch.Tensor, segments: SegmentSet) -> np.ndarray:
    """
    Negative IoU between every slot's argmax region and every segment.

    Args:
        slot_masks: (O, H, W) slot attention masks at segment resolution
        segments: F segments of the same (H, W)

    Returns:
        (O, F) float64 costs in [-1, 0]
    """
    if slot_masks.dim() != 3:
        raise ValueError(f"slot masks must be (O, H, W), got {tuple(slot_masks.shape)}")
    regions = argmax_regions(slot_masks.detach())
    return -region_iou_matrix(regions, segments.segments)


def _optimal_value(cost: np.ndarray) -> float:
    if cost.shape[0] == 0 or cost.shape[1] == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def hungarian(cost: np.ndarray) -> MatchAssignment:
    """
    Minimum-cost injective assignment of min(O, F) slots to segments.

    The optimum comes from ``scipy.optimize.linear_sum_assignment``. Pairs are then fixed
    one at a time in (slot, segment) order, keeping each candidate only if the remaining
    sub-problem can still reach the optimum, which yields the lexicographically smallest
    optimal pair list.

    Args:
        cost: (O, F) finite costs

    Returns:
        MatchAssignment with pairs sorted by slot index

    Raises:
        ValueError: If the matrix is not 2-D or has non-finite entries

    Example:
        >>> hungarian(np.array([[-0.9, -0.1], [-0.8, -0.7]])).pairs
        [(0, 0), (1, 1)]
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains NaN or infinite entries")

    num_slots, num_segments = cost.shape
    k = min(num_slots, num_segments)
    optimum = _optimal_value(cost)
    tolerance = COST_TOLERANCE * (1.0 + float(np.abs(cost).sum()))

    pairs: List[Tuple[int, int]] = []
    free_segments = list(range(num_segments))
    spent = 0.0
    next_slot = 0
    for position in range(k):
        chosen: Optional[Tuple[int, int]] = None
        needed = k - position - 1
        for i in range(next_slot, num_slots):
            if num_slots - i - 1 < needed:
                break
            for j in free_segments:
                rest_cols = [c for c in free_segments if c != j]
                rest = cost[np.ix_(list(range(i + 1, num_slots)), rest_cols)]
                if min(rest.shape) < needed:
                    continue
                value = spent + cost[i, j] + _optimal_value(rest)
                if value <= optimum + tolerance:
                    chosen = (i, j)
                    break
            if chosen is not None:
                break
        if chosen is None:
            # Only reachable through accumulated rounding; fall back to scipy's pairs
            logger.warning("Tie-break search found no completion; using the solver's assignment")
            rows, cols = linear_sum_assignment(cost)
            pairs = sorted(zip(rows.tolist(), cols.tolist()))
            break
        pairs.append(chosen)
        spent += float(cost[chosen])
        free_segments.remove(chosen[1])
        next_slot = chosen[0] + 1

    total = float(sum(cost[i, j] for i, j in pairs))
    return MatchAssignment(pairs=pairs, costs=cost, total_cost=total)


def match_slots(slot_masks: torch.Tensor, segments: SegmentSet) -> MatchAssignment:
    """``hungarian(cost_matrix(...))`` for one image."""
    return hungarian(cost_matrix(slot_masks, segments))


def brute_force_assignment(cost: np.ndarray) -> Tuple[List[Tuple[int, int]], float]:
    """
    Exhaustive lexicographically-first optimal assignment, for small matrices.

    Used as a reference for :func:`hungarian`; O(F! / (F - k)!) in the worst case.
    """
    from itertools import combinations, permutations

    cost = np.asarray(cost, dtype=np.float64)
    num_slots, num_segments = cost.shape
    k = min(num_slots, num_segments)
    best: Optional[Tuple[float, List[Tuple[int, int]]]] = None
    for slots in combinations(range(num_slots), k):
        for segs in permutations(range(num_segments), k):
            pairs = list(zip(slots, segs))
            value = float(sum(cost[i, j] for i, j in pairs))
            if best is None or value < best[0] - COST_TOLERANCE or (
                abs(value - best[0]) <= COST_TOLERANCE and pairs < best[1]
            ):
                best = (value, pairs)
    return (best[1], best[0]) if best is not None else ([], 0.0)


__all__ = [
    "mask_iou",
    "argmax_regions",
    "region_iou_matrix",
    "cost_matrix",
    "hungarian",
    "match_slots",
    "brute_force_assignment",
]
