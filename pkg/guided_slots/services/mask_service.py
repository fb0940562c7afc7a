"""
Pseudo ground-truth masks from diffusion attention.

Cross-attention per class is resized and averaged over timesteps and layers, refined by
powers of the averaged self-attention, then turned into a label map by a pixel-wise
argmax with two-threshold hysteresis.
"""

import math
from typing import Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from guided_slots.logger import get_logger
from guided_slots.models.diffusion import AttnStack
from guided_slots.models.masks import ClassAttentionMap, SegmentSet, SemanticMask
from guided_slots.models.scene import BACKGROUND
from guided_slots.utils.image_helpers import resize_bilinear
from guided_slots.utils.validators import check_row_stochastic

logger = get_logger(__name__)

# Neighbours (of 8) that must already be confidently the winning class
HYSTERESIS_NEIGHBOURS = 4
CONSTANT_MAP_TOLERANCE = 1e-12


def normalize_min_max(maps: torch.Tensor) -> torch.Tensor:
    """Min-max normalise each (H, W) map of an (H, W, C) tensor; constant maps become 0."""
    flat = maps.reshape(-1, maps.shape[-1])
    low = flat.min(dim=0).values
    high = flat.max(dim=0).values
    span = high - low
    safe = torch.where(span > CONSTANT_MAP_TOLERANCE, span, torch.ones_like(span))
    out = (maps - low) / safe
    return torch.where(span > CONSTANT_MAP_TOLERANCE, out, torch.zeros_like(out))


def _token_index(stack: AttnStack, class_id: int) -> int:
    ids = stack.meta.token_class_ids
    if ids:
        if class_id not in ids:
            raise ValueError(f"class {class_id} has no token in the attention stack")
        return ids.index(class_id)
    # Without a mapping the class id is the token position
    return class_id


def aggregate_cross_attention(
    stack: AttnStack, class_ids: Sequence[int], target: Tuple[int, int]
) -> ClassAttentionMap:
    """
    Average each class's cross-attention over all (timestep, layer) entries at ``target`` size.

    Args:
        stack: Unbatched stack with (h, w, U) cross entries
        class_ids: Classes to extract; output channels follow this order
        target: (H, W) of the output

    Returns:
        ClassAttentionMap with per-class min-max normalised values

    Raises:
        ValueError: If the stack is empty or a class token index is out of range
    """
    if len(stack.cross) == 0:
        raise ValueError("empty attention stack")
    if stack.is_batched:
        raise ValueError("aggregate_cross_attention expects an unbatched stack")
    class_ids = tuple(int(c) for c in class_ids)
    tokens = [_token_index(stack, c) for c in class_ids]

    total = None
    for entry in stack.cross:
        if max(tokens) >= entry.shape[-1]:
            raise ValueError(f"stack entry has U={entry.shape[-1]} tokens, class token {max(tokens)} requested")
        maps = entry[..., tokens].permute(2, 0, 1).to(torch.float64)
        maps = resize_bilinear(maps, target)
        total = maps if total is None else total + maps
    mean = (total / len(stack.cross)).permute(1, 2, 0)
    return ClassAttentionMap(values=normalize_min_max(mean.clamp_min(0.0)), class_ids=class_ids)


def aggregate_self_attention(stack: AttnStack, target: Tuple[int, int]) -> torch.Tensor:
    """
    Resize every self-attention entry to ``target`` on query and key axes, average, renormalise rows.

    Returns:
        (H*W, H*W) row-stochastic matrix

    Raises:
        ValueError: If the stack has no self-attention entries
    """
    if len(stack.self_) == 0:
        raise ValueError("attention stack has no self-attention entries")
    height, width = target
    total = None
    for i, entry in enumerate(stack.self_):
        h, w = _self_resolution(stack, i, entry)
        sa = entry.to(torch.float64)
        keys = resize_bilinear(sa.reshape(h * w, h, w), target).reshape(h * w, height * width)
        queries = resize_bilinear(keys.t().reshape(height * width, h, w), target)
        sa = queries.reshape(height * width, height * width).t()
        total = sa if total is None else total + sa
    mean = (total / len(stack.self_)).clamp_min(0.0)
    return mean / mean.sum(dim=-1, keepdim=True).clamp_min(CONSTANT_MAP_TOLERANCE)


def _self_resolution(stack: AttnStack, index: int, entry: torch.Tensor) -> Tuple[int, int]:
    n = entry.shape[-1]
    # Self entries follow the cross entries' layer order
    if len(stack.meta.resolutions) == len(stack.self_):
        h, w = stack.meta.resolutions[index]
        if h * w == n:
            return h, w
    side = int(round(math.sqrt(n)))
    if side * side != n:
        raise ValueError(f"cannot infer the grid of a {n}x{n} self-attention entry")
    return side, side


def refine_mask(a_ca: ClassAttentionMap, a_sa: torch.Tensor, tau: int) -> ClassAttentionMap:
    """
    Propagate class maps with the ``tau``-th power of the self-attention matrix.

    The power is applied as ``tau`` successive matrix-vector products.

    Raises:
        ValueError: If tau < 1, rows of ``a_sa`` do not sum to 1, or sizes disagree
    """
    if int(tau) != tau or tau < 1:
        raise ValueError(f"tau must be a positive integer, got {tau}")
    height, width = a_ca.size
    n = height * width
    if tuple(a_sa.shape) != (n, n):
        raise ValueError(f"self-attention must be {n}x{n} for a {height}x{width} map, got {tuple(a_sa.shape)}")
    check_row_stochastic(a_sa, atol=1e-5, what="self-attention")

    dtype = torch.promote_types(a_ca.values.dtype, a_sa.dtype)
    m = a_ca.values.reshape(n, -1).to(dtype)
    a_sa = a_sa.to(dtype)
    for _ in range(int(tau)):
        m = a_sa @ m
    return ClassAttentionMap(values=m.reshape(height, width, -1).clamp_min(0.0), class_ids=a_ca.class_ids)


def to_semantic_mask(m_ref: ClassAttentionMap, thresholds: Tuple[float, float]) -> SemanticMask:
    """
    Pixel-wise argmax over classes with hysteresis thresholds.

    With s the winning score: s >= t_hi keeps the class, s < t_lo is background, and in
    between the class is kept only when at least 4 of the 8 neighbours are confidently
    that class after the first pass. Ties go to the lowest class id.
    """
    t_lo, t_hi = thresholds
    if not 0.0 <= t_lo < t_hi <= 1.0:
        raise ValueError(f"thresholds must satisfy 0 <= t_lo < t_hi <= 1, got ({t_lo}, {t_hi})")

    order = sorted(range(len(m_ref.class_ids)), key=lambda i: m_ref.class_ids[i])
    class_ids = torch.tensor([m_ref.class_ids[i] for i in order], dtype=torch.long)
    values = m_ref.values[..., order]

    winner = values.argmax(dim=-1)
    score = values.gather(-1, winner.unsqueeze(-1)).squeeze(-1)
    winner_class = class_ids[winner]
    confident = score >= t_hi
    uncertain = (score >= t_lo) & ~confident

    kernel = torch.ones(1, 1, 3, 3, dtype=torch.float32)
    kernel[0, 0, 1, 1] = 0.0
    confident_by_class = torch.stack(
        [(confident & (winner == k)).float() for k in range(len(order))]
    ).unsqueeze(1)
    neighbour_counts = F.conv2d(confident_by_class, kernel, padding=1).squeeze(1)
    own_counts = neighbour_counts.gather(0, winner.unsqueeze(0)).squeeze(0)
    adopted = uncertain & (own_counts >= HYSTERESIS_NEIGHBOURS)

    labels = torch.where(confident | adopted, winner_class, torch.full_like(winner_class, BACKGROUND))
    return SemanticMask(labels=labels)


def split_segments(mask: SemanticMask) -> SegmentSet:
    """One segment per class present plus a background segment (first), which may be empty."""
    labels = mask.labels
    class_ids = mask.class_ids
    segments = [labels == BACKGROUND] + [labels == c for c in class_ids]
    return SegmentSet(segments=torch.stack(segments), labels=(BACKGROUND,) + tuple(class_ids))


def generate_pseudo_mask(
    stack: AttnStack,
    class_ids: Sequence[int],
    grid: Tuple[int, int],
    image_size: Tuple[int, int],
    tau: int,
    thresholds: Tuple[float, float],
) -> SemanticMask:
    """
    Full chain: aggregate cross-attention at ``grid``, refine with self-attention when the
    stack has any, upsample to ``image_size``, renormalise and threshold.
    """
    cam = aggregate_cross_attention(stack, class_ids, grid)
    if len(stack.self_) > 0:
        cam = refine_mask(cam, aggregate_self_attention(stack, grid), tau)
    values = resize_bilinear(cam.values.permute(2, 0, 1), image_size).permute(1, 2, 0).clamp_min(0.0)
    cam = ClassAttentionMap(values=normalize_min_max(values), class_ids=cam.class_ids)
    return to_semantic_mask(cam, thresholds)


def default_grid(stack: AttnStack) -> Tuple[int, int]:
    """Finest cross-attention resolution in the stack."""
    if not stack.cross:
        raise ValueError("empty attention stack")
    sizes = [(c.shape[-3], c.shape[-2]) for c in stack.cross]
    return max(sizes, key=lambda s: s[0] * s[1])


class MaskService:
    """Pseudo-mask generation with the run's mask settings."""

    def __init__(
        self, tau: int = 4, thresholds: Tuple[float, float] = (0.3, 0.6), grid: Optional[Tuple[int, int]] = None
    ):
        self.tau = tau
        self.thresholds = thresholds
        self.grid = grid
        self.logger = get_logger(__name__)

    def pseudo_mask(self, stack: AttnStack, class_ids: Sequence[int], image_size: Tuple[int, int]) -> SemanticMask:
        grid = self.grid or default_grid(stack)
        mask = generate_pseudo_mask(stack, class_ids, grid, image_size, self.tau, self.thresholds)
        missing = set(class_ids) - set(mask.class_ids)
        if missing:
            self.logger.debug(f"Pseudo mask has no pixels for classes {sorted(missing)}")
        return mask


__all__ = [
    "normalize_min_max",
    "aggregate_cross_attention",
    "aggregate_self_attention",
    "refine_mask",
    "to_semantic_mask",
    "split_segments",
    "generate_pseudo_mask",
    "default_grid",
    "MaskService",
]
