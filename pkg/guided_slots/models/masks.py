"""Class attention maps, semantic masks, segments and slot-to-segment assignments."""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import torch

from guided_slots.models.scene import BACKGROUND


@dataclass
class ClassAttentionMap:
    """``values`` is (H, W, C), nonnegative; channel c belongs to ``class_ids[c]``."""

    values: torch.Tensor
    class_ids: Tuple[int, ...]

    def __post_init__(self):
        self.class_ids = tuple(int(c) for c in self.class_ids)
        if self.values.dim() != 3 or self.values.shape[-1] != len(self.class_ids):
            raise ValueError(
                f"ClassAttentionMap expects (H, W, {len(self.class_ids)}), got {tuple(self.values.shape)}"
            )
        if not torch.isfinite(self.values).all():
            raise ValueError("ClassAttentionMap values must be finite")
        if (self.values < 0).any():
            raise ValueError("ClassAttentionMap values must be nonnegative")

    @property
    def size(self) -> Tuple[int, int]:
        return self.values.shape[0], self.values.shape[1]


@dataclass
class SemanticMask:
    """``labels`` is an (H, W) integer map, 0 = background."""

    labels: torch.Tensor

    def __post_init__(self):
        if self.labels.dim() != 2:
            raise ValueError(f"SemanticMask expects (H, W), got {tuple(self.labels.shape)}")
        self.labels = self.labels.long()

    @property
    def class_ids(self) -> Tuple[int, ...]:
        present = torch.unique(self.labels).tolist()
        return tuple(int(c) for c in present if c != BACKGROUND)


@dataclass
class SegmentSet:
    """
    Disjoint binary segments covering the grid.

    ``segments`` is (F, H, W) bool; ``labels[f]`` is a class id or ``BACKGROUND``.
    """

    segments: torch.Tensor
    labels: Tuple[int, ...]

    def __post_init__(self):
        self.segments = self.segments.bool()
        self.labels = tuple(int(c) for c in self.labels)
        if self.segments.dim() != 3 or self.segments.shape[0] != len(self.labels):
            raise ValueError("SegmentSet needs one label per (H, W) segment")

    def __len__(self) -> int:
        return len(self.labels)

    def is_partition(self) -> bool:
        return bool((self.segments.sum(0) == 1).all())


@dataclass
class MatchAssignment:
    """Partial injective slot -> segment map minimising the summed cost."""

    pairs: List[Tuple[int, int]]
    costs: np.ndarray
    total_cost: float

    @property
    def matched_slots(self) -> List[int]:
        return [i for i, _ in self.pairs]

    @property
    def matched_segments(self) -> List[int]:
        return [j for _, j in self.pairs]

    def unmatched_slots(self) -> List[int]:
        matched = set(self.matched_slots)
        return [i for i in range(self.costs.shape[0]) if i not in matched]


__all__ = ["ClassAttentionMap", "SemanticMask", "SegmentSet", "MatchAssignment"]
