"""Feature grids, slot sets and slot attention matrices.

Tensors may carry a leading batch axis; the trailing axes follow the documented layout.
"""

from dataclasses import dataclass
from typing import Tuple

import torch


@dataclass
class FeatureGrid:
    """Encoder output: ``features`` is (..., N, d_input) with N = Hf * Wf."""

    features: torch.Tensor
    spatial: Tuple[int, int]

    def __post_init__(self):
        self.spatial = (int(self.spatial[0]), int(self.spatial[1]))
        n = self.spatial[0] * self.spatial[1]
        if self.features.dim() < 2 or self.features.shape[-2] != n:
            raise ValueError(
                f"FeatureGrid expects (..., {n}, d) for spatial {self.spatial}, got {tuple(self.features.shape)}"
            )

    @property
    def num_features(self) -> int:
        return self.features.shape[-2]

    @property
    def dim(self) -> int:
        return self.features.shape[-1]

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.features).all())


@dataclass
class SlotSet:
    """``slots`` is (..., O, d_slots)."""

    slots: torch.Tensor

    def __post_init__(self):
        if self.slots.dim() < 2 or self.slots.shape[-2] < 1:
            raise ValueError(f"SlotSet expects (..., O, d) with O >= 1, got {tuple(self.slots.shape)}")

    @property
    def count(self) -> int:
        return self.slots.shape[-2]

    @property
    def dim(self) -> int:
        return self.slots.shape[-1]


@dataclass
class SlotInitParams:
    """Shared Gaussian slot initialisation: slot = mean + exp(log_std) * eps."""

    mean: torch.Tensor
    log_std: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_std.shape or self.mean.dim() != 1:
            raise ValueError("SlotInitParams mean and log_std must be vectors of equal length")
        if not (torch.isfinite(self.mean).all() and torch.isfinite(self.log_std).all()):
            raise ValueError("SlotInitParams must be finite")

    @property
    def std(self) -> torch.Tensor:
        return self.log_std.exp()


@dataclass
class AttentionMatrix:
    """``values`` is (..., N, O); every row is a distribution over slots."""

    values: torch.Tensor

    @property
    def num_slots(self) -> int:
        return self.values.shape[-1]

    def check_row_stochastic(self, atol: float = 1e-5) -> bool:
        v = self.values
        if (v < 0).any() or (v > 1 + atol).any():
            return False
        return bool(torch.allclose(v.sum(-1), torch.ones_like(v.sum(-1)), atol=atol, rtol=0.0))


__all__ = ["FeatureGrid", "SlotSet", "SlotInitParams", "AttentionMatrix"]
