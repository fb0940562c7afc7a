"""
Slot attention: competitive attention over slots, weighted-mean updates and GRU refinement.

The variant here normalises features once and slots before every query projection,
and has no residual MLP after the GRU.
"""

import math
from typing import Optional, Tuple

import torch
import torch.nn as nn

from guided_slots.models.slots import AttentionMatrix, FeatureGrid, SlotInitParams, SlotSet
from guided_slots.utils.image_helpers import resize_bilinear

DEFAULT_EPS = 1e-8


class ProjectionParams(nn.Module):
    """Bias-free key, query and value maps sharing the key/query dimension ``D``."""

    def __init__(self, d_input: int, d_slots: int, attn_dim: Optional[int] = None):
        super().__init__()
        self.D = attn_dim or d_slots
        self.k_map = nn.Linear(d_input, self.D, bias=False)
        self.q_map = nn.Linear(d_slots, self.D, bias=False)
        self.v_map = nn.Linear(d_input, d_slots, bias=False)


def init_slots(
    params: SlotInitParams,
    num_slots: int,
    generator: Optional[torch.Generator] = None,
    batch_size: Optional[int] = None,
) -> torch.Tensor:
    """
    Sample slots ``mean + exp(log_std) * eps`` with eps standard normal.

    Returns:
        (O, d) or (B, O, d) tensor; identical for identical generator states
    """
    if num_slots < 1:
        raise ValueError(f"number of slots must be >= 1, got {num_slots}")
    shape = (num_slots, params.mean.numel()) if batch_size is None else (batch_size, num_slots, params.mean.numel())
    eps = torch.randn(shape, generator=generator, dtype=params.mean.dtype, device="cpu").to(params.mean.device)
    return params.mean + params.std * eps


def attention_step(
    slots: torch.Tensor, features: torch.Tensor, proj: ProjectionParams, eps: float = DEFAULT_EPS
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    One attention round.

    Args:
        slots: (..., O, d_slots), already normalised if the caller normalises
        features: (..., N, d_input)
        proj: Key/query/value maps
        eps: Added to every slot's attention mass before the weighted mean

    Returns:
        (updates (..., O, d_slots), attn (..., N, O)); attn rows sum to 1 over slots
    """
    logits = torch.einsum("...nd,...od->...no", proj.k_map(features), proj.q_map(slots)) / math.sqrt(proj.D)
    attn = logits.softmax(dim=-1)
    weights = attn / (attn.sum(dim=-2, keepdim=True) + eps)
    updates = torch.einsum("...no,...nd->...od", weights, proj.v_map(features))
    return updates, attn


def refine(
    slots0: torch.Tensor,
    features: torch.Tensor,
    proj: ProjectionParams,
    gru: nn.GRUCell,
    iterations: int,
    norm_features: Optional[nn.Module] = None,
    norm_slots: Optional[nn.Module] = None,
    eps: float = DEFAULT_EPS,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Iterate attention_step and a row-wise GRU update.

    Returns:
        Final slots and the attention matrix of the last iteration
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    if norm_features is not None:
        features = norm_features(features)
    slots = slots0
    attn = None
    for _ in range(iterations):
        query_slots = norm_slots(slots) if norm_slots is not None else slots
        updates, attn = attention_step(query_slots, features, proj, eps)
        d = slots.shape[-1]
        slots = gru(updates.reshape(-1, d), slots.reshape(-1, d)).reshape(slots.shape)
    return slots, attn


def slot_masks(attn: torch.Tensor, spatial: Tuple[int, int], target: Tuple[int, int]) -> torch.Tensor:
    """
    Per-slot soft masks at image resolution.

    Args:
        attn: (..., N, O) with N = Hf * Wf
        spatial: (Hf, Wf)
        target: (H, W), at least as large as ``spatial``

    Returns:
        (..., O, H, W); bilinear resizing keeps every pixel's slot distribution summing to 1
    """
    hf, wf = spatial
    if attn.shape[-2] != hf * wf:
        raise ValueError(f"attention has N={attn.shape[-2]} rows, spatial {spatial} needs {hf * wf}")
    if target[0] < hf or target[1] < wf:
        raise ValueError(f"cannot downscale slot masks from {spatial} to {target}")
    maps = attn.transpose(-1, -2)
    maps = maps.reshape(*maps.shape[:-1], hf, wf)
    return resize_bilinear(maps, tuple(target))


class SlotAttention(nn.Module):
    """Learned Gaussian slot initialisation followed by ``iterations`` refinement rounds."""

    def __init__(
        self,
        d_input: int,
        num_slots: int = 6,
        d_slots: int = 64,
        iterations: int = 3,
        attn_dim: Optional[int] = None,
        eps: float = DEFAULT_EPS,
    ):
        super().__init__()
        self.num_slots = num_slots
        self.iterations = iterations
        self.eps = eps
        self.slot_mean = nn.Parameter(torch.randn(d_slots) * 0.1)
        self.slot_log_std = nn.Parameter(torch.zeros(d_slots))
        self.projection = ProjectionParams(d_input, d_slots, attn_dim)
        self.gru = nn.GRUCell(d_slots, d_slots)
        self.norm_features = nn.LayerNorm(d_input)
        self.norm_slots = nn.LayerNorm(d_slots)

    @property
    def init_params(self) -> SlotInitParams:
        return SlotInitParams(mean=self.slot_mean, log_std=self.slot_log_std)

    def forward(
        self,
        features: FeatureGrid,
        generator: Optional[torch.Generator] = None,
        slots0: Optional[torch.Tensor] = None,
    ) -> Tuple[SlotSet, AttentionMatrix]:
        feats = features.features
        if slots0 is None:
            batch = feats.shape[0] if feats.dim() == 3 else None
            slots0 = init_slots(self.init_params, self.num_slots, generator, batch_size=batch)
        slots, attn = refine(
            slots0,
            feats,
            self.projection,
            self.gru,
            self.iterations,
            norm_features=self.norm_features,
            norm_slots=self.norm_slots,
            eps=self.eps,
        )
        return SlotSet(slots), AttentionMatrix(attn)


__all__ = ["ProjectionParams", "SlotAttention", "init_slots", "attention_step", "refine", "slot_masks"]
