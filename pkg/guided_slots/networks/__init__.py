"""Torch modules: feature encoders, slot attention, broadcast decoder and the toy denoiser."""

from guided_slots.networks.broadcast_decoder import SpatialBroadcastDecoder
from guided_slots.networks.diffusion import AttentionStore, ConditioningEmbedder, LatentMap, ToyUNet
from guided_slots.networks.encoder import ExternalFeatureEncoder, ToyEncoder, load_external_features
from guided_slots.networks.slot_attention import (
    ProjectionParams,
    SlotAttention,
    attention_step,
    init_slots,
    refine,
    slot_masks,
)

__all__ = [
    "ToyEncoder",
    "ExternalFeatureEncoder",
    "load_external_features",
    "ProjectionParams",
    "SlotAttention",
    "init_slots",
    "attention_step",
    "refine",
    "slot_masks",
    "SpatialBroadcastDecoder",
    "LatentMap",
    "AttentionStore",
    "ToyUNet",
    "ConditioningEmbedder",
]
