"""
Domain types.

Tensor-bearing values are dataclasses; records, specs and reports that are
serialized to JSON are pydantic models.
"""

from guided_slots.models.diffusion import NO_CLASS, AttnStack, AttnStackMeta, ConditioningTokens, DiffusionSchedule
from guided_slots.models.masks import ClassAttentionMap, MatchAssignment, SegmentSet, SemanticMask
from guided_slots.models.records import DatasetManifest, ManifestEntry, SampleRecord
from guided_slots.models.reports import Checkpoint, EvalReport, LossBreakdown, ProbeResult
from guided_slots.models.scene import BACKGROUND, SHAPE_NAMES, PromptSpec, SceneSpec
from guided_slots.models.slots import AttentionMatrix, FeatureGrid, SlotInitParams, SlotSet
from guided_slots.models.tensors import TensorFile

__all__ = [
    # Files and records
    "TensorFile",
    "SampleRecord",
    "DatasetManifest",
    "ManifestEntry",
    # Scenes
    "SceneSpec",
    "PromptSpec",
    "SHAPE_NAMES",
    "BACKGROUND",
    # Slots
    "FeatureGrid",
    "SlotSet",
    "SlotInitParams",
    "AttentionMatrix",
    # Diffusion
    "ConditioningTokens",
    "AttnStack",
    "AttnStackMeta",
    "DiffusionSchedule",
    "NO_CLASS",
    # Masks
    "ClassAttentionMap",
    "SemanticMask",
    "SegmentSet",
    "MatchAssignment",
    # Reports
    "LossBreakdown",
    "EvalReport",
    "ProbeResult",
    "Checkpoint",
]
