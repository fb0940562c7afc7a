"""Loss breakdowns, evaluation reports, probe results and checkpoints."""

from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import torch
from pydantic import BaseModel, Field


@dataclass
class LossBreakdown:
    """Weighted objective; ``total = mse_weight * mse + bce_weight * bce``. Tensors keep the graph."""

    mse: torch.Tensor
    bce: torch.Tensor
    total: torch.Tensor
    matched_slot_count: int

    def as_floats(self) -> Dict[str, float]:
        return {
            "mse": float(self.mse.detach()),
            "bce": float(self.bce.detach()),
            "total": float(self.total.detach()),
            "matched_slots": float(self.matched_slot_count),
        }


class EvalReport(BaseModel):
    """Object-discovery metrics over a set of images."""

    miou: float = Field(ge=0.0, le=1.0)
    mbo_i: float = Field(ge=0.0, le=1.0)
    mbo_c: float = Field(ge=0.0, le=1.0)
    corloc: float = Field(ge=0.0, le=1.0)
    detrate: float = Field(ge=0.0, le=1.0)
    n_images: int = Field(ge=1)
    per_class_iou: Dict[int, float] = Field(default_factory=dict)
    no_split_fraction: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    frechet: Optional[float] = Field(default=None, ge=0.0, description="Feature distance renders vs reconstructions")

    def scalars(self) -> Dict[str, float]:
        data = self.model_dump(exclude={"per_class_iou"}, exclude_none=True)
        return {k: float(v) for k, v in data.items()}


class ProbeResult(BaseModel):
    top1_accuracy: float = Field(ge=0.0, le=1.0)
    detrate: float = Field(ge=0.0, le=1.0)
    n_matched: int = Field(ge=0)
    iou_threshold: float = 0.5
    best_step: Optional[int] = None


@dataclass
class Checkpoint:
    """
    Everything needed to resume a run.

    ``modules`` maps a module name to its state dict; ``rng`` holds torch/numpy generator states.
    """

    modules: Dict[str, Dict[str, torch.Tensor]]
    step: int
    config_hash: str
    config_json: str
    optimizer: Optional[Dict[str, Any]] = None
    rng: Dict[str, Any] = field(default_factory=dict)
    path: Optional[str] = None


__all__ = ["LossBreakdown", "EvalReport", "ProbeResult", "Checkpoint"]
