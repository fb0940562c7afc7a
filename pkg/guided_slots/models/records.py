"""Dataset records and the on-disk manifest model."""

from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel, Field

from guided_slots.models.tensors import TensorFile

Provenance = Literal["rendered", "generated"]

MANIFEST_FORMAT = "guided-slots-dataset/1"


@dataclass(frozen=True)
class SampleRecord:
    """
    One image with optional masks, its class set and caption.

    ``instance_labels[k]`` is the class of ``instance_masks[k]``; several instances may share a class.
    """

    record_id: str
    image: TensorFile
    class_set: Tuple[int, ...]
    semantic_mask: Optional[TensorFile] = None
    instance_masks: Optional[TensorFile] = None
    instance_labels: Tuple[int, ...] = field(default_factory=tuple)
    caption: Optional[str] = None
    provenance: Provenance = "rendered"

    def __post_init__(self):
        if self.image.dtype != "float32" or len(self.image.shape) != 3 or self.image.shape[0] != 3:
            raise ValueError(f"Record {self.record_id}: image must be 3xHxW float32, got {self.image.shape}")
        object.__setattr__(self, "class_set", tuple(int(c) for c in self.class_set))
        object.__setattr__(self, "instance_labels", tuple(int(c) for c in self.instance_labels))
        if self.semantic_mask is not None:
            labels = set(np.unique(self.semantic_mask.to_array()).tolist())
            extra = labels - set(self.class_set) - {0}
            if extra:
                raise ValueError(f"Record {self.record_id}: mask labels {sorted(extra)} are not in class_set")
        if self.instance_masks is not None and len(self.instance_labels) != self.instance_masks.shape[0]:
            raise ValueError(f"Record {self.record_id}: one instance label is required per instance mask")

    @property
    def image_size(self) -> Tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]

    def image_tensor(self) -> torch.Tensor:
        return self.image.to_tensor()

    def semantic_tensor(self) -> Optional[torch.Tensor]:
        return None if self.semantic_mask is None else self.semantic_mask.to_tensor().long()

    def instance_tensor(self) -> Optional[torch.Tensor]:
        return None if self.instance_masks is None else self.instance_masks.to_tensor().bool()


class ManifestEntry(BaseModel):
    record_id: str
    image: str
    semantic_mask: Optional[str] = None
    instance_masks: Optional[str] = None
    class_set: List[int]
    instance_labels: List[int] = Field(default_factory=list)
    caption: Optional[str]
    provenance: Provenance = "rendered"


class DatasetManifest(BaseModel):
    format: str = MANIFEST_FORMAT
    split: str = "train"
    class_vocabulary: List[str]
    records: List[ManifestEntry] = Field(default_factory=list)


__all__ = ["SampleRecord", "ManifestEntry", "DatasetManifest", "Provenance", "MANIFEST_FORMAT"]
