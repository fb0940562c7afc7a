"""Scene and prompt specifications for the synthetic corpus."""

from typing import Literal, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

# Class id = index + 1; 0 is background
SHAPE_NAMES: Tuple[str, ...] = ("square", "circle", "triangle", "cross", "star", "diamond", "ring", "hexagon")

BACKGROUND = 0


class SceneSpec(BaseModel):
    """
    Parameters of one synthetic scene family.

    Invariants: at least one object per scene, at least two classes, images of 16 px or more.
    """

    image_size: int = Field(default=64, ge=16, description="Image side H = W in pixels")
    num_classes: int = Field(default=5, ge=2, le=len(SHAPE_NAMES), description="Number of shape classes C_total")
    min_objects: int = Field(default=1, ge=1, description="Fewest objects per scene")
    max_objects: int = Field(default=4, ge=1, description="Most objects per scene")
    background_mode: Literal["solid", "gradient", "textured-noise"] = "solid"
    occlusion_allowed: bool = False
    seed: int = Field(default=0, ge=0)
    min_area_fraction: float = Field(default=0.03, gt=0, lt=1, description="Smallest object area / image area")
    caption_dropout: float = Field(
        default=0.3,
        ge=0.0,
        lt=1.0,
        description="Chance a present class is left out of the caption (one is always kept)",
    )

    @model_validator(mode="after")
    def validate_object_range(self) -> "SceneSpec":
        if self.max_objects < self.min_objects:
            raise ValueError(f"objects_per_scene range is empty: {self.min_objects}..{self.max_objects}")
        return self

    @property
    def objects_per_scene(self) -> Tuple[int, int]:
        return self.min_objects, self.max_objects

    @property
    def vocabulary(self) -> Tuple[str, ...]:
        return SHAPE_NAMES[: self.num_classes]


class PromptSpec(BaseModel):
    """Caption plus guidable class set; ``text`` is the concatenated prompt."""

    caption: str
    class_set: Tuple[int, ...]
    class_names: Tuple[str, ...]

    @field_validator("class_set")
    @classmethod
    def validate_class_set(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        if not v:
            raise ValueError("class_set must be nonempty")
        if len(set(v)) != len(v):
            raise ValueError(f"class_set contains duplicates: {v}")
        return v

    @property
    def text(self) -> str:
        return f"{self.caption}; {', '.join(self.class_names)}"


def class_name(class_id: int, vocabulary: Tuple[str, ...] = SHAPE_NAMES) -> str:
    if class_id == BACKGROUND:
        return "background"
    return vocabulary[class_id - 1]


__all__ = ["SHAPE_NAMES", "BACKGROUND", "SceneSpec", "PromptSpec", "class_name"]
