"""Synthetic multi-object scenes with masks, class sets and template captions."""

import re
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Tuple, Union

import numpy as np

from guided_slots.exceptions import NoGuidableClassesError
from guided_slots.logger import get_logger
from guided_slots.models.records import SampleRecord
from guided_slots.models.scene import PromptSpec, SceneSpec
from guided_slots.models.tensors import TensorFile
from guided_slots.repositories.dataset_repository import write_dataset
from guided_slots.utils.seeding import numpy_rng

logger = get_logger(__name__)

PromptMode = Literal["glass", "glass_dagger"]

# Base RGB per class id (index 0 unused); jitter keeps colour a weak cue only
CLASS_COLOURS = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.90, 0.30, 0.30],
        [0.30, 0.80, 0.35],
        [0.30, 0.45, 0.95],
        [0.95, 0.85, 0.30],
        [0.85, 0.40, 0.90],
        [0.35, 0.90, 0.90],
        [0.95, 0.60, 0.25],
        [0.75, 0.75, 0.75],
    ]
)
COLOUR_JITTER = 0.15
RADIUS_RANGE = (0.12, 0.22)
PLACEMENT_ATTEMPTS = 100


# ==================== SHAPES ====================


def _regular_polygon(u: np.ndarray, v: np.ndarray, r: float, sides: int) -> np.ndarray:
    inradius = r * np.cos(np.pi / sides)
    inside = np.ones_like(u, dtype=bool)
    for k in range(sides):
        angle = 2.0 * np.pi * k / sides
        inside &= u * np.cos(angle) + v * np.sin(angle) <= inradius
    return inside


def _star(u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    rho = np.hypot(u, v)
    phi = np.arctan2(v, u)
    return rho <= r * (0.6 + 0.4 * np.cos(5.0 * phi))


SHAPE_FUNCTIONS: Dict[str, Callable[[np.ndarray, np.ndarray, float], np.ndarray]] = {
    "square": lambda u, v, r: np.maximum(np.abs(u), np.abs(v)) <= r * 0.8,
    "circle": lambda u, v, r: u**2 + v**2 <= r**2,
    "triangle": lambda u, v, r: _regular_polygon(u, v, r, 3),
    "cross": lambda u, v, r: ((np.abs(u) <= r / 3) & (np.abs(v) <= r)) | ((np.abs(v) <= r / 3) & (np.abs(u) <= r)),
    "star": _star,
    "diamond": lambda u, v, r: np.abs(u) + np.abs(v) <= r,
    "ring": lambda u, v, r: (u**2 + v**2 <= r**2) & (u**2 + v**2 >= (0.55 * r) ** 2),
    "hexagon": lambda u, v, r: _regular_polygon(u, v, r, 6),
}


def shape_mask(shape: str, size: int, centre: Tuple[float, float], radius: float, angle: float) -> np.ndarray:
    """Boolean (size, size) mask of ``shape`` centred at ``centre`` (x, y) in pixels, rotated by ``angle``."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xs - centre[0], ys - centre[1]
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    return SHAPE_FUNCTIONS[shape](u, v, radius)


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    base = rng.uniform(0.05, 0.3, size=3)
    if spec.background_mode == "solid":
        return np.broadcast_to(base[:, None, None], (3, size, size)).copy()
    if spec.background_mode == "gradient":
        other = rng.uniform(0.05, 0.3, size=3)
        direction = rng.uniform(0, 2 * np.pi)
        ys, xs = np.mgrid[0:size, 0:size] / max(size - 1, 1)
        ramp = np.clip(0.5 + (xs - 0.5) * np.cos(direction) + (ys - 0.5) * np.sin(direction), 0, 1)
        return base[:, None, None] * (1 - ramp) + other[:, None, None] * ramp
    noise = rng.normal(0.0, 0.06, size=(3, size, size))
    return np.clip(base[:, None, None] + noise, 0.0, 1.0)


# ==================== RENDERING ====================


def render_scene(spec: SceneSpec, rng: np.random.Generator, record_id: str = "scene") -> SampleRecord:
    """
    Render one scene.

    Args:
        spec: Scene family parameters
        rng: Generator owned by this record (e.g. ``numpy_rng(spec.seed, "scene", index)``)
        record_id: Id given to the record

    Returns:
        SampleRecord with image, semantic mask, one instance mask per visible object,
        the classes present and a template caption

    Example:
        >>> record = render_scene(SceneSpec(), numpy_rng(0, "scene", 0), "scene_000000")
        >>> record.image.shape
        (3, 64, 64)
    """
    size = spec.image_size
    vocabulary = spec.vocabulary
    min_area = spec.min_area_fraction * size * size

    image = _background(spec, rng)
    labels = np.zeros((size, size), dtype=np.int32)
    owner = np.full((size, size), -1, dtype=np.int64)
    occupied = np.zeros((size, size), dtype=bool)

    k = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    classes: List[int] = []
    for obj in range(k):
        class_id = int(rng.integers(1, spec.num_classes + 1))
        shape = vocabulary[class_id - 1]
        colour = np.clip(CLASS_COLOURS[class_id] + rng.uniform(-COLOUR_JITTER, COLOUR_JITTER, size=3), 0.0, 1.0)
        mask = _place(spec, rng, shape, occupied, min_area)
        if mask is None:
            logger.debug(f"{record_id}: no free position for object {obj} ({shape}); dropped")
            continue
        image[:, mask] = colour[:, None]
        labels[mask] = class_id
        owner[mask] = len(classes)
        occupied |= mask
        classes.append(class_id)

    # Instance masks are the visible pixels; fully hidden objects disappear
    instances, instance_labels = [], []
    for index, class_id in enumerate(classes):
        visible = owner == index
        if visible.any():
            instances.append(visible.astype(np.uint8))
            instance_labels.append(class_id)

    class_set = tuple(sorted(set(instance_labels)))
    caption = _caption(class_set, vocabulary, spec.caption_dropout, rng)

    return SampleRecord(
        record_id=record_id,
        image=TensorFile.from_array(image.astype(np.float32), name="image", dtype="float32"),
        semantic_mask=TensorFile.from_array(labels, name="semantic_mask", dtype="int32"),
        instance_masks=TensorFile.from_array(np.stack(instances), name="instance_masks", dtype="uint8")
        if instances
        else None,
        instance_labels=tuple(instance_labels),
        class_set=class_set,
        caption=caption,
        provenance="rendered",
    )


def _place(
    spec: SceneSpec, rng: np.random.Generator, shape: str, occupied: np.ndarray, min_area: float
) -> Optional[np.ndarray]:
    size = spec.image_size
    for _ in range(PLACEMENT_ATTEMPTS):
        radius = rng.uniform(*RADIUS_RANGE) * size
        angle = rng.uniform(0, 2 * np.pi)
        centre = (rng.uniform(radius, size - radius), rng.uniform(radius, size - radius))
        mask = shape_mask(shape, size, centre, radius, angle)
        # Grow until the object is large enough to be a meaningful segment
        while mask.sum() < min_area and radius < size / 2:
            radius *= 1.1
            mask = shape_mask(shape, size, centre, radius, angle)
        if mask.sum() < min_area:
            continue
        if spec.occlusion_allowed or not (mask & occupied).any():
            return mask
    return None


def _caption(class_set: Tuple[int, ...], vocabulary: Tuple[str, ...], dropout: float, rng: np.random.Generator) -> str:
    if not class_set:
        return "an empty scene"
    kept = [c for c in class_set if rng.random() >= dropout] if dropout > 0 else list(class_set)
    if not kept:
        kept = [class_set[int(rng.integers(len(class_set)))]]
    names = [vocabulary[c - 1] for c in kept]
    if len(names) == 1:
        return f"a scene with {names[0]}"
    return f"a scene with {', '.join(names[:-1])} and {names[-1]}"


# ==================== PROMPTS ====================


def build_prompt(record: SampleRecord, mode: PromptMode, vocabulary: Tuple[str, ...]) -> PromptSpec:
    """
    Build the guidance prompt for a record.

    glass: classes whose names occur as whole words in the caption; caption kept.
    glass_dagger: the record's ground-truth class set; caption is the class names.

    Raises:
        ValueError: If the caption is missing in glass mode
        NoGuidableClassesError: If no class can be extracted
    """
    if mode == "glass":
        if record.caption is None:
            raise ValueError(f"Record {record.record_id} has no caption to extract classes from")
        class_set = tuple(
            i + 1 for i, name in enumerate(vocabulary) if re.search(rf"\b{re.escape(name)}\b", record.caption)
        )
        if not class_set:
            raise NoGuidableClassesError()
        names = tuple(vocabulary[c - 1] for c in class_set)
        return PromptSpec(caption=record.caption, class_set=class_set, class_names=names)

    if mode == "glass_dagger":
        class_set = tuple(dict.fromkeys(record.class_set))
        if not class_set:
            raise NoGuidableClassesError()
        names = tuple(vocabulary[c - 1] for c in class_set)
        return PromptSpec(caption=", ".join(names), class_set=class_set, class_names=names)

    raise ValueError(f"Unknown prompt mode '{mode}'")


# ==================== CORPUS ====================


class SceneService:
    """
    Renders corpora of synthetic scenes.

    Each record has its own generator derived from (spec.seed, index), so output is
    identical regardless of the worker count.
    """

    def __init__(self, spec: SceneSpec, workers: int = 1):
        self.spec = spec
        self.workers = max(1, int(workers))
        self.logger = get_logger(__name__)

    def render(self, index: int) -> SampleRecord:
        return render_scene(self.spec, numpy_rng(self.spec.seed, "scene", index), record_id=f"scene_{index:06d}")

    def render_many(self, n: int, start: int = 0) -> List[SampleRecord]:
        indices = range(start, start + n)
        if self.workers == 1:
            return [self.render(i) for i in indices]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(self.render, indices))

    def make_corpus(self, n: int, out_dir: Union[str, Path], split: str = "train") -> str:
        """
        Render ``n`` scenes and persist them with ``write_dataset``.

        Returns:
            Manifest path

        Raises:
            ValueError: If n < 1
        """
        if n < 1:
            raise ValueError(f"corpus size must be >= 1, got {n}")
        self.logger.info(f"Rendering {n} scenes ({self.spec.image_size}px, {self.spec.num_classes} classes)")
        records = self.render_many(n)
        return write_dataset(records, out_dir, class_vocabulary=self.spec.vocabulary, split=split)


def make_corpus(spec: SceneSpec, n: int, out_dir: Union[str, Path], workers: int = 1) -> str:
    return SceneService(spec, workers=workers).make_corpus(n, out_dir)


__all__ = ["render_scene", "build_prompt", "make_corpus", "shape_mask", "SceneService", "SHAPE_FUNCTIONS"]
