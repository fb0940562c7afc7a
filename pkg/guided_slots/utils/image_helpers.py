"""Image helpers: bilinear resizing, label palettes, overlays and PNG grids."""

from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from guided_slots.logger import get_logger

logger = get_logger(__name__)

# Label 0 (background) is black; the rest are well-separated hues
PALETTE: Tuple[Tuple[int, int, int], ...] = (
    (0, 0, 0),
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
    (250, 190, 212),
    (0, 128, 128),
)


def resize_bilinear(maps: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    """
    Bilinearly resize the last two axes of ``maps`` to ``size`` (align_corners=False).

    Args:
        maps: Tensor (..., h, w)
        size: Target (H, W)

    Returns:
        Tensor (..., H, W); a no-op copy when the size already matches
    """
    h, w = maps.shape[-2:]
    if (h, w) == tuple(size):
        return maps.clone()
    lead = maps.shape[:-2]
    flat = maps.reshape(-1, 1, h, w)
    out = F.interpolate(flat, size=tuple(size), mode="bilinear", align_corners=False)
    return out.reshape(*lead, *size)


def colorize_labels(labels: Union[torch.Tensor, np.ndarray]) -> np.ndarray:
    """Map an (H, W) integer label map to an (H, W, 3) uint8 RGB image."""
    labels = np.asarray(labels.cpu() if isinstance(labels, torch.Tensor) else labels).astype(np.int64)
    palette = np.asarray(PALETTE, dtype=np.uint8)
    return palette[labels % len(PALETTE)]


def image_to_pil(image: torch.Tensor) -> Image.Image:
    """(3, H, W) float image in [0, 1] to an RGB PIL image."""
    array = (image.detach().cpu().clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
    return Image.fromarray(array)


def labels_to_pil(labels: Union[torch.Tensor, np.ndarray]) -> Image.Image:
    return Image.fromarray(colorize_labels(labels))


def overlay_labels(image: torch.Tensor, labels: torch.Tensor, alpha: float = 0.5) -> Image.Image:
    """Blend a colour-coded label map over an image; background pixels keep the image."""
    base = image_to_pil(image)
    colours = labels_to_pil(labels)
    blended = Image.blend(base, colours, alpha)
    keep = Image.fromarray(((np.asarray(labels.cpu()) == 0) * 255).astype(np.uint8))
    blended.paste(base, mask=keep)
    return blended


def make_grid(rows: Sequence[Sequence[Image.Image]], padding: int = 2) -> Image.Image:
    """Tile equally sized PIL images into a grid, one list per row."""
    if not rows or not rows[0]:
        raise ValueError("make_grid needs at least one image")
    cell_w, cell_h = rows[0][0].size
    n_cols = max(len(r) for r in rows)
    grid = Image.new(
        "RGB", (n_cols * cell_w + (n_cols + 1) * padding, len(rows) * cell_h + (len(rows) + 1) * padding), "white"
    )
    for r, row in enumerate(rows):
        for c, img in enumerate(row):
            if img.size != (cell_w, cell_h):
                img = img.resize((cell_w, cell_h), Image.NEAREST)
            grid.paste(img, (padding + c * (cell_w + padding), padding + r * (cell_h + padding)))
    return grid


def save_png(img: Image.Image, path: Union[str, Path]) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG")
    logger.debug(f"Saved image {path}")
    return str(path)


def slot_masks_to_pils(masks: torch.Tensor) -> List[Image.Image]:
    """(O, H, W) soft masks in [0, 1] to greyscale images converted to RGB."""
    out = []
    for m in masks.detach().cpu().clamp(0, 1):
        out.append(Image.fromarray((m.numpy() * 255.0).round().astype(np.uint8)).convert("RGB"))
    return out


__all__ = [
    "PALETTE",
    "resize_bilinear",
    "colorize_labels",
    "image_to_pil",
    "labels_to_pil",
    "overlay_labels",
    "make_grid",
    "save_png",
    "slot_masks_to_pils",
]
