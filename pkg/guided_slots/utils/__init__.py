"""
Utility functions and helpers.

Shared utilities that don't fit into specific layers:
- Validation helpers
- Seed derivation
- Image resizing, palettes and PNG grids
"""

from guided_slots.utils.image_helpers import (
    PALETTE,
    colorize_labels,
    image_to_pil,
    make_grid,
    overlay_labels,
    resize_bilinear,
    save_png,
)
from guided_slots.utils.seeding import derive_seed, is_validation_record, numpy_rng, torch_generator
from guided_slots.utils.validators import check_row_stochastic, check_same_shape, is_valid_record_id

__all__ = [
    # Validation
    "is_valid_record_id",
    "check_same_shape",
    "check_row_stochastic",
    # Seeding
    "derive_seed",
    "numpy_rng",
    "torch_generator",
    "is_validation_record",
    # Images
    "PALETTE",
    "resize_bilinear",
    "colorize_labels",
    "image_to_pil",
    "overlay_labels",
    "make_grid",
    "save_png",
]
