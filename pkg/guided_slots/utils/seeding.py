"""Deterministic seed derivation for rendering, batching and sampling substreams."""

import hashlib
from typing import Union

import numpy as np
import torch

Key = Union[int, str]


def derive_seed(seed: int, *keys: Key) -> int:
    """
    Derive a 63-bit seed from a master seed and a path of keys.

    Example:
        >>> derive_seed(0, "batch", 3) == derive_seed(0, "batch", 3)
        True
    """
    text = ":".join([str(int(seed))] + [str(k) for k in keys])
    return int(hashlib.sha256(text.encode("utf-8")).hexdigest()[:16], 16) & ((1 << 63) - 1)


def numpy_rng(seed: int, *keys: Key) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))


def torch_generator(seed: int, *keys: Key, device: str = "cpu") -> torch.Generator:
    generator = torch.Generator(device=device)
    generator.manual_seed(derive_seed(seed, *keys))
    return generator


def is_validation_record(seed: int, record_id: str, fraction_denominator: int = 10) -> bool:
    """Seed-stable hash split: one record in ``fraction_denominator`` goes to validation."""
    digest = hashlib.sha256(f"{seed}:{record_id}".encode("utf-8")).hexdigest()
    return int(digest[:8], 16) % fraction_denominator == 0


__all__ = ["derive_seed", "numpy_rng", "torch_generator", "is_validation_record"]
