"""Validation helpers shared by the services."""

import re

import torch

RECORD_ID_PATTERN = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")


def is_valid_record_id(record_id: str) -> bool:
    """
    Check that a record id is safe to use as a file name stem.

    Examples:
        >>> is_valid_record_id("scene_000017")
        True
        >>> is_valid_record_id("../etc")
        False
        >>> is_valid_record_id("")
        False
    """
    return bool(RECORD_ID_PATTERN.match(record_id or "")) and ".." not in record_id


def check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str = "tensors") -> None:
    """Raise ValueError naming both shapes when ``a`` and ``b`` differ."""
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what} must have the same shape, got {tuple(a.shape)} and {tuple(b.shape)}")


def check_row_stochastic(matrix: torch.Tensor, atol: float = 1e-5, what: str = "matrix") -> None:
    """Raise ValueError unless every row of ``matrix`` sums to 1 within ``atol``."""
    rows = matrix.sum(-1)
    worst = float((rows - 1.0).abs().max()) if rows.numel() else 0.0
    if worst > atol:
        raise ValueError(f"{what} rows must sum to 1 (max deviation {worst:.2e} > {atol:.0e})")


__all__ = ["is_valid_record_id", "check_same_shape", "check_row_stochastic"]
