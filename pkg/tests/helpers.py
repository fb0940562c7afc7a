"""Hand-built tensors shared by several test modules."""

import torch


def one_hot_masks(partition: torch.Tensor, num_slots: int) -> torch.Tensor:
    """(H, W) slot index map to (O, H, W) float one-hot masks."""
    return (partition.unsqueeze(0) == torch.arange(num_slots)[:, None, None]).double()


def random_row_stochastic(n: int, generator: torch.Generator, dtype=torch.float64) -> torch.Tensor:
    raw = torch.rand(n, n, generator=generator, dtype=dtype) + 0.01
    return raw / raw.sum(dim=-1, keepdim=True)


def labels(rows) -> torch.Tensor:
    """Label map from a list of row lists."""
    return torch.tensor(rows, dtype=torch.long)
