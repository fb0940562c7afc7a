"""Feature backends producing the feature grid consumed by slot attention."""

import math
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import torch
import torch.nn as nn

from guided_slots.logger import get_logger
from guided_slots.models.slots import FeatureGrid
from guided_slots.repositories.tensor_repository import TENSOR_SUFFIX, read_tensor

logger = get_logger(__name__)


def coordinate_grid(height: int, width: int, device=None, dtype=torch.float32) -> torch.Tensor:
    """(H*W, 4) row-major positions ``[x, y, 1 - x, 1 - y]`` with x, y in [0, 1]."""
    ys = torch.linspace(0.0, 1.0, height, device=device, dtype=dtype)
    xs = torch.linspace(0.0, 1.0, width, device=device, dtype=dtype)
    grid_y, grid_x = torch.meshgrid(ys, xs, indexing="ij")
    grid = torch.stack([grid_x, grid_y, 1.0 - grid_x, 1.0 - grid_y], dim=-1)
    return grid.reshape(height * width, 4)


class ToyEncoder(nn.Module):
    """
    Strided convolution stack with a learned 2-D positional embedding.

    ``stride`` must be a power of two; each stride-2 convolution halves the resolution.
    There is no dropout or normalisation with running statistics, so inference is deterministic.
    """

    def __init__(self, d_input: int = 64, stride: int = 8, hidden: Optional[int] = None):
        super().__init__()
        levels = int(round(math.log2(stride))) if stride >= 1 else -1
        if stride < 1 or 2**levels != stride:
            raise ValueError(f"encoder stride must be a power of two, got {stride}")
        self.stride = stride
        self.d_input = d_input
        hidden = hidden or d_input

        layers = []
        channels = 3
        for _ in range(levels):
            layers += [nn.Conv2d(channels, hidden, kernel_size=3, stride=2, padding=1), nn.ReLU()]
            channels = hidden
        kernel = 3 if levels == 0 else 1
        layers.append(nn.Conv2d(channels, d_input, kernel_size=kernel, padding=kernel // 2))
        self.convs = nn.Sequential(*layers)
        self.position = nn.Linear(4, d_input)
        self.head = nn.Sequential(nn.Linear(d_input, d_input), nn.ReLU(), nn.Linear(d_input, d_input))

    def forward(self, images: torch.Tensor) -> FeatureGrid:
        """
        Encode images.

        Args:
            images: (B, 3, H, W) or (3, H, W)

        Returns:
            FeatureGrid with features (B, N, d_input) (or (N, d_input) for a single image)

        Raises:
            ValueError: If H or W is not divisible by the stride
        """
        single = images.dim() == 3
        if single:
            images = images.unsqueeze(0)
        height, width = images.shape[-2:]
        if height % self.stride or width % self.stride:
            raise ValueError(
                f"image size {height}x{width} must be divisible by the encoder stride factor {self.stride}"
            )
        x = self.convs(images)
        hf, wf = x.shape[-2:]
        x = x.flatten(2).transpose(1, 2)
        x = x + self.position(coordinate_grid(hf, wf, device=x.device, dtype=x.dtype))
        x = self.head(x)
        return FeatureGrid(features=x[0] if single else x, spatial=(hf, wf))


def load_external_features(path: Union[str, Path]) -> FeatureGrid:
    """
    Load precomputed backbone features from a tensor file of shape (Hf, Wf, d_input).

    Raises:
        ValueError: If the tensor is not rank 3
    """
    tensor = read_tensor(path)
    if len(tensor.shape) != 3:
        raise ValueError(f"external features must have rank 3 (Hf, Wf, d_input), got shape {tensor.shape}")
    hf, wf, d = tensor.shape
    features = torch.from_numpy(tensor.to_array().astype("float32")).reshape(hf * wf, d)
    return FeatureGrid(features=features, spatial=(hf, wf))


class ExternalFeatureEncoder(nn.Module):
    """Serves ``<record_id>.gltensor`` feature files from a directory, caching them in memory."""

    def __init__(self, directory: Union[str, Path], d_input: int):
        super().__init__()
        self.directory = Path(directory)
        self.d_input = d_input
        self._cache: Dict[str, FeatureGrid] = {}

    def load(self, record_id: str) -> FeatureGrid:
        if record_id not in self._cache:
            grid = load_external_features(self.directory / f"{record_id}{TENSOR_SUFFIX}")
            if grid.dim != self.d_input:
                raise ValueError(f"features for {record_id} have d={grid.dim}, config says {self.d_input}")
            self._cache[record_id] = grid
        return self._cache[record_id]

    def forward(self, record_ids: Sequence[str]) -> FeatureGrid:
        grids = [self.load(r) for r in record_ids]
        spatial = grids[0].spatial
        if any(g.spatial != spatial for g in grids):
            raise ValueError("external features in one batch must share a spatial grid")
        return FeatureGrid(features=torch.stack([g.features for g in grids]), spatial=spatial)


__all__ = ["ToyEncoder", "ExternalFeatureEncoder", "load_external_features", "coordinate_grid"]
