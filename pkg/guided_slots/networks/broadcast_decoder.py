"""Spatial broadcast decoder: per-slot RGB and alpha logits composited by a softmax over slots."""

import math
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


def _broadcast_grid(height: int, width: int, device, dtype) -> torch.Tensor:
    ys = torch.linspace(-1.0, 1.0, height, device=device, dtype=dtype)
    xs = torch.linspace(-1.0, 1.0, width, device=device, dtype=dtype)
    grid_y, grid_x = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([grid_x, grid_y], dim=0)


class SpatialBroadcastDecoder(nn.Module):
    """
    Decode each slot independently from a ``grid x grid`` broadcast plus coordinates,
    upsampling by powers of two to ``image_size``.
    """

    def __init__(self, d_slots: int, image_size: int = 64, grid: int = 8, hidden: int = 64):
        super().__init__()
        if grid > image_size:
            raise ValueError(f"broadcast grid {grid} exceeds image size {image_size}")
        self.image_size = image_size
        self.grid = grid
        ups = max(0, int(math.floor(math.log2(image_size / grid))))

        layers = [nn.Conv2d(d_slots + 2, hidden, 3, padding=1), nn.ReLU()]
        for _ in range(ups):
            layers += [nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)]
            layers += [nn.Conv2d(hidden, hidden, 3, padding=1), nn.ReLU()]
        layers.append(nn.Conv2d(hidden, 4, 3, padding=1))
        self.decoder = nn.Sequential(*layers)

    def forward(self, slots: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """
        Args:
            slots: (..., O, d_slots)

        Returns:
            reconstruction (..., 3, H, W), alphas (..., O, H, W) summing to 1 per pixel,
            per-slot rgb (..., O, 3, H, W)
        """
        lead = slots.shape[:-2]
        num_slots, d = slots.shape[-2:]
        flat = slots.reshape(-1, d)
        x = flat[:, :, None, None].expand(-1, -1, self.grid, self.grid)
        coords = _broadcast_grid(self.grid, self.grid, flat.device, flat.dtype)
        x = torch.cat([x, coords.unsqueeze(0).expand(flat.shape[0], -1, -1, -1)], dim=1)

        out = self.decoder(x)
        if out.shape[-1] != self.image_size:
            out = F.interpolate(out, size=(self.image_size, self.image_size), mode="bilinear", align_corners=False)

        out = out.reshape(*lead, num_slots, 4, self.image_size, self.image_size)
        rgb = torch.sigmoid(out[..., :3, :, :])
        alphas = out[..., 3, :, :].softmax(dim=-3)
        reconstruction = (alphas.unsqueeze(-3) * rgb).sum(dim=-4)
        return reconstruction, alphas, rgb


__all__ = ["SpatialBroadcastDecoder"]
