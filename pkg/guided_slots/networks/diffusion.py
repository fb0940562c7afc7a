"""
Miniature latent diffusion model.

A fixed average-pool latent map, a two-level U-Net denoiser with one self-attention
and one cross-attention block per level, and an attention store that records what
those blocks attend to.
"""

import math
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from guided_slots.models.diffusion import NO_CLASS, AttnStack, AttnStackMeta, ConditioningTokens


# ==================== LATENT MAP ====================


class LatentMap:
    """
    Fixed 4x average-pool "autoencoder".

    Channels 0-2 are the pooled RGB and channel 3 their mean, all rescaled to [-1, 1].
    ``decode`` upsamples channels 0-2 back to image resolution.
    """

    factor = 4

    def __init__(self, channels: int = 4):
        if channels < 3:
            raise ValueError("latent needs at least 3 channels")
        self.channels = channels

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        pooled = F.avg_pool2d(images, self.factor)
        extra = pooled.mean(dim=1, keepdim=True).expand(-1, self.channels - 3, -1, -1)
        return torch.cat([pooled, extra], dim=1) * 2.0 - 1.0

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        rgb = (latents[:, :3] + 1.0) / 2.0
        return F.interpolate(rgb, scale_factor=self.factor, mode="bilinear", align_corners=False).clamp(0.0, 1.0)


# ==================== ATTENTION STORE ====================


class AttentionStore:
    """
    Collects attention probabilities from the denoiser's blocks.

    Entries are appended in call order, so one denoiser call at timestep t adds one
    (self, cross) pair per level.
    """

    def __init__(self):
        self.reset()

    def reset(self) -> None:
        self.cross: List[torch.Tensor] = []
        self.self_: List[torch.Tensor] = []
        self.timesteps: List[int] = []
        self.resolutions: List[Tuple[int, int]] = []
        self.current_timestep = -1

    def begin_step(self, t: int) -> None:
        self.current_timestep = int(t)

    def record_self(self, probs: torch.Tensor) -> None:
        self.self_.append(probs.detach())

    def record_cross(self, probs: torch.Tensor, resolution: Tuple[int, int]) -> None:
        batch, _, tokens = probs.shape
        self.cross.append(probs.detach().reshape(batch, resolution[0], resolution[1], tokens))
        self.timesteps.append(self.current_timestep)
        self.resolutions.append(tuple(resolution))

    def to_stack(self, token_class_ids: Sequence[int] = ()) -> AttnStack:
        return AttnStack(
            cross=list(self.cross),
            self_=list(self.self_),
            meta=AttnStackMeta(
                timesteps=list(self.timesteps),
                resolutions=list(self.resolutions),
                token_class_ids=tuple(token_class_ids),
            ),
        )


# ==================== BLOCKS ====================


def _groups(channels: int) -> int:
    return math.gcd(8, channels)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_channels), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_channels)
        self.norm2 = nn.GroupNorm(_groups(out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttentionBlock(nn.Module):
    """Single-head pixel-to-pixel attention; rows of the recorded map are distributions over pixels."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, store: Optional[AttentionStore] = None) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        q, k, v = self.to_q(tokens), self.to_k(tokens), self.to_v(tokens)
        probs = (q @ k.transpose(1, 2) / math.sqrt(c)).softmax(dim=-1)
        if store is not None:
            store.record_self(probs)
        out = self.to_out(probs @ v)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class CrossAttentionBlock(nn.Module):
    """Pixels attend to conditioning tokens; masked tokens get zero probability."""

    def __init__(self, channels: int, d_token: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(d_token, channels, bias=False)
        self.to_v = nn.Linear(d_token, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(
        self,
        x: torch.Tensor,
        tokens: torch.Tensor,
        token_mask: Optional[torch.Tensor] = None,
        store: Optional[AttentionStore] = None,
    ) -> torch.Tensor:
        b, c, h, w = x.shape
        queries = self.to_q(self.norm(x).flatten(2).transpose(1, 2))
        logits = queries @ self.to_k(tokens).transpose(1, 2) / math.sqrt(c)
        if token_mask is not None:
            logits = logits.masked_fill(~token_mask[:, None, :], float("-inf"))
        probs = logits.softmax(dim=-1)
        if store is not None:
            store.record_cross(probs, (h, w))
        out = self.to_out(probs @ self.to_v(tokens))
        return x + out.transpose(1, 2).reshape(b, c, h, w)


# ==================== DENOISER ====================


class ToyUNet(nn.Module):
    """
    Two-level U-Net predicting the noise of a latent.

    Level 1 runs at the latent resolution and level 2 at half of it; each level has a
    residual block, a self-attention block and a cross-attention block.
    """

    num_attention_levels = 2

    def __init__(self, latent_channels: int = 4, base_channels: int = 32, d_token: int = 64):
        super().__init__()
        c1, c2 = base_channels, 2 * base_channels
        temb_dim = 4 * base_channels
        self.base_channels = base_channels
        self.time_mlp = nn.Sequential(nn.Linear(base_channels, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))

        self.conv_in = nn.Conv2d(latent_channels, c1, 3, padding=1)
        self.res1 = ResBlock(c1, c1, temb_dim)
        self.self1 = SelfAttentionBlock(c1)
        self.cross1 = CrossAttentionBlock(c1, d_token)
        self.down = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.res2 = ResBlock(c2, c2, temb_dim)
        self.self2 = SelfAttentionBlock(c2)
        self.cross2 = CrossAttentionBlock(c2, d_token)
        self.mid = ResBlock(c2, c2, temb_dim)
        self.up = nn.Conv2d(c2, c1, 3, padding=1)
        self.res_up = ResBlock(2 * c1, c1, temb_dim)
        self.norm_out = nn.GroupNorm(_groups(c1), c1)
        self.conv_out = nn.Conv2d(c1, latent_channels, 3, padding=1)

    def forward(
        self,
        x_t: torch.Tensor,
        t: torch.Tensor,
        tokens: torch.Tensor,
        token_mask: Optional[torch.Tensor] = None,
        store: Optional[AttentionStore] = None,
    ) -> torch.Tensor:
        if t.dim() == 0:
            t = t.expand(x_t.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.base_channels).to(x_t.dtype))

        h1 = self.res1(self.conv_in(x_t), temb)
        h1 = self.self1(h1, store)
        h1 = self.cross1(h1, tokens, token_mask, store)

        h2 = self.res2(self.down(h1), temb)
        h2 = self.self2(h2, store)
        h2 = self.cross2(h2, tokens, token_mask, store)
        h2 = self.mid(h2, temb)

        up = self.up(F.interpolate(h2, size=h1.shape[-2:], mode="nearest"))
        h = self.res_up(torch.cat([up, h1], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))


# ==================== CONDITIONING ====================


class ConditioningEmbedder(nn.Module):
    """
    Learned class embeddings (token 0 is the null token) and a slot-to-token projection.

    Prompt conditioning uses the fixed token layout ``[null, class 1, ..., class C]`` and
    masks out the classes a prompt does not name.
    """

    def __init__(self, num_classes: int, d_token: int, d_slots: int):
        super().__init__()
        self.num_classes = num_classes
        self.class_table = nn.Embedding(num_classes + 1, d_token)
        self.slot_projection = nn.Linear(d_slots, d_token)

    @property
    def prompt_token_class_ids(self) -> Tuple[int, ...]:
        return (NO_CLASS,) + tuple(range(1, self.num_classes + 1))

    def prompt_tokens(self, class_sets: Sequence[Sequence[int]]) -> ConditioningTokens:
        batch = len(class_sets)
        device = self.class_table.weight.device
        tokens = self.class_table.weight.unsqueeze(0).expand(batch, -1, -1)
        mask = torch.zeros(batch, self.num_classes + 1, dtype=torch.bool, device=device)
        mask[:, 0] = True
        for i, class_set in enumerate(class_sets):
            for c in class_set:
                if not 1 <= c <= self.num_classes:
                    raise ValueError(f"class id {c} outside 1..{self.num_classes}")
                mask[i, c] = True
        return ConditioningTokens(
            tokens=tokens, source="class-embeddings", token_class_ids=self.prompt_token_class_ids, mask=mask
        )

    def slot_tokens(self, slots: torch.Tensor) -> ConditioningTokens:
        """(B, O, d_slots) slots to (B, O, d_token) tokens; U = O."""
        return ConditioningTokens(tokens=self.slot_projection(slots), source="slots")


__all__ = [
    "LatentMap",
    "AttentionStore",
    "ToyUNet",
    "ConditioningEmbedder",
    "SelfAttentionBlock",
    "CrossAttentionBlock",
    "timestep_embedding",
]
