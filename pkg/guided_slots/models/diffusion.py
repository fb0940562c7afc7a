"""Conditioning tokens, captured attention stacks and the noise schedule."""

from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple

import torch

TokenSource = Literal["class-embeddings", "slots"]

# Position of a token that belongs to no class (the null token, or a slot token)
NO_CLASS = -1


@dataclass
class ConditioningTokens:
    """
    Tokens seen by the denoiser's cross-attention.

    ``tokens`` is (..., U, d_token). ``token_class_ids[u]`` is the class id carried by token u,
    or ``NO_CLASS`` for the null token and for slot tokens. ``mask`` (..., U) marks the tokens
    cross-attention may look at; classes outside a prompt are masked out.
    """

    tokens: torch.Tensor
    source: TokenSource
    token_class_ids: Tuple[int, ...] = ()
    mask: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.tokens.dim() < 2 or self.tokens.shape[-2] < 1:
            raise ValueError(f"ConditioningTokens needs U >= 1, got shape {tuple(self.tokens.shape)}")
        if not self.token_class_ids:
            self.token_class_ids = (NO_CLASS,) * self.tokens.shape[-2]
        if len(self.token_class_ids) != self.tokens.shape[-2]:
            raise ValueError("token_class_ids must name one class per token")
        if self.mask is not None and tuple(self.mask.shape) != tuple(self.tokens.shape[:-1]):
            raise ValueError(f"mask must be {tuple(self.tokens.shape[:-1])}, got {tuple(self.mask.shape)}")
        if self.mask is not None and not self.mask.any(-1).all():
            raise ValueError("every item needs at least one attendable token")

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[-2]

    def token_index(self, class_id: int) -> int:
        try:
            return self.token_class_ids.index(class_id)
        except ValueError:
            raise ValueError(f"class {class_id} has no conditioning token") from None


@dataclass
class AttnStackMeta:
    """Per-entry timestep and (h, w) resolution, plus the token -> class mapping."""

    timesteps: List[int] = field(default_factory=list)
    resolutions: List[Tuple[int, int]] = field(default_factory=list)
    token_class_ids: Tuple[int, ...] = ()


@dataclass
class AttnStack:
    """
    Attention captured from the denoiser.

    ``cross[i]`` is (h, w, U) and ``self_[i]`` is (h*w, h*w) for the i-th (timestep, layer) entry.
    Entries may carry a leading batch axis when captured from a batched forward pass.
    """

    cross: List[torch.Tensor] = field(default_factory=list)
    self_: List[torch.Tensor] = field(default_factory=list)
    meta: AttnStackMeta = field(default_factory=AttnStackMeta)

    def __len__(self) -> int:
        return len(self.cross)

    @property
    def is_batched(self) -> bool:
        return bool(self.cross) and self.cross[0].dim() == 4

    def select(self, index: int) -> "AttnStack":
        """Unbatched view of one batch item."""
        if not self.is_batched:
            return self
        return AttnStack(
            cross=[c[index] for c in self.cross],
            self_=[s[index] for s in self.self_],
            meta=self.meta,
        )

    def validate(self, atol: float = 1e-5) -> None:
        """
        Check stack invariants.

        Raises:
            ValueError: negative cross-attention or self-attention rows that do not sum to 1
        """
        for i, c in enumerate(self.cross):
            if (c < 0).any():
                raise ValueError(f"cross-attention entry {i} has negative values")
        for i, s in enumerate(self.self_):
            rows = s.sum(-1)
            if not torch.allclose(rows, torch.ones_like(rows), atol=atol, rtol=0.0):
                raise ValueError(f"self-attention entry {i} rows do not sum to 1")


@dataclass
class DiffusionSchedule:
    """Linear beta schedule; timesteps are 1-based (t in [1, T])."""

    betas: torch.Tensor

    def __post_init__(self):
        self.betas = self.betas.to(torch.float64)
        if self.betas.dim() != 1 or self.betas.numel() < 1:
            raise ValueError("betas must be a nonempty vector")
        if not ((self.betas > 0).all() and (self.betas < 1).all()):
            raise ValueError("every beta must lie in (0, 1)")

    @classmethod
    def linear(cls, T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> "DiffusionSchedule":
        """Linear betas, rescaled so short schedules keep the same total noise as T=1000."""
        if T < 1:
            raise ValueError(f"T must be >= 1, got {T}")
        scale = 1000.0 / T
        start = min(beta_start * scale, 0.5)
        end = min(beta_end * scale, 0.999)
        return cls(torch.linspace(start, end, T, dtype=torch.float64))

    @property
    def T(self) -> int:
        return self.betas.numel()

    @property
    def alphas(self) -> torch.Tensor:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> torch.Tensor:
        return torch.cumprod(self.alphas, dim=0)

    def alpha_bar(self, t: int) -> float:
        self.check_timestep(t)
        return float(self.alpha_bars[t - 1])

    def check_timestep(self, t: int) -> None:
        if not 1 <= int(t) <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")


__all__ = ["ConditioningTokens", "AttnStack", "AttnStackMeta", "DiffusionSchedule", "TokenSource", "NO_CLASS"]
