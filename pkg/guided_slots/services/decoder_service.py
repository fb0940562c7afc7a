"""
Decoder operations: broadcast decoding, the noise-prediction training step,
ancestral sampling with attention capture, and slot-conditioned reconstruction.
"""

from typing import Callable, Optional, Tuple, Union

import torch
import torch.nn.functional as F

from guided_slots.exceptions import BackendMismatchError
from guided_slots.logger import get_logger
from guided_slots.models.diffusion import AttnStack, ConditioningTokens, DiffusionSchedule
from guided_slots.networks.broadcast_decoder import SpatialBroadcastDecoder
from guided_slots.networks.diffusion import AttentionStore, ConditioningEmbedder, LatentMap

logger = get_logger(__name__)

# (x_t, t, tokens, token_mask, store) -> predicted noise
Denoiser = Callable[..., torch.Tensor]


def broadcast_decode(decoder: SpatialBroadcastDecoder, slots: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Reconstruction (..., 3, H, W) and per-slot alphas (..., O, H, W)."""
    reconstruction, alphas, _ = decoder(slots)
    return reconstruction, alphas


def q_sample(
    x0: torch.Tensor, t: Union[int, torch.Tensor], noise: torch.Tensor, schedule: DiffusionSchedule
) -> torch.Tensor:
    """Closed-form forward process ``sqrt(ab_t) x0 + sqrt(1 - ab_t) noise``."""
    t = _as_timesteps(t, x0.shape[0], schedule)
    alpha_bar = schedule.alpha_bars.to(x0.device)[t - 1].to(x0.dtype).view(-1, *([1] * (x0.dim() - 1)))
    return alpha_bar.sqrt() * x0 + (1.0 - alpha_bar).sqrt() * noise


def diffusion_train_step(
    denoiser: Denoiser,
    x0_latent: torch.Tensor,
    cond: ConditioningTokens,
    t: Union[int, torch.Tensor],
    noise: torch.Tensor,
    schedule: DiffusionSchedule,
    store: Optional[AttentionStore] = None,
) -> Tuple[torch.Tensor, AttnStack]:
    """
    Noise-prediction loss with unit weight for every timestep.

    Args:
        denoiser: Callable ``(x_t, t, tokens, token_mask, store) -> eps_hat``
        x0_latent: (B, C, h, w) clean latents
        cond: Conditioning tokens (batched)
        t: Timestep in [1, T], scalar or (B,)
        noise: Standard normal noise shaped like ``x0_latent``
        schedule: Noise schedule
        store: Receives attention captured during the forward pass

    Returns:
        (mean squared error between noise and prediction, captured AttnStack)

    Raises:
        ValueError: If a timestep is outside [1, T]
    """
    t_vec = _as_timesteps(t, x0_latent.shape[0], schedule).to(x0_latent.device)
    x_t = q_sample(x0_latent, t_vec, noise, schedule)
    if store is not None:
        store.reset()
        store.begin_step(int(t_vec[0]) if bool((t_vec == t_vec[0]).all()) else -1)
    eps_hat = denoiser(x_t, t_vec, cond.tokens, cond.mask, store)
    loss = F.mse_loss(eps_hat, noise)
    stack = store.to_stack(cond.token_class_ids) if store is not None else AttnStack()
    return loss, stack


@torch.no_grad()
def generate(
    denoiser: Denoiser,
    cond: ConditioningTokens,
    schedule: DiffusionSchedule,
    generator: torch.Generator,
    latent_shape: Tuple[int, int, int],
    latent_map: LatentMap,
    capture: bool = False,
) -> Tuple[torch.Tensor, Optional[AttnStack]]:
    """
    Ancestral sampling from x_T ~ N(0, I) down to x_0, then decode to images.

    Args:
        denoiser: Trained noise predictor
        cond: Batched conditioning tokens; the batch size is taken from them
        schedule: Noise schedule (one denoiser call per timestep)
        generator: CPU generator; fixes the initial latent and every sampling draw
        latent_shape: (C, h, w)
        latent_map: Decodes latents to images
        capture: Record attention from every step

    Returns:
        (images (B, 3, H, W), AttnStack with T * L cross entries or None)
    """
    batch = cond.tokens.shape[0]
    device = cond.tokens.device
    dtype = cond.tokens.dtype
    store = AttentionStore() if capture else None

    x = torch.randn((batch, *latent_shape), generator=generator, dtype=dtype).to(device)
    betas = schedule.betas.to(dtype)
    alphas = schedule.alphas.to(dtype)
    alpha_bars = schedule.alpha_bars.to(dtype)

    for t in range(schedule.T, 0, -1):
        if store is not None:
            store.begin_step(t)
        t_vec = torch.full((batch,), t, dtype=torch.long, device=device)
        eps = denoiser(x, t_vec, cond.tokens, cond.mask, store)
        ab_t, a_t, b_t = alpha_bars[t - 1], alphas[t - 1], betas[t - 1]
        mean = (x - b_t / (1.0 - ab_t).sqrt() * eps) / a_t.sqrt()
        if t > 1:
            ab_prev = alpha_bars[t - 2]
            variance = b_t * (1.0 - ab_prev) / (1.0 - ab_t)
            z = torch.randn(x.shape, generator=generator, dtype=dtype).to(device)
            x = mean + variance.sqrt() * z
        else:
            x = mean

    images = latent_map.decode(x)
    stack = store.to_stack(cond.token_class_ids) if store is not None else None
    return images, stack


def reconstruct_from_slots(
    backend: str,
    denoiser: Denoiser,
    embedder: ConditioningEmbedder,
    slots: torch.Tensor,
    schedule: DiffusionSchedule,
    generator: torch.Generator,
    latent_shape: Tuple[int, int, int],
    latent_map: LatentMap,
) -> torch.Tensor:
    """
    Generate images conditioned on slots (U = O tokens).

    Raises:
        BackendMismatchError: If the configured decoder backend is not diffusion
    """
    if backend != "diffusion":
        raise BackendMismatchError(f"reconstruct_from_slots needs the diffusion decoder, run uses '{backend}'")
    if slots.dim() == 2:
        slots = slots.unsqueeze(0)
    cond = embedder.slot_tokens(slots)
    images, _ = generate(denoiser, cond, schedule, generator, latent_shape, latent_map, capture=False)
    return images


def _as_timesteps(t: Union[int, torch.Tensor], batch: int, schedule: DiffusionSchedule) -> torch.Tensor:
    t_vec = torch.as_tensor(t, dtype=torch.long)
    if t_vec.dim() == 0:
        t_vec = t_vec.expand(batch)
    if bool((t_vec < 1).any()) or bool((t_vec > schedule.T).any()):
        raise ValueError(f"timestep {t_vec.tolist()} outside [1, {schedule.T}]")
    return t_vec


__all__ = ["broadcast_decode", "q_sample", "diffusion_train_step", "generate", "reconstruct_from_slots"]
