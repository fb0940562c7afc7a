"""
Model factory for building every network of a run from its configuration.

This module creates the encoder, slot attention, decoders and the denoiser with
deterministic initialisation, and wires them into one bundle the services share.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import torch
import torch.nn as nn

from guided_slots.config import RunConfig
from guided_slots.logger import get_logger
from guided_slots.models.diffusion import DiffusionSchedule
from guided_slots.models.reports import Checkpoint
from guided_slots.models.slots import FeatureGrid
from guided_slots.networks.broadcast_decoder import SpatialBroadcastDecoder
from guided_slots.networks.diffusion import ConditioningEmbedder, LatentMap, ToyUNet
from guided_slots.networks.encoder import ExternalFeatureEncoder, ToyEncoder
from guided_slots.networks.slot_attention import SlotAttention
from guided_slots.utils.seeding import derive_seed

logger = get_logger(__name__)


@dataclass
class ModelBundle:
    """All networks of a run plus the fixed latent map and noise schedule."""

    config: RunConfig
    encoder: Union[ToyEncoder, ExternalFeatureEncoder]
    slot_attention: SlotAttention
    broadcast_decoder: SpatialBroadcastDecoder
    denoiser: ToyUNet
    embedder: ConditioningEmbedder
    latent_map: LatentMap
    schedule: DiffusionSchedule
    device: str = "cpu"

    # ==================== MODULES ====================

    def modules(self) -> Dict[str, nn.Module]:
        return {
            "encoder": self.encoder,
            "slot_attention": self.slot_attention,
            "broadcast_decoder": self.broadcast_decoder,
            "denoiser": self.denoiser,
            "embedder": self.embedder,
        }

    def state_dicts(self, names: Optional[Sequence[str]] = None) -> Dict[str, Dict[str, torch.Tensor]]:
        modules = self.modules()
        names = names or list(modules)
        return {name: {k: v.detach().cpu() for k, v in modules[name].state_dict().items()} for name in names}

    def load_checkpoint(self, checkpoint: Checkpoint, strict: bool = True) -> List[str]:
        """
        Load every module state present in ``checkpoint``.

        Returns:
            Names of the modules that were loaded
        """
        modules = self.modules()
        loaded = []
        for name, state in checkpoint.modules.items():
            if name not in modules:
                logger.warning(f"Checkpoint has unknown module '{name}', skipping")
                continue
            modules[name].load_state_dict(state, strict=strict)
            loaded.append(name)
        logger.info(f"[OK] Loaded {', '.join(loaded)} from step {checkpoint.step}")
        return loaded

    def guided_parameters(self) -> List[nn.Parameter]:
        """Parameters optimised in guided training; the denoiser stays frozen."""
        params = list(self.slot_attention.parameters())
        if self.config.decoder.kind == "broadcast":
            params += list(self.broadcast_decoder.parameters())
        else:
            params += list(self.embedder.slot_projection.parameters())
        if not self.config.encoder.frozen and isinstance(self.encoder, ToyEncoder):
            params += list(self.encoder.parameters())
        return params

    def freeze_for_guided_training(self) -> None:
        for p in self.denoiser.parameters():
            p.requires_grad_(False)
        for p in self.embedder.class_table.parameters():
            p.requires_grad_(False)
        if self.config.encoder.frozen:
            for p in self.encoder.parameters():
                p.requires_grad_(False)

    def train(self, mode: bool = True) -> "ModelBundle":
        for module in self.modules().values():
            module.train(mode)
        return self

    def eval(self) -> "ModelBundle":
        return self.train(False)

    # ==================== FORWARD HELPERS ====================

    def encode(self, images: torch.Tensor, record_ids: Optional[Sequence[str]] = None) -> FeatureGrid:
        """
        Feature grid for a batch of images (toy backend) or record ids (external backend).

        The encoder runs without gradients when frozen.
        """
        if isinstance(self.encoder, ExternalFeatureEncoder):
            if record_ids is None:
                raise ValueError("the external feature backend needs record ids")
            grid = self.encoder(record_ids)
            return FeatureGrid(features=grid.features.to(self.device, images.dtype), spatial=grid.spatial)
        if self.config.encoder.frozen:
            with torch.no_grad():
                return self.encoder(images)
        return self.encoder(images)

    @property
    def latent_shape(self):
        side = self.config.diffusion.latent_size
        return (self.config.diffusion.latent_channels, side, side)


def create_bundle(config: RunConfig, device: str = "cpu") -> ModelBundle:
    """
    Build every network of a run.

    Parameters are initialised from ``derive_seed(config.seed, "init", <module>)`` so two
    bundles built from the same configuration are identical.

    Args:
        config: Run configuration
        device: Torch device for all modules

    Returns:
        ModelBundle with modules in ``config.torch_dtype``
    """
    logger.info("=" * 60)
    logger.info(f"Building networks for config {config.config_hash} (preset={config.preset})")
    dtype = config.torch_dtype

    def seeded(name: str, build):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(config.seed, "init", name))
            return build()

    if config.encoder.kind == "external":
        encoder = ExternalFeatureEncoder(config.encoder.external_dir, config.encoder.d_input)
        logger.info(f"[OK] External features from {config.encoder.external_dir}")
    else:
        encoder = seeded("encoder", lambda: ToyEncoder(config.encoder.d_input, config.encoder.stride))
        logger.info(f"[OK] Toy encoder d={config.encoder.d_input} stride={config.encoder.stride}")

    slot_attention = seeded(
        "slot_attention",
        lambda: SlotAttention(
            d_input=config.encoder.d_input,
            num_slots=config.slots.count,
            d_slots=config.slots.dim,
            iterations=config.slots.iterations,
            attn_dim=config.slots.attn_dim,
            eps=config.slots.eps,
        ),
    )
    broadcast_decoder = seeded(
        "broadcast_decoder",
        lambda: SpatialBroadcastDecoder(
            config.slots.dim, config.scene.image_size, config.decoder.broadcast_grid, config.decoder.hidden
        ),
    )
    denoiser = seeded(
        "denoiser",
        lambda: ToyUNet(config.diffusion.latent_channels, config.diffusion.base_channels, config.diffusion.d_token),
    )
    embedder = seeded(
        "embedder",
        lambda: ConditioningEmbedder(config.scene.num_classes, config.diffusion.d_token, config.slots.dim),
    )
    logger.info(f"[OK] Slot attention O={config.slots.count} d={config.slots.dim} iters={config.slots.iterations}")
    logger.info(f"[OK] Decoder backend: {config.decoder.kind}")

    bundle = ModelBundle(
        config=config,
        encoder=encoder,
        slot_attention=slot_attention,
        broadcast_decoder=broadcast_decoder,
        denoiser=denoiser,
        embedder=embedder,
        latent_map=LatentMap(config.diffusion.latent_channels),
        schedule=DiffusionSchedule.linear(config.diffusion.T, config.diffusion.beta_start, config.diffusion.beta_end),
        device=device,
    )
    for module in bundle.modules().values():
        module.to(device=device, dtype=dtype)
    logger.info("=" * 60)
    return bundle


__all__ = ["ModelBundle", "create_bundle"]
