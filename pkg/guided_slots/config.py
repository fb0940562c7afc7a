"""
Pydantic-based configuration for guided slot attention runs.

One RunConfig describes a whole run: data generation, networks, losses, optimizer and
evaluation. Values come from defaults, a ``.env`` file, ``GUIDED_SLOTS_*`` environment
variables (nested with ``__``) and, with highest precedence, a per-run JSON file.
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from guided_slots.models.scene import SceneSpec


class EncoderConfig(BaseModel):
    kind: Literal["toy", "external"] = Field(default="toy", description="Feature backend")
    d_input: int = Field(default=64, ge=1, description="Feature dimension of H")
    stride: int = Field(default=8, ge=1, description="Spatial downsampling factor of the toy backend")
    frozen: bool = Field(default=True, description="Freeze encoder parameters during guided training")
    external_dir: Optional[str] = Field(
        default=None, description="Directory with <record_id>.gltensor feature files (kind=external)"
    )
    patch_size: int = Field(default=14, ge=1, description="Patch size of the external backbone (recorded only)")


class SlotsConfig(BaseModel):
    count: int = Field(default=6, ge=1, description="Number of slots O")
    dim: int = Field(default=64, ge=1, description="Slot dimension d_slots")
    iterations: int = Field(default=3, ge=1, description="Slot refinement iterations")
    attn_dim: Optional[int] = Field(default=None, ge=1, description="Common key/query dimension D (default: dim)")
    eps: float = Field(default=1e-8, gt=0, description="Weighted-mean denominator epsilon")


class DecoderConfig(BaseModel):
    kind: Literal["broadcast", "diffusion"] = Field(
        default="broadcast", description="Decoder producing the reconstruction term"
    )
    broadcast_grid: int = Field(default=8, ge=1, description="Broadcast grid side before upsampling")
    hidden: int = Field(default=64, ge=1, description="Hidden channels of the broadcast decoder")


class DiffusionConfig(BaseModel):
    T: int = Field(default=50, ge=1, description="Total diffusion steps")
    latent_size: int = Field(default=16, ge=2, description="Latent grid side (image_size / 4)")
    latent_channels: int = Field(default=4, ge=3, description="Latent channels")
    beta_start: float = Field(default=1e-4, gt=0, lt=1, description="First beta at T=1000 scale")
    beta_end: float = Field(default=0.02, gt=0, lt=1, description="Last beta at T=1000 scale")
    d_token: int = Field(default=64, ge=1, description="Conditioning token dimension")
    base_channels: int = Field(default=32, ge=4, description="U-Net channels at the top level")
    pretrain_steps: int = Field(default=2000, ge=1, description="Phase 1 denoiser training steps")
    pretrain_lr: float = Field(default=2e-4, gt=0, description="Phase 1 learning rate")
    pretrain_batch_size: int = Field(default=16, ge=1, description="Phase 1 batch size")
    rendered_timesteps: List[int] = Field(
        default_factory=lambda: [10, 20, 30], description="Timesteps used to probe renders when train_on=rendered"
    )

    @model_validator(mode="after")
    def validate_betas(self) -> "DiffusionConfig":
        if self.beta_end <= self.beta_start:
            raise ValueError("diffusion.beta_end must exceed diffusion.beta_start")
        if any(t < 1 or t > self.T for t in self.rendered_timesteps):
            raise ValueError(f"diffusion.rendered_timesteps must lie in [1, {self.T}]")
        return self


class MaskConfig(BaseModel):
    tau: int = Field(default=4, ge=1, description="Self-attention power")
    t_lo: float = Field(default=0.3, ge=0.0, le=1.0, description="Lower hysteresis threshold")
    t_hi: float = Field(default=0.6, ge=0.0, le=1.0, description="Upper hysteresis threshold")

    @model_validator(mode="after")
    def validate_thresholds(self) -> "MaskConfig":
        if not self.t_lo < self.t_hi:
            raise ValueError(f"mask thresholds must satisfy t_lo < t_hi, got ({self.t_lo}, {self.t_hi})")
        return self

    @property
    def thresholds(self) -> Tuple[float, float]:
        return self.t_lo, self.t_hi


class LossConfig(BaseModel):
    mse_weight: float = Field(default=1.0, ge=0.0, description="Weight of the reconstruction term")
    bce_weight: float = Field(default=1.0, ge=0.0, description="Weight of the matched-slot guidance term")
    bce_eps: float = Field(default=1e-7, gt=0, lt=0.5, description="Clamp for soft masks inside BCE")


class OptimizerConfig(BaseModel):
    kind: Literal["adam"] = "adam"
    lr: float = Field(default=4e-4, gt=0, description="Learning rate")
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)


class TrainingConfig(BaseModel):
    batch_size: int = Field(default=16, ge=1)
    steps: int = Field(default=5000, ge=1)
    log_every: int = Field(default=50, ge=1)
    eval_every: int = Field(default=500, ge=1)
    checkpoint_every: int = Field(default=500, ge=1)
    overlay_count: int = Field(default=4, ge=0, description="Qualitative samples kept for plotting")
    resume_from: Optional[str] = Field(default=None, description="Checkpoint to resume from")


class ProbeConfig(BaseModel):
    iou_threshold: float = Field(default=0.5, ge=0.0, le=1.0, description="IoU needed to pair a slot with an object")
    steps: int = Field(default=2000, ge=1)
    lr: float = Field(default=1e-2, gt=0)
    eval_every: int = Field(default=200, ge=1, description="Validation interval for model selection")
    semantic_fallback: bool = Field(default=False, description="Match against class masks instead of instances")


class RunConfig(BaseSettings):
    """
    Complete run configuration.

    All sections are validated at construction; invalid values raise ValidationError,
    which the command line reports with exit code 2.
    """

    model_config = SettingsConfigDict(
        env_prefix="GUIDED_SLOTS_",
        env_nested_delimiter="__",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # ==================== RUN ====================
    seed: int = Field(default=0, ge=0, description="Master seed for training and generation")
    mode: Literal["glass", "glass_dagger", "unguided"] = Field(
        default="glass", description="Class-set source for guidance, or no guidance"
    )
    train_on: Literal["generated", "rendered"] = Field(
        default="generated", description="Train on decoder generations or directly on renders"
    )
    run_root: str = Field(default="runs", description="Root directory holding run directories")
    precision: Literal["float32", "float64", "fp16"] = Field(
        default="float32", description="Numeric precision (fp16 is recorded for the full-scale preset only)"
    )
    preset: str = Field(default="toy", description="Name of the preset these values came from")

    # ==================== SECTIONS ====================
    scene: SceneSpec = Field(default_factory=SceneSpec)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    slots: SlotsConfig = Field(default_factory=SlotsConfig)
    decoder: DecoderConfig = Field(default_factory=DecoderConfig)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)
    mask: MaskConfig = Field(default_factory=MaskConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)

    # ==================== VALIDATORS ====================

    @field_validator("precision")
    @classmethod
    def validate_precision(cls, v: str) -> str:
        """fp16 is a recorded value only; toy runs compute in 32 or 64 bit."""
        if v == "fp16":
            import warnings

            warnings.warn("precision=fp16 is recorded only; computation runs in float32", stacklevel=2)
        return v

    @model_validator(mode="after")
    def validate_cross_section(self) -> "RunConfig":
        if self.mode == "unguided":
            self.loss.bce_weight = 0.0
        if self.scene.image_size % self.encoder.stride != 0:
            raise ValueError(
                f"scene.image_size={self.scene.image_size} is not divisible by encoder.stride={self.encoder.stride}"
            )
        if self.scene.image_size != 4 * self.diffusion.latent_size:
            raise ValueError(
                f"diffusion.latent_size must be scene.image_size / 4 "
                f"({self.scene.image_size} / 4), got {self.diffusion.latent_size}"
            )
        if self.encoder.kind == "external" and not self.encoder.external_dir:
            raise ValueError("encoder.external_dir is required when encoder.kind='external'")
        return self

    # ==================== HELPERS ====================

    @property
    def torch_dtype(self):
        import torch

        return torch.float64 if self.precision == "float64" else torch.float32

    @property
    def feature_grid(self) -> Tuple[int, int]:
        side = self.scene.image_size // self.encoder.stride
        return side, side

    def canonical_json(self) -> str:
        """Canonical JSON of every value that influences results."""
        data = self.model_dump(mode="json", exclude={"run_root": True, "training": {"resume_from"}})
        return json.dumps(data, sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()[:12]

    def save(self, path: str) -> str:
        """Write the configuration as the run's JSON config file."""
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path

    @classmethod
    def from_file(cls, path: str, overrides: Optional[Dict[str, Any]] = None) -> "RunConfig":
        """
        Load a run configuration from JSON, applying nested overrides on top.

        Args:
            path: JSON config file
            overrides: Nested dict merged over the file values (e.g. CLI flags)

        Returns:
            Validated RunConfig

        Raises:
            FileNotFoundError: If the file does not exist
            ValidationError: If values are invalid
        """
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(**_deep_merge(data, overrides or {}))

    def with_overrides(self, overrides: Dict[str, Any]) -> "RunConfig":
        """Return a re-validated copy with nested overrides applied."""
        return type(self)(**_deep_merge(self.model_dump(), overrides))


def _deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        elif value is not None:
            merged[key] = value
    return merged


def full_scale_preset() -> RunConfig:
    """
    Full-scale hyperparameters (VOC/COCO column values), kept for documentation parity.

    The toy networks are not sized for these values; the preset records them.
    """
    return RunConfig(
        preset="full_scale",
        precision="fp16",
        encoder=EncoderConfig(kind="external", d_input=768, stride=14, external_dir="features", patch_size=14),
        slots=SlotsConfig(count=7, dim=768, iterations=3),
        optimizer=OptimizerConfig(lr=2e-5),
        training=TrainingConfig(batch_size=32, steps=500_000),
        scene=SceneSpec(image_size=224),
        diffusion=DiffusionConfig(latent_size=56),
    )


PRESETS = {
    "toy": RunConfig,
    "full_scale": full_scale_preset,
}


# Global config instance (loaded once on first use)
_config: Optional[RunConfig] = None


def get_config() -> RunConfig:
    """
    Get the environment-derived run configuration (singleton pattern).

    Returns:
        RunConfig built from defaults, ``.env`` and ``GUIDED_SLOTS_*`` variables

    Raises:
        ValidationError: If environment values are invalid
    """
    global _config

    if _config is None:
        _config = RunConfig()

    return _config


def reload_config() -> RunConfig:
    """Reload configuration from the environment (useful for testing)."""
    global _config
    _config = None
    return get_config()


__all__ = [
    "RunConfig",
    "EncoderConfig",
    "SlotsConfig",
    "DecoderConfig",
    "DiffusionConfig",
    "MaskConfig",
    "LossConfig",
    "OptimizerConfig",
    "TrainingConfig",
    "ProbeConfig",
    "PRESETS",
    "full_scale_preset",
    "get_config",
    "reload_config",
]
