"""
Training protocol.

Phase 1 pretrains the toy denoiser on rendered scenes with class conditioning. Phase 2
generates images from prompts and turns the captured attention into pseudo masks.
Guided training then fits slot attention with reconstruction plus matched-slot guidance,
with the encoder and denoiser frozen.

Every random draw is taken from a generator derived from ``(seed, purpose, step)``, so
a run resumed from a checkpoint continues exactly where the original left off.
"""

from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from guided_slots.config import RunConfig
from guided_slots.exceptions import NoGuidableClassesError, NumericalFailureError
from guided_slots.factory import ModelBundle, create_bundle
from guided_slots.logger import get_logger
from guided_slots.models.diffusion import AttnStack
from guided_slots.models.masks import SemanticMask
from guided_slots.models.records import SampleRecord
from guided_slots.models.reports import Checkpoint
from guided_slots.models.scene import PromptSpec
from guided_slots.models.tensors import TensorFile
from guided_slots.networks.diffusion import AttentionStore
from guided_slots.networks.slot_attention import slot_masks as upsample_slot_masks
from guided_slots.repositories.dataset_repository import write_dataset
from guided_slots.repositories.run_repository import RunRepository, load_checkpoint
from guided_slots.repositories.tensor_repository import write_attn_stack
from guided_slots.services.decoder_service import broadcast_decode, diffusion_train_step, generate, q_sample
from guided_slots.services.evaluation_service import EvaluationService
from guided_slots.services.loss_service import batch_total_loss, reconstruction_mse
from guided_slots.services.mask_service import MaskService, split_segments
from guided_slots.services.scene_service import build_prompt
from guided_slots.utils.seeding import is_validation_record, numpy_rng, torch_generator

PHASE1_MODULES = ("denoiser", "embedder")


class TrainingService:
    """
    Runs the training phases for one run directory.

    Example:
        >>> service = TrainingService(config, create_bundle(config), RunRepository("runs/a").create())
        >>> service.pretrain_decoder(corpus)
        >>> manifest = service.generate_guided_set(corpus, n=2000, out_dir="runs/a/guided")
        >>> service.train_guided(read_dataset(manifest).records, validation)
    """

    def __init__(self, config: RunConfig, bundle: ModelBundle, run: RunRepository):
        self.config = config
        self.bundle = bundle
        self.run = run
        self.mask_service = MaskService(config.mask.tau, config.mask.thresholds)
        self.last_checkpoint: Optional[str] = None
        self.logger = get_logger(__name__)

    # ==================== HELPERS ====================

    @property
    def prompt_mode(self) -> str:
        # unguided shares the glass_dagger data pipeline
        return "glass" if self.config.mode == "glass" else "glass_dagger"

    def _images(self, records: Sequence[SampleRecord]) -> torch.Tensor:
        return torch.stack([r.image_tensor() for r in records]).to(self.bundle.device, self.config.torch_dtype)

    def _batch_indices(self, purpose: str, step: int, n: int, batch_size: int) -> np.ndarray:
        rng = numpy_rng(self.config.seed, purpose, step)
        return np.sort(rng.choice(n, size=min(batch_size, n), replace=False))

    def _checkpoint(
        self, step: int, names: Sequence[str], optimizer: Optional[torch.optim.Optimizer] = None
    ) -> Checkpoint:
        checkpoint = Checkpoint(
            modules=self.bundle.state_dicts(names),
            step=step,
            config_hash=self.config.config_hash,
            config_json=self.config.canonical_json(),
            optimizer=optimizer.state_dict() if optimizer is not None else None,
            rng={"seed": self.config.seed},
        )
        self.last_checkpoint = self.run.save_checkpoint(checkpoint)
        return checkpoint

    def _check_finite(self, loss: torch.Tensor, step: int) -> None:
        if not bool(torch.isfinite(loss)):
            self.logger.error(f"Non-finite loss at step {step}; last good checkpoint: {self.last_checkpoint}")
            raise NumericalFailureError(step=step, last_checkpoint=self.last_checkpoint)

    def _prompts(self, records: Sequence[SampleRecord]) -> List[Tuple[SampleRecord, PromptSpec]]:
        vocabulary = self.config.scene.vocabulary
        prompts = []
        for record in records:
            try:
                prompts.append((record, build_prompt(record, self.prompt_mode, vocabulary)))
            except NoGuidableClassesError:
                self.logger.warning(f"Skipping {record.record_id}: no guidable classes")
        return prompts

    # ==================== PHASE 1 ====================

    def _diffusion_loss(self, records: Sequence[SampleRecord], purpose: str, step: int) -> torch.Tensor:
        bundle = self.bundle
        latents = bundle.latent_map.encode(self._images(records))
        cond = bundle.embedder.prompt_tokens([r.class_set for r in records])
        generator = torch_generator(self.config.seed, purpose, step)
        t = torch.randint(1, bundle.schedule.T + 1, (latents.shape[0],), generator=generator)
        noise = torch.randn(latents.shape, generator=generator, dtype=latents.dtype).to(latents.device)
        loss, _ = diffusion_train_step(bundle.denoiser, latents, cond, t, noise, bundle.schedule)
        return loss

    def pretrain_decoder(self, corpus: Sequence[SampleRecord]) -> Checkpoint:
        """
        Train the denoiser and class embeddings on rendered scenes.

        The held-out loss (validation split, fixed noise) is logged before the first and
        after the last step.

        Raises:
            ValueError: If the corpus is empty
            NumericalFailureError: If the loss becomes NaN or infinite
        """
        if not corpus:
            raise ValueError("phase 1 needs a nonempty corpus")
        cfg = self.config.diffusion
        bundle = self.bundle
        held_out = [r for r in corpus if is_validation_record(self.config.seed, r.record_id)][: cfg.pretrain_batch_size]
        held_out = held_out or list(corpus[: cfg.pretrain_batch_size])

        params = list(bundle.denoiser.parameters()) + list(bundle.embedder.class_table.parameters())
        optimizer = torch.optim.Adam(params, lr=cfg.pretrain_lr)
        bundle.denoiser.train()

        self.logger.info(f"Phase 1: {cfg.pretrain_steps} steps on {len(corpus)} scenes (T={cfg.T})")
        self._log_held_out(held_out, 0)
        for step in range(1, cfg.pretrain_steps + 1):
            indices = self._batch_indices("pretrain", step, len(corpus), cfg.pretrain_batch_size)
            loss = self._diffusion_loss([corpus[i] for i in indices], "pretrain-noise", step)
            self._check_finite(loss, step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            if step % self.config.training.log_every == 0 or step == cfg.pretrain_steps:
                self.run.append_metrics(step, "pretrain", {"diffusion_loss": float(loss.detach())})
                self.logger.info(f"Phase 1 step {step}/{cfg.pretrain_steps}: loss={float(loss.detach()):.5f}")
            if step % self.config.training.checkpoint_every == 0 and step < cfg.pretrain_steps:
                self._checkpoint(step, PHASE1_MODULES, optimizer)

        self._log_held_out(held_out, cfg.pretrain_steps)
        return self._checkpoint(cfg.pretrain_steps, PHASE1_MODULES, optimizer)

    @torch.no_grad()
    def _log_held_out(self, held_out: Sequence[SampleRecord], step: int) -> float:
        value = float(self._diffusion_loss(held_out, "heldout-noise", 0))
        self.run.append_metrics(step, "heldout", {"diffusion_loss": value})
        self.logger.info(f"Held-out diffusion loss at step {step}: {value:.5f}")
        return value

    # ==================== PHASE 2 ====================

    def generate_guided_set(
        self,
        sources: Sequence[SampleRecord],
        n: int,
        out_dir: Union[str, Path],
        stack_dir: Optional[Union[str, Path]] = None,
        keep_stacks: int = 0,
    ) -> str:
        """
        Generate ``n`` images with pseudo masks from prompts built on ``sources``.

        Only the source captions and class sets are used, never their pixels. Prompts cycle
        through the guidable sources until ``n`` images exist.

        Args:
            sources: Records providing captions and class sets
            n: Number of generated records
            out_dir: Dataset directory for the generated set
            stack_dir: Where to write the attention stacks of the first ``keep_stacks`` images

        Returns:
            Manifest path

        Raises:
            NoGuidableClassesError: If no source yields a prompt
        """
        if n < 1:
            raise ValueError(f"guided set size must be >= 1, got {n}")
        prompts = self._prompts(sources)
        if not prompts:
            raise NoGuidableClassesError("no source record yields a guidable prompt")
        prompts = [prompts[k % len(prompts)][1] for k in range(n)]

        bundle = self.bundle
        bundle.denoiser.eval()
        size = (self.config.scene.image_size, self.config.scene.image_size)
        batch_size = self.config.diffusion.pretrain_batch_size
        records = []
        self.logger.info(f"Phase 2: generating {n} images ({self.prompt_mode} prompts, T={bundle.schedule.T})")
        for batch_index, start in enumerate(range(0, n, batch_size)):
            batch = prompts[start : start + batch_size]
            cond = bundle.embedder.prompt_tokens([p.class_set for p in batch])
            images, stack = generate(
                bundle.denoiser,
                cond,
                bundle.schedule,
                torch_generator(self.config.seed, "generate", batch_index),
                bundle.latent_shape,
                bundle.latent_map,
                capture=True,
            )
            for i, prompt in enumerate(batch):
                k = start + i
                item_stack = stack.select(i)
                if stack_dir is not None and k < keep_stacks:
                    write_attn_stack(_cpu_stack(item_stack), Path(stack_dir) / f"gen_{k:06d}")
                mask = self.mask_service.pseudo_mask(item_stack, prompt.class_set, size)
                records.append(_generated_record(f"gen_{k:06d}", images[i], mask, prompt))
            self.logger.debug(f"Generated {min(start + batch_size, n)}/{n}")

        return write_dataset(records, out_dir, class_vocabulary=self.config.scene.vocabulary, split="generated")

    @torch.no_grad()
    def rendered_pseudo_masks(self, records: Sequence[SampleRecord]) -> List[Tuple[PromptSpec, SemanticMask]]:
        """
        Pseudo masks for renders: noise each render to the configured timesteps and read the
        denoiser's attention under the record's prompt.

        Records without a guidable prompt are skipped.
        """
        bundle = self.bundle
        bundle.denoiser.eval()
        size = (self.config.scene.image_size, self.config.scene.image_size)
        prompts = self._prompts(records)
        batch_size = self.config.diffusion.pretrain_batch_size
        results = []
        for batch_index, start in enumerate(range(0, len(prompts), batch_size)):
            batch = prompts[start : start + batch_size]
            latents = bundle.latent_map.encode(self._images([r for r, _ in batch]))
            cond = bundle.embedder.prompt_tokens([p.class_set for _, p in batch])
            store = AttentionStore()
            generator = torch_generator(self.config.seed, "rendered", batch_index)
            for t in self.config.diffusion.rendered_timesteps:
                noise = torch.randn(latents.shape, generator=generator, dtype=latents.dtype).to(latents.device)
                t_vec = torch.full((latents.shape[0],), t, dtype=torch.long, device=latents.device)
                store.begin_step(t)
                bundle.denoiser(q_sample(latents, t_vec, noise, bundle.schedule), t_vec, cond.tokens, cond.mask, store)
            stack = store.to_stack(cond.token_class_ids)
            for i, (_, prompt) in enumerate(batch):
                results.append((prompt, self.mask_service.pseudo_mask(stack.select(i), prompt.class_set, size)))
        return results

    def rendered_guided_set(self, records: Sequence[SampleRecord]) -> List[SampleRecord]:
        """Renders relabelled with attention pseudo masks, for ``train_on=rendered``."""
        guided = []
        kept = [r for r, _ in self._prompts(records)]
        for record, (prompt, mask) in zip(kept, self.rendered_pseudo_masks(kept)):
            guided.append(
                SampleRecord(
                    record_id=record.record_id,
                    image=record.image,
                    class_set=prompt.class_set,
                    semantic_mask=TensorFile.from_tensor(mask.labels, name="semantic", dtype="int32"),
                    caption=record.caption,
                    provenance="rendered",
                )
            )
        self.logger.info(f"Built {len(guided)} rendered guided records")
        return guided

    # ==================== GUIDED TRAINING ====================

    def train_guided(self, guided: Sequence[SampleRecord], validation: Sequence[SampleRecord] = ()) -> Checkpoint:
        """
        Fit slot attention (and the reconstruction pathway) on the guided set.

        Each step: encode, refine slots, upsample slot masks, match them to the pseudo-mask
        segments, and minimise ``mse_weight * MSE + bce_weight * BCE``.

        Args:
            guided: Records with (pseudo) semantic masks
            validation: Rendered records with ground truth for periodic evaluation

        Returns:
            Final checkpoint with every module

        Raises:
            ValueError: If a record lacks a semantic mask, or rendered pixels appear in a
                ``train_on=generated`` run
            NumericalFailureError: If the loss becomes NaN or infinite
        """
        cfg = self.config
        if not guided:
            raise ValueError("guided training needs at least one record")
        missing = [r.record_id for r in guided if r.semantic_mask is None]
        if missing:
            raise ValueError(f"records without semantic masks: {missing[:5]}")
        if cfg.train_on == "generated":
            real = [r.record_id for r in guided if r.provenance != "generated"]
            if real:
                raise ValueError(f"train_on=generated but {len(real)} records are rendered, e.g. {real[0]}")

        bundle = self.bundle
        segments = [split_segments(SemanticMask(r.semantic_tensor())) for r in guided]
        bundle.freeze_for_guided_training()
        optimizer = torch.optim.Adam(
            bundle.guided_parameters(), lr=cfg.optimizer.lr, betas=(cfg.optimizer.beta1, cfg.optimizer.beta2)
        )

        start_step = 0
        if cfg.training.resume_from:
            start_step = self._resume(cfg.training.resume_from, optimizer)

        evaluator = EvaluationService(bundle, batch_size=cfg.training.batch_size, threshold=cfg.probe.iou_threshold)
        self.logger.info(
            f"Guided training ({cfg.mode}, {cfg.decoder.kind} decoder): steps {start_step + 1}..{cfg.training.steps} "
            f"on {len(guided)} records"
        )
        bundle.train()
        for step in range(start_step + 1, cfg.training.steps + 1):
            indices = self._batch_indices("batch", step, len(guided), cfg.training.batch_size)
            breakdown = self._guided_step([guided[i] for i in indices], [segments[i] for i in indices], step)
            self._check_finite(breakdown.total, step)
            optimizer.zero_grad()
            breakdown.total.backward()
            optimizer.step()

            if step % cfg.training.log_every == 0 or step == cfg.training.steps:
                scalars = breakdown.as_floats()
                self.run.append_metrics(step, "train", scalars)
                self.logger.info(
                    f"Step {step}/{cfg.training.steps}: total={scalars['total']:.5f} mse={scalars['mse']:.5f} "
                    f"bce={scalars['bce']:.5f} matched={int(scalars['matched_slots'])}"
                )
            if validation and (step % cfg.training.eval_every == 0 or step == cfg.training.steps):
                report = evaluator.evaluate(validation)
                self.run.append_metrics(step, "val", report.scalars())
                bundle.train()
            if step % cfg.training.checkpoint_every == 0 and step < cfg.training.steps:
                self._checkpoint(step, list(bundle.modules()), optimizer)

        if validation and cfg.training.overlay_count > 0:
            self.save_qualitative(validation, evaluator)
        return self._checkpoint(cfg.training.steps, list(bundle.modules()), optimizer)

    def _guided_step(self, records, segment_sets, step: int):
        cfg = self.config
        bundle = self.bundle
        images = self._images(records)
        features = bundle.encode(images, [r.record_id for r in records])
        slots, attn = bundle.slot_attention(features, generator=torch_generator(cfg.seed, "slots", step))
        masks = upsample_slot_masks(attn.values, features.spatial, tuple(images.shape[-2:]))

        if cfg.decoder.kind == "broadcast":
            reconstruction, _ = broadcast_decode(bundle.broadcast_decoder, slots.slots)
            mse = reconstruction_mse(images, reconstruction)
        else:
            latents = bundle.latent_map.encode(images)
            generator = torch_generator(cfg.seed, "train-noise", step)
            t = torch.randint(1, bundle.schedule.T + 1, (latents.shape[0],), generator=generator)
            noise = torch.randn(latents.shape, generator=generator, dtype=latents.dtype).to(latents.device)
            mse, _ = diffusion_train_step(
                bundle.denoiser, latents, bundle.embedder.slot_tokens(slots.slots), t, noise, bundle.schedule
            )

        return batch_total_loss(
            images,
            mse,
            masks,
            segment_sets,
            mse_weight=cfg.loss.mse_weight,
            bce_weight=cfg.loss.bce_weight,
            eps=cfg.loss.bce_eps,
        )

    def _resume(self, path: str, optimizer: torch.optim.Optimizer) -> int:
        checkpoint = load_checkpoint(path)
        if checkpoint.config_hash != self.config.config_hash:
            self.logger.warning(
                f"Resuming from checkpoint of config {checkpoint.config_hash}, run config is {self.config.config_hash}"
            )
        self.bundle.load_checkpoint(checkpoint)
        if checkpoint.optimizer is not None:
            optimizer.load_state_dict(checkpoint.optimizer)
        self.run.truncate_metrics_after(checkpoint.step)
        self.last_checkpoint = checkpoint.path
        self.logger.info(f"Resumed from {path} at step {checkpoint.step}")
        return checkpoint.step

    def save_qualitative(self, records: Sequence[SampleRecord], evaluator: Optional[EvaluationService] = None) -> int:
        """Store image, ground truth, pseudo mask and slot masks for the first few records."""
        evaluator = evaluator or EvaluationService(self.bundle, batch_size=self.config.training.batch_size)
        chosen = list(records)[: self.config.training.overlay_count]
        pseudo = {}
        for record, (_, mask) in zip([r for r, _ in self._prompts(chosen)], self.rendered_pseudo_masks(chosen)):
            pseudo[record.record_id] = mask.labels
        pseudo_masks = [pseudo.get(r.record_id, torch.zeros(r.image_size, dtype=torch.long)) for r in chosen]
        panels = evaluator.qualitative(chosen, len(chosen), pseudo_masks)
        for index, sample in enumerate(panels):
            self.run.save_qualitative(index, sample)
        self.logger.info(f"Saved {len(panels)} qualitative samples")
        return len(panels)


def _generated_record(record_id: str, image: torch.Tensor, mask: SemanticMask, prompt: PromptSpec) -> SampleRecord:
    return SampleRecord(
        record_id=record_id,
        image=TensorFile.from_tensor(image.float(), name="image", dtype="float32"),
        class_set=prompt.class_set,
        semantic_mask=TensorFile.from_tensor(mask.labels, name="semantic", dtype="int32"),
        caption=prompt.caption,
        provenance="generated",
    )


def _cpu_stack(stack: AttnStack) -> AttnStack:
    return AttnStack(
        cross=[c.detach().float().cpu() for c in stack.cross],
        self_=[s.detach().float().cpu() for s in stack.self_],
        meta=stack.meta,
    )


# ==================== ENTRY POINTS ====================


def phase1_pretrain_decoder(
    config: RunConfig, corpus: Sequence[SampleRecord], run_dir: Union[str, Path], bundle: Optional[ModelBundle] = None
) -> Checkpoint:
    bundle = bundle or create_bundle(config)
    run = RunRepository(run_dir).create()
    run.save_config(config)
    return TrainingService(config, bundle, run).pretrain_decoder(corpus)


def phase2_generate_guided_set(
    config: RunConfig,
    decoder_checkpoint: Union[str, Checkpoint],
    sources: Sequence[SampleRecord],
    n: int,
    out_dir: Union[str, Path],
    bundle: Optional[ModelBundle] = None,
) -> str:
    bundle = bundle or create_bundle(config)
    checkpoint = decoder_checkpoint
    if isinstance(decoder_checkpoint, (str, Path)):
        checkpoint = load_checkpoint(decoder_checkpoint)
    bundle.load_checkpoint(checkpoint)
    run = RunRepository(Path(out_dir).parent)
    return TrainingService(config, bundle, run).generate_guided_set(sources, n, out_dir)


def train_guided(
    config: RunConfig,
    guided: Sequence[SampleRecord],
    run_dir: Union[str, Path],
    validation: Sequence[SampleRecord] = (),
    pretrained: Optional[Union[str, Checkpoint]] = None,
    bundle: Optional[ModelBundle] = None,
) -> Checkpoint:
    bundle = bundle or create_bundle(config)
    if pretrained is not None:
        checkpoint = load_checkpoint(pretrained) if isinstance(pretrained, (str, Path)) else pretrained
        bundle.load_checkpoint(checkpoint)
    run = RunRepository(run_dir).create()
    run.save_config(config)
    return TrainingService(config, bundle, run).train_guided(guided, validation)


__all__ = ["TrainingService", "phase1_pretrain_decoder", "phase2_generate_guided_set", "train_guided"]
