"""
Evaluation of a trained model on records with ground-truth masks.

Runs the encoder and slot attention in fixed-seed batches and feeds the slot masks to
the metric accumulator, the probe sample collector, the Fréchet feature distance and
the qualitative sample store.
"""

from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence

import numpy as np
import torch

from guided_slots.factory import ModelBundle
from guided_slots.logger import get_logger
from guided_slots.models.masks import SemanticMask
from guided_slots.models.records import SampleRecord
from guided_slots.models.reports import EvalReport
from guided_slots.networks.encoder import ToyEncoder
from guided_slots.networks.slot_attention import slot_masks as upsample_slot_masks
from guided_slots.services.decoder_service import broadcast_decode, reconstruct_from_slots
from guided_slots.services.metric_service import EvalAccumulator, class_masks, frechet_distance, predicted_partition
from guided_slots.services.probe_service import ProbeSamples, match_objects
from guided_slots.utils.seeding import derive_seed, torch_generator


@dataclass
class SlotOutput:
    """Slots and image-resolution masks of one record."""

    record: SampleRecord
    slots: torch.Tensor
    masks: torch.Tensor

    @property
    def partition(self) -> torch.Tensor:
        return predicted_partition(self.masks)


class EvaluationService:
    """
    Metrics for a model bundle.

    Slot initialisation noise for batch k comes from ``(seed, "eval", k)``, so repeated
    evaluations of the same checkpoint give identical reports.
    """

    def __init__(self, bundle: ModelBundle, batch_size: int = 16, seed: Optional[int] = None, threshold: float = 0.5):
        self.bundle = bundle
        self.batch_size = batch_size
        self.seed = bundle.config.seed if seed is None else seed
        self.threshold = threshold
        self.logger = get_logger(__name__)

    # ==================== FORWARD ====================

    def _images(self, records: Sequence[SampleRecord]) -> torch.Tensor:
        dtype = self.bundle.config.torch_dtype
        return torch.stack([r.image_tensor() for r in records]).to(self.bundle.device, dtype)

    @torch.no_grad()
    def slot_outputs(self, records: Sequence[SampleRecord]) -> Iterator[SlotOutput]:
        """Yield slots and masks record by record, computed in batches."""
        self.bundle.eval()
        for batch_index, start in enumerate(range(0, len(records), self.batch_size)):
            batch = list(records[start : start + self.batch_size])
            images = self._images(batch)
            features = self.bundle.encode(images, [r.record_id for r in batch])
            generator = torch_generator(self.seed, "eval", batch_index)
            slots, attn = self.bundle.slot_attention(features, generator=generator)
            masks = upsample_slot_masks(attn.values, features.spatial, tuple(images.shape[-2:]))
            for i, record in enumerate(batch):
                yield SlotOutput(record=record, slots=slots.slots[i].cpu(), masks=masks[i].cpu())

    # ==================== METRICS ====================

    def evaluate(self, records: Sequence[SampleRecord], with_frechet: bool = False) -> EvalReport:
        """
        Object-discovery metrics over records that carry semantic masks.

        Raises:
            ValueError: If no record has a semantic mask
        """
        records = [r for r in records if r.semantic_mask is not None]
        if not records:
            raise ValueError("evaluation needs records with semantic masks")
        accumulator = EvalAccumulator(threshold=self.threshold)
        for output in self.slot_outputs(records):
            instances = output.record.instance_tensor()
            accumulator.update(
                output.masks,
                SemanticMask(output.record.semantic_tensor()),
                list(instances) if instances is not None else None,
            )
        frechet = self.frechet(records) if with_frechet else None
        report = accumulator.report(frechet=frechet)
        self.logger.info(
            f"Evaluated {report.n_images} images: mIoU={report.miou:.3f} mBO_i={report.mbo_i:.3f} "
            f"CorLoc={report.corloc:.3f} DetRate={report.detrate:.3f}"
        )
        return report

    # ==================== RECONSTRUCTION ====================

    @torch.no_grad()
    def reconstruct(self, records: Sequence[SampleRecord]) -> torch.Tensor:
        """Slot-conditioned reconstructions from the run's decoder backend."""
        bundle = self.bundle
        outputs = []
        for batch_index, start in enumerate(range(0, len(records), self.batch_size)):
            batch = list(records[start : start + self.batch_size])
            images = self._images(batch)
            features = bundle.encode(images, [r.record_id for r in batch])
            slots, _ = bundle.slot_attention(features, generator=torch_generator(self.seed, "eval", batch_index))
            if bundle.config.decoder.kind == "broadcast":
                recon, _ = broadcast_decode(bundle.broadcast_decoder, slots.slots)
            else:
                recon = reconstruct_from_slots(
                    bundle.config.decoder.kind,
                    bundle.denoiser,
                    bundle.embedder,
                    slots.slots,
                    bundle.schedule,
                    torch_generator(self.seed, "reconstruct", batch_index),
                    bundle.latent_shape,
                    bundle.latent_map,
                )
            outputs.append(recon.cpu())
        return torch.cat(outputs)

    def _feature_encoder(self) -> ToyEncoder:
        if isinstance(self.bundle.encoder, ToyEncoder):
            return self.bundle.encoder
        # External features only exist for the original images; use a fixed random toy encoder
        # Image sides are multiples of 4 (four times the latent side)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(self.seed, "frechet-encoder"))
            encoder = ToyEncoder(d_input=64, stride=4)
        return encoder.to(self.bundle.device, self.bundle.config.torch_dtype).eval()

    @torch.no_grad()
    def pooled_features(self, images: torch.Tensor) -> np.ndarray:
        """Mean-pooled encoder features, one row per image."""
        encoder = self._feature_encoder()
        rows = []
        for start in range(0, images.shape[0], self.batch_size):
            batch = images[start : start + self.batch_size].to(self.bundle.device, self.bundle.config.torch_dtype)
            rows.append(encoder(batch).features.mean(dim=-2).cpu().double())
        return torch.cat(rows).numpy()

    def frechet(self, records: Sequence[SampleRecord]) -> float:
        """Fréchet feature distance between the records' images and their reconstructions."""
        renders = self._images(records).cpu()
        reconstructions = self.reconstruct(records)
        distance = frechet_distance(self.pooled_features(renders), self.pooled_features(reconstructions))
        self.logger.info(f"Frechet feature distance over {len(records)} images: {distance:.4f}")
        return distance

    # ==================== PROBE DATA ====================

    def probe_samples(
        self, records: Sequence[SampleRecord], iou_threshold: float = 0.5, semantic_fallback: bool = False
    ) -> ProbeSamples:
        """
        Slot/label pairs for the property probe.

        Objects are instances, or class masks when ``semantic_fallback`` is set or a record
        has no instance masks.
        """
        samples = ProbeSamples()
        for output in self.slot_outputs(records):
            record = output.record
            instances = record.instance_tensor()
            if semantic_fallback or instances is None:
                if record.semantic_mask is None:
                    continue
                gt = SemanticMask(record.semantic_tensor())
                masks, labels = class_masks(gt), list(gt.class_ids)
            else:
                masks, labels = list(instances), list(record.instance_labels)
            samples.add(match_objects(output.slots, output.partition, masks, labels, iou_threshold))
        return samples

    # ==================== QUALITATIVE ====================

    def qualitative(
        self, records: Sequence[SampleRecord], count: int, pseudo_masks: Optional[Sequence[torch.Tensor]] = None
    ) -> List[dict]:
        """
        Panels for the first ``count`` records: image, ground truth, pseudo mask and slot masks.

        Missing masks are rendered as all-background panels.
        """
        panels = []
        for k, output in enumerate(self.slot_outputs(list(records)[:count])):
            record = output.record
            height, width = record.image_size
            empty = torch.zeros(height, width, dtype=torch.long)
            gt = record.semantic_tensor() if record.semantic_mask is not None else empty
            pseudo = pseudo_masks[k] if pseudo_masks is not None and k < len(pseudo_masks) else empty
            panels.append(
                {
                    "image": record.image_tensor(),
                    "gt_mask": gt,
                    "pseudo_mask": pseudo,
                    "slot_masks": output.masks.float(),
                }
            )
        return panels


__all__ = ["EvaluationService", "SlotOutput"]
