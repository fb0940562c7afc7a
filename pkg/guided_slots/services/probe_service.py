"""
Linear property probe: predict an object's class from the slot that represents it.

Slots are paired with ground-truth objects by maximum-IoU assignment; only pairs whose
IoU reaches the threshold become probe samples. The detection rate reports how many
objects found a slot.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from guided_slots.exceptions import NoMatchedSlotsError
from guided_slots.logger import get_logger
from guided_slots.models.reports import ProbeResult
from guided_slots.services.matching_service import hungarian, region_iou_matrix
from guided_slots.utils.seeding import derive_seed


@dataclass
class ProbeSamples:
    """Matched (slot, class id) pairs plus the number of objects considered."""

    features: List[torch.Tensor] = field(default_factory=list)
    labels: List[int] = field(default_factory=list)
    n_objects: int = 0

    def __len__(self) -> int:
        return len(self.labels)

    def add(self, other: "ProbeSamples") -> None:
        self.features.extend(other.features)
        self.labels.extend(other.labels)
        self.n_objects += other.n_objects

    @property
    def detrate(self) -> float:
        return len(self) / self.n_objects if self.n_objects else 0.0

    def tensors(self) -> Tuple[torch.Tensor, torch.Tensor]:
        if not self.labels:
            raise NoMatchedSlotsError("no matched slots")
        return torch.stack(self.features), torch.tensor(self.labels, dtype=torch.long)


def match_objects(
    slots: torch.Tensor,
    partition: torch.Tensor,
    object_masks: Sequence[torch.Tensor],
    object_labels: Sequence[int],
    iou_threshold: float = 0.5,
) -> ProbeSamples:
    """
    Pair slots with objects for one image.

    Args:
        slots: (O, d) slot vectors
        partition: (H, W) argmax slot index map
        object_masks: Boolean (H, W) masks
        object_labels: Class id per object
        iou_threshold: Minimum IoU for a pair to count
    """
    if len(object_masks) != len(object_labels):
        raise ValueError(f"{len(object_masks)} object masks but {len(object_labels)} labels")
    samples = ProbeSamples(n_objects=len(object_masks))
    if not object_masks:
        return samples
    num_slots = slots.shape[0]
    regions = partition.unsqueeze(0) == torch.arange(num_slots, device=partition.device)[:, None, None]
    iou = region_iou_matrix(regions, torch.stack([m.bool() for m in object_masks]))
    for i, j in hungarian(-iou).pairs:
        if iou[i, j] >= iou_threshold:
            samples.features.append(slots[i].detach().cpu())
            samples.labels.append(int(object_labels[j]))
    return samples


class LinearProbe(nn.Module):
    """Single linear layer from slot space to class logits (class id c is logit c - 1)."""

    def __init__(self, d_slots: int, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.linear = nn.Linear(d_slots, num_classes)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.linear(features)

    @torch.no_grad()
    def predict(self, features: torch.Tensor) -> torch.Tensor:
        return self.linear(features).argmax(dim=-1) + 1


def _accuracy(probe: LinearProbe, features: torch.Tensor, labels: torch.Tensor) -> float:
    return float((probe.predict(features) == labels).double().mean())


class ProbeService:
    """
    Train and evaluate linear probes on frozen slots.

    Example:
        >>> service = ProbeService(d_slots=64, num_classes=5)
        >>> probe, best_step = service.train(train_samples, val_samples)
        >>> result = service.evaluate(probe, test_samples)
    """

    def __init__(
        self,
        d_slots: int,
        num_classes: int,
        steps: int = 2000,
        lr: float = 1e-2,
        eval_every: int = 200,
        iou_threshold: float = 0.5,
        seed: int = 0,
    ):
        self.d_slots = d_slots
        self.num_classes = num_classes
        self.steps = steps
        self.lr = lr
        self.eval_every = eval_every
        self.iou_threshold = iou_threshold
        self.seed = seed
        self.logger = get_logger(__name__)

    def train(
        self, samples: ProbeSamples, validation: Optional[ProbeSamples] = None
    ) -> Tuple[LinearProbe, Optional[int]]:
        """
        Full-batch cross-entropy training with Adam.

        When validation samples exist, the weights from the step with the best validation
        accuracy are kept (earliest step on ties).

        Returns:
            (probe, selected step or None)

        Raises:
            NoMatchedSlotsError: If there are no training samples
        """
        features, labels = samples.tensors()
        if int(labels.min()) < 1 or int(labels.max()) > self.num_classes:
            raise ValueError(f"probe labels must lie in 1..{self.num_classes}")
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(self.seed, "probe"))
            probe = LinearProbe(features.shape[-1], self.num_classes).to(features.dtype)
        optimizer = torch.optim.Adam(probe.parameters(), lr=self.lr)

        val = validation.tensors() if validation is not None and len(validation) else None
        best_state, best_step, best_acc = None, None, -1.0
        for step in range(1, self.steps + 1):
            optimizer.zero_grad()
            loss = F.cross_entropy(probe(features), labels - 1)
            loss.backward()
            optimizer.step()
            if val is not None and (step % self.eval_every == 0 or step == self.steps):
                acc = _accuracy(probe, *val)
                if acc > best_acc:
                    best_acc, best_step = acc, step
                    best_state = {k: v.clone() for k, v in probe.state_dict().items()}
                self.logger.debug(f"Probe step {step}: loss={float(loss):.4f} val_acc={acc:.3f}")

        if best_state is not None:
            probe.load_state_dict(best_state)
        self.logger.info(f"Trained probe on {len(samples)} slots (selected step {best_step})")
        return probe, best_step

    def evaluate(self, probe: LinearProbe, samples: ProbeSamples, best_step: Optional[int] = None) -> ProbeResult:
        """
        Raises:
            NoMatchedSlotsError: If no slot matched an object
        """
        features, labels = samples.tensors()
        return ProbeResult(
            top1_accuracy=_accuracy(probe, features.to(probe.linear.weight.dtype), labels),
            detrate=samples.detrate,
            n_matched=len(samples),
            iou_threshold=self.iou_threshold,
            best_step=best_step,
        )

    def run(self, train: ProbeSamples, test: ProbeSamples, validation: Optional[ProbeSamples] = None) -> ProbeResult:
        probe, best_step = self.train(train, validation)
        return self.evaluate(probe, test, best_step)


def sweep_thresholds(
    service: ProbeService,
    collect,
    thresholds: Sequence[float],
) -> List[ProbeResult]:
    """
    Re-run the probe at several IoU thresholds.

    Args:
        service: Configured probe service
        collect: ``collect(threshold) -> (train, test, validation)`` sample sets
        thresholds: IoU thresholds to try

    Returns:
        One result per threshold; thresholds that match nothing give an empty result
    """
    results = []
    for threshold in thresholds:
        train, test, validation = collect(threshold)
        service.iou_threshold = threshold
        try:
            results.append(service.run(train, test, validation))
        except NoMatchedSlotsError:
            service.logger.warning(f"No matched slots at IoU threshold {threshold}")
            results.append(ProbeResult(top1_accuracy=0.0, detrate=0.0, n_matched=0, iou_threshold=threshold))
    return results


__all__ = ["ProbeSamples", "match_objects", "LinearProbe", "ProbeService", "sweep_thresholds"]
