"""
Object-discovery metrics.

All metrics work on the hard partition given by the per-pixel argmax over slot masks.
Dataset-level numbers are accumulated with :class:`EvalAccumulator`, which can be
merged across workers.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from scipy import linalg

from guided_slots.models.masks import SemanticMask
from guided_slots.models.reports import EvalReport
from guided_slots.models.scene import BACKGROUND
from guided_slots.services.matching_service import region_iou_matrix

# Share of an object a slot must own to count as one of its pieces
SPLIT_SHARE = 0.2
FRECHET_EPS = 1e-6


def predicted_partition(slot_masks: torch.Tensor) -> torch.Tensor:
    """(O, H, W) masks to an (H, W) slot index map; ties go to the lowest slot."""
    if slot_masks.dim() != 3:
        raise ValueError(f"slot masks must be (O, H, W), got {tuple(slot_masks.shape)}")
    return slot_masks.argmax(dim=0)


def _regions(partition: torch.Tensor, num_slots: int) -> torch.Tensor:
    return partition.unsqueeze(0) == torch.arange(num_slots, device=partition.device)[:, None, None]


def majority_classes(partition: torch.Tensor, gt: SemanticMask, num_slots: int) -> List[int]:
    """
    Label each slot with the most frequent ground-truth class under its region.

    Background counts as a class. Ties go to the lowest class id; empty regions are background.
    """
    if partition.shape != gt.labels.shape:
        raise ValueError(f"partition {tuple(partition.shape)} and labels {tuple(gt.labels.shape)} differ")
    labels = gt.labels.to(partition.device)
    num_labels = int(labels.max()) + 1
    joint = partition.reshape(-1) * num_labels + labels.reshape(-1)
    counts = torch.bincount(joint, minlength=num_slots * num_labels).reshape(num_slots, num_labels)
    classes = counts.argmax(dim=1)
    empty = counts.sum(dim=1) == 0
    return [BACKGROUND if bool(e) else int(c) for c, e in zip(classes, empty)]


def _class_overlaps(predicted: torch.Tensor, labels: torch.Tensor) -> Dict[int, tuple]:
    classes = sorted(set(torch.unique(predicted).tolist()) | set(torch.unique(labels).tolist()))
    out = {}
    for c in classes:
        p, g = predicted == c, labels == c
        out[int(c)] = (int((p & g).sum()), int((p | g).sum()))
    return out


def miou_semantic(
    partition: torch.Tensor,
    gt: SemanticMask,
    num_slots: Optional[int] = None,
    slot_classes: Optional[Sequence[int]] = None,
) -> float:
    """
    Mean IoU over classes after relabelling each slot region with a class.

    Classes absent from both prediction and ground truth do not count; background does.

    Example:
        A prediction that is all background against a half-foreground image scores
        (0.5 + 0) / 2 = 0.25.
    """
    num_slots = num_slots or int(partition.max()) + 1
    if slot_classes is None:
        slot_classes = majority_classes(partition, gt, num_slots)
    lookup = torch.tensor(list(slot_classes), dtype=torch.long, device=partition.device)
    predicted = lookup[partition]
    overlaps = _class_overlaps(predicted, gt.labels.to(partition.device))
    return float(np.mean([i / u for i, u in overlaps.values()]))


def best_overlaps(partition: torch.Tensor, gt_masks: Sequence[torch.Tensor], num_slots: int) -> List[float]:
    """Best IoU any slot region reaches for each ground-truth mask."""
    if len(gt_masks) == 0:
        return []
    regions = _regions(partition, num_slots)
    gts = torch.stack([m.bool().to(partition.device) for m in gt_masks])
    iou = region_iou_matrix(regions, gts)
    return iou.max(axis=0).tolist()


def mbo(partition: torch.Tensor, gt_masks: Sequence[torch.Tensor], num_slots: Optional[int] = None) -> float:
    """
    Mean best overlap: average over ground-truth masks of the best slot-region IoU.

    Raises:
        ValueError: If there are no ground-truth masks
    """
    if len(gt_masks) == 0:
        raise ValueError("mBO needs at least one ground-truth mask")
    num_slots = num_slots or int(partition.max()) + 1
    return float(np.mean(best_overlaps(partition, gt_masks, num_slots)))


def corloc_hit(
    partition: torch.Tensor, gt_masks: Sequence[torch.Tensor], num_slots: int, threshold: float = 0.5
) -> bool:
    """True when some slot region overlaps some object with IoU above ``threshold``."""
    return any(v > threshold for v in best_overlaps(partition, gt_masks, num_slots))


def corloc(hits: Sequence[bool]) -> float:
    """Fraction of images with at least one localised object."""
    if len(hits) == 0:
        raise ValueError("CorLoc needs at least one image")
    return float(np.mean([bool(h) for h in hits]))


def detrate(best_ious: Sequence[float], threshold: float = 0.5) -> float:
    """Fraction of objects whose best slot IoU exceeds ``threshold``."""
    if len(best_ious) == 0:
        raise ValueError("detection rate needs at least one object")
    return float(np.mean([v > threshold for v in best_ious]))


def is_split(partition: torch.Tensor, instance: torch.Tensor, num_slots: int, share: float = SPLIT_SHARE) -> bool:
    """An object is split when two or more slots each own at least ``share`` of its pixels."""
    instance = instance.bool().to(partition.device)
    area = int(instance.sum())
    if area == 0:
        return False
    owned = torch.bincount(partition[instance], minlength=num_slots).double() / area
    return int((owned >= share).sum()) >= 2


def class_masks(gt: SemanticMask) -> List[torch.Tensor]:
    """One boolean mask per foreground class present."""
    return [gt.labels == c for c in gt.class_ids]


def _moments(features: np.ndarray):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    if features.shape[0] < 2:
        raise ValueError("Frechet distance needs at least two samples per set")
    mu = features.mean(axis=0)
    sigma = np.atleast_2d(np.cov(features, rowvar=False))
    return mu, sigma + FRECHET_EPS * np.eye(sigma.shape[0])


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = linalg.eigh((matrix + matrix.T) / 2.0)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def _frechet_one_way(mu1, sigma1, mu2, sigma2) -> float:
    root = _psd_sqrt(sigma1)
    inner = root @ sigma2 @ root
    values = linalg.eigvalsh((inner + inner.T) / 2.0)
    trace_sqrt = float(np.sqrt(np.clip(values, 0.0, None)).sum())
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * trace_sqrt)


def frechet_distance(a: np.ndarray, b: np.ndarray) -> float:
    """
    Fréchet distance between Gaussians fitted to two feature sets (rows are samples).

    ``1e-6 * I`` is added to both covariances. The square-root trace is computed through a
    symmetric eigendecomposition in both argument orders and averaged, so swapping the
    arguments gives the identical value.

    Example:
        >>> rng = np.random.default_rng(0)
        >>> x = rng.normal(size=(500, 2))
        >>> frechet_distance(x, x) < 1e-6
        True

    Raises:
        ValueError: If feature dimensions differ or a set has fewer than two rows
    """
    mu1, sigma1 = _moments(a)
    mu2, sigma2 = _moments(b)
    if mu1.shape != mu2.shape:
        raise ValueError(f"feature dimensions differ: {mu1.shape[0]} and {mu2.shape[0]}")
    forward = _frechet_one_way(mu1, sigma1, mu2, sigma2)
    backward = _frechet_one_way(mu2, sigma2, mu1, sigma1)
    return max(0.0, (forward + backward) / 2.0)


@dataclass
class EvalAccumulator:
    """
    Running sums for dataset-level metrics.

    mIoU pools intersections and unions per class over all images; mBO averages over all
    ground-truth masks. CorLoc and DetRate use the class-level masks.
    """

    threshold: float = 0.5
    intersections: Dict[int, int] = field(default_factory=dict)
    unions: Dict[int, int] = field(default_factory=dict)
    instance_ious: List[float] = field(default_factory=list)
    class_ious: List[float] = field(default_factory=list)
    corloc_hits: List[bool] = field(default_factory=list)
    unsplit_images: int = 0
    images_with_instances: int = 0

    @property
    def n_images(self) -> int:
        return len(self.corloc_hits)

    def update(
        self,
        slot_masks: torch.Tensor,
        gt: SemanticMask,
        instance_masks: Optional[Sequence[torch.Tensor]] = None,
    ) -> None:
        """
        Add one image.

        Args:
            slot_masks: (O, H, W) masks at ground-truth resolution
            gt: Ground-truth semantic mask
            instance_masks: Per-object masks; class masks are used when absent
        """
        num_slots = slot_masks.shape[0]
        partition = predicted_partition(slot_masks)
        lookup = torch.tensor(majority_classes(partition, gt, num_slots), dtype=torch.long, device=partition.device)
        for c, (inter, union) in _class_overlaps(lookup[partition], gt.labels.to(partition.device)).items():
            self.intersections[c] = self.intersections.get(c, 0) + inter
            self.unions[c] = self.unions.get(c, 0) + union

        per_class = class_masks(gt)
        instances = list(instance_masks) if instance_masks is not None and len(instance_masks) else per_class
        best_i = best_overlaps(partition, instances, num_slots)
        best_c = best_overlaps(partition, per_class, num_slots)
        self.instance_ious.extend(best_i)
        self.class_ious.extend(best_c)
        self.corloc_hits.append(any(v > self.threshold for v in best_c))
        if instances:
            self.images_with_instances += 1
            if not any(is_split(partition, m, num_slots) for m in instances):
                self.unsplit_images += 1

    def merge(self, other: "EvalAccumulator") -> "EvalAccumulator":
        merged = EvalAccumulator(threshold=self.threshold)
        for source in (self, other):
            for c, v in source.intersections.items():
                merged.intersections[c] = merged.intersections.get(c, 0) + v
            for c, v in source.unions.items():
                merged.unions[c] = merged.unions.get(c, 0) + v
            merged.instance_ious.extend(source.instance_ious)
            merged.class_ious.extend(source.class_ious)
            merged.corloc_hits.extend(source.corloc_hits)
            merged.unsplit_images += source.unsplit_images
            merged.images_with_instances += source.images_with_instances
        return merged

    def per_class_iou(self) -> Dict[int, float]:
        return {c: self.intersections[c] / self.unions[c] for c in sorted(self.unions) if self.unions[c] > 0}

    def report(self, frechet: Optional[float] = None) -> EvalReport:
        """
        Raises:
            ValueError: If no image was added
        """
        if self.n_images == 0:
            raise ValueError("no images were evaluated")
        per_class = self.per_class_iou()
        return EvalReport(
            miou=float(np.mean(list(per_class.values()))) if per_class else 0.0,
            mbo_i=float(np.mean(self.instance_ious)) if self.instance_ious else 0.0,
            mbo_c=float(np.mean(self.class_ious)) if self.class_ious else 0.0,
            corloc=corloc(self.corloc_hits),
            detrate=detrate(self.class_ious, self.threshold) if self.class_ious else 0.0,
            n_images=self.n_images,
            per_class_iou=per_class,
            no_split_fraction=(
                self.unsplit_images / self.images_with_instances if self.images_with_instances else None
            ),
            frechet=frechet,
        )


__all__ = [
    "predicted_partition",
    "majority_classes",
    "miou_semantic",
    "best_overlaps",
    "mbo",
    "corloc_hit",
    "corloc",
    "detrate",
    "is_split",
    "class_masks",
    "frechet_distance",
    "EvalAccumulator",
]
