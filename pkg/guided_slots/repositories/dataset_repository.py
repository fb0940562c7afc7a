"""Dataset persistence: one JSON manifest plus individually stored tensor files."""

from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Union

from guided_slots.exceptions import DuplicateRecordError
from guided_slots.logger import get_logger
from guided_slots.models.records import DatasetManifest, ManifestEntry, SampleRecord
from guided_slots.models.scene import SHAPE_NAMES
from guided_slots.repositories.tensor_repository import TENSOR_SUFFIX, read_tensor, write_tensor
from guided_slots.utils.validators import is_valid_record_id

logger = get_logger(__name__)

MANIFEST_NAME = "manifest.json"
TENSOR_DIR = "tensors"


class Dataset(NamedTuple):
    records: List[SampleRecord]
    class_vocabulary: List[str]
    split: str


def write_dataset(
    records: Sequence[SampleRecord],
    out_dir: Union[str, Path],
    class_vocabulary: Optional[Sequence[str]] = None,
    split: str = "train",
) -> str:
    """
    Persist records under ``out_dir``.

    Args:
        records: Records in the order they should be reloaded
        out_dir: Dataset directory (created)
        class_vocabulary: Class names; id k is ``class_vocabulary[k - 1]``
        split: Split name stored in the manifest

    Returns:
        Path to ``manifest.json``

    Raises:
        DuplicateRecordError: If two records share an id
        ValueError: If a record id is not a safe file name stem
    """
    seen = set()
    for record in records:
        if record.record_id in seen:
            raise DuplicateRecordError(f"duplicate record id: {record.record_id}")
        if not is_valid_record_id(record.record_id):
            raise ValueError(f"record id '{record.record_id}' is not a valid file name stem")
        seen.add(record.record_id)

    out_dir = Path(out_dir)
    (out_dir / TENSOR_DIR).mkdir(parents=True, exist_ok=True)

    entries = []
    for record in records:
        entries.append(_write_record(record, out_dir))

    manifest = DatasetManifest(
        split=split,
        class_vocabulary=list(class_vocabulary if class_vocabulary is not None else SHAPE_NAMES),
        records=entries,
    )
    manifest_path = out_dir / MANIFEST_NAME
    manifest_path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")

    logger.info(f"Wrote dataset '{split}' with {len(entries)} records to {manifest_path}")
    return str(manifest_path)


def read_dataset(manifest_path: Union[str, Path]) -> Dataset:
    """
    Reload a dataset written by ``write_dataset``, preserving record order.

    Raises:
        FileNotFoundError: If the manifest does not exist
        pydantic.ValidationError: If the manifest is malformed
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    manifest = DatasetManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
    root = manifest_path.parent

    records = []
    for entry in manifest.records:
        records.append(
            SampleRecord(
                record_id=entry.record_id,
                image=read_tensor(root / entry.image),
                semantic_mask=read_tensor(root / entry.semantic_mask) if entry.semantic_mask else None,
                instance_masks=read_tensor(root / entry.instance_masks) if entry.instance_masks else None,
                instance_labels=tuple(entry.instance_labels),
                class_set=tuple(entry.class_set),
                caption=entry.caption,
                provenance=entry.provenance,
            )
        )

    logger.debug(f"Loaded {len(records)} records from {manifest_path}")
    return Dataset(records=records, class_vocabulary=list(manifest.class_vocabulary), split=manifest.split)


def _write_record(record: SampleRecord, out_dir: Path) -> ManifestEntry:
    def store(tensor, kind: str) -> Optional[str]:
        if tensor is None:
            return None
        rel = f"{TENSOR_DIR}/{record.record_id}_{kind}{TENSOR_SUFFIX}"
        write_tensor(tensor, out_dir / rel)
        return rel

    return ManifestEntry(
        record_id=record.record_id,
        image=store(record.image, "image"),
        semantic_mask=store(record.semantic_mask, "semantic"),
        instance_masks=store(record.instance_masks, "instances"),
        class_set=list(record.class_set),
        instance_labels=list(record.instance_labels),
        caption=record.caption,
        provenance=record.provenance,
    )


__all__ = ["Dataset", "MANIFEST_NAME", "write_dataset", "read_dataset"]
