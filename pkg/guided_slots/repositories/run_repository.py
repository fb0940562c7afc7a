"""Run directory: config, metrics log, checkpoints, reports and qualitative samples."""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import torch
from pydantic import BaseModel

from guided_slots.logger import get_logger
from guided_slots.models.reports import Checkpoint
from guided_slots.models.tensors import TensorFile
from guided_slots.repositories.tensor_repository import TENSOR_SUFFIX, read_tensor, write_tensor

CONFIG_NAME = "config.json"
METRICS_NAME = "metrics.jsonl"
CHECKPOINT_DIR = "checkpoints"
QUALITATIVE_DIR = "qualitative"
PLOTS_DIR = "plots"

# Panels of one qualitative sample, in grid column order
QUALITATIVE_PANELS = ("image", "gt_mask", "pseudo_mask", "slot_masks")


class RunRepository:
    """
    Files belonging to one run.

    Layout::

        <run_dir>/config.json
        <run_dir>/metrics.jsonl
        <run_dir>/checkpoints/step_000500.pt
        <run_dir>/qualitative/sample_00_image.gltensor ...
        <run_dir>/plots/<config_hash>_<series>.png
    """

    def __init__(self, run_dir: Union[str, Path]):
        self.run_dir = Path(run_dir)
        self.logger = get_logger(__name__)

    # ==================== LAYOUT ====================

    def create(self) -> "RunRepository":
        self.run_dir.mkdir(parents=True, exist_ok=True)
        return self

    @property
    def config_path(self) -> Path:
        return self.run_dir / CONFIG_NAME

    @property
    def metrics_path(self) -> Path:
        return self.run_dir / METRICS_NAME

    @property
    def plots_dir(self) -> Path:
        return self.run_dir / PLOTS_DIR

    def exists(self) -> bool:
        return self.run_dir.is_dir()

    def is_empty(self) -> bool:
        return not self.exists() or not any(self.run_dir.iterdir())

    # ==================== CONFIG / REPORTS ====================

    def save_config(self, config) -> str:
        return config.save(str(self.config_path))

    def save_report(self, name: str, report: Union[BaseModel, Dict[str, Any]]) -> str:
        """Write a JSON report (EvalReport, ProbeResult or a plain dict) as ``<name>.json``."""
        path = self.run_dir / f"{name}.json"
        self.run_dir.mkdir(parents=True, exist_ok=True)
        if isinstance(report, BaseModel):
            path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
        else:
            path.write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
        self.logger.info(f"Saved report {path}")
        return str(path)

    # ==================== METRICS ====================

    def append_metrics(self, step: int, split: str, scalars: Dict[str, float]) -> None:
        """Append one JSON line ``{"step", "split", **scalars}`` to ``metrics.jsonl``."""
        self.run_dir.mkdir(parents=True, exist_ok=True)
        row = {"step": int(step), "split": split}
        row.update({k: float(v) for k, v in scalars.items()})
        with self.metrics_path.open("a", encoding="utf-8") as handle:
            handle.write(json.dumps(row, sort_keys=True) + "\n")

    def read_metrics(self) -> List[Dict[str, Any]]:
        if not self.metrics_path.exists():
            return []
        rows = []
        for line in self.metrics_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                rows.append(json.loads(line))
        return rows

    def truncate_metrics_after(self, step: int) -> None:
        """Drop rows logged after ``step`` (used when resuming from a checkpoint)."""
        rows = [r for r in self.read_metrics() if r["step"] <= step]
        if self.metrics_path.exists():
            self.metrics_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")

    # ==================== CHECKPOINTS ====================

    def checkpoint_path(self, step: int) -> Path:
        return self.run_dir / CHECKPOINT_DIR / f"step_{step:06d}.pt"

    def save_checkpoint(self, checkpoint: Checkpoint) -> str:
        path = self.checkpoint_path(checkpoint.step)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "modules": checkpoint.modules,
            "optimizer": checkpoint.optimizer,
            "step": checkpoint.step,
            "config_hash": checkpoint.config_hash,
            "config_json": checkpoint.config_json,
            "rng": checkpoint.rng,
        }
        tmp_path = path.with_name(path.name + ".tmp")
        torch.save(payload, tmp_path)
        tmp_path.replace(path)
        checkpoint.path = str(path)
        self.logger.info(f"Saved checkpoint step={checkpoint.step} to {path}")
        return str(path)

    def latest_checkpoint(self) -> Optional[str]:
        directory = self.run_dir / CHECKPOINT_DIR
        if not directory.exists():
            return None
        candidates = sorted(directory.glob("step_*.pt"))
        return str(candidates[-1]) if candidates else None

    # ==================== QUALITATIVE ====================

    def save_qualitative(self, index: int, panels: Dict[str, torch.Tensor]) -> None:
        """Store the tensors of one qualitative sample (see ``QUALITATIVE_PANELS``)."""
        for panel, tensor in panels.items():
            if panel not in QUALITATIVE_PANELS:
                raise ValueError(f"unknown qualitative panel '{panel}'")
            dtype = "int32" if panel.endswith("_mask") else "float32"
            write_tensor(
                TensorFile.from_tensor(tensor, name=panel, dtype=dtype),
                self.run_dir / QUALITATIVE_DIR / f"sample_{index:02d}_{panel}{TENSOR_SUFFIX}",
            )

    def load_qualitative(self) -> List[Dict[str, torch.Tensor]]:
        directory = self.run_dir / QUALITATIVE_DIR
        if not directory.exists():
            return []
        samples: Dict[int, Dict[str, torch.Tensor]] = {}
        for path in sorted(directory.glob(f"sample_*{TENSOR_SUFFIX}")):
            stem = path.name[: -len(TENSOR_SUFFIX)]
            _, index, panel = stem.split("_", 2)
            samples.setdefault(int(index), {})[panel] = read_tensor(path).to_tensor()
        return [samples[i] for i in sorted(samples)]


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Load a checkpoint written by ``RunRepository.save_checkpoint``.

    Raises:
        FileNotFoundError: If the file does not exist
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    return Checkpoint(
        modules=payload["modules"],
        step=int(payload["step"]),
        config_hash=payload["config_hash"],
        config_json=payload["config_json"],
        optimizer=payload.get("optimizer"),
        rng=payload.get("rng") or {},
        path=str(path),
    )


__all__ = ["RunRepository", "load_checkpoint", "QUALITATIVE_PANELS", "METRICS_NAME", "CONFIG_NAME"]
