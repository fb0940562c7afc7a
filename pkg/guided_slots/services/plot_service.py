"""
Plots for a run directory: one curve image per logged scalar and a qualitative grid.

File names start with the run's config hash so reruns of one configuration overwrite
the same files.
"""

from pathlib import Path
from typing import Dict, List, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from guided_slots.config import RunConfig  # noqa: E402
from guided_slots.logger import get_logger  # noqa: E402
from guided_slots.repositories.run_repository import RunRepository  # noqa: E402
from guided_slots.utils.image_helpers import (  # noqa: E402
    image_to_pil,
    labels_to_pil,
    make_grid,
    save_png,
    slot_masks_to_pils,
)

logger = get_logger(__name__)

Series = Dict[str, Dict[str, List[Tuple[int, float]]]]


def collect_series(rows: List[dict]) -> Series:
    """Group metric rows into ``{metric: {split: [(step, value), ...]}}`` sorted by step."""
    series: Series = {}
    for row in rows:
        split = row.get("split", "train")
        for key, value in row.items():
            if key in ("step", "split"):
                continue
            series.setdefault(key, {}).setdefault(split, []).append((int(row["step"]), float(value)))
    for splits in series.values():
        for points in splits.values():
            points.sort()
    return series


def run_hash(run: RunRepository) -> str:
    """Config hash of the run, or the directory name when no config was saved."""
    if run.config_path.exists():
        return RunConfig.from_file(str(run.config_path)).config_hash
    return run.run_dir.name


def plot_curve(metric: str, splits: Dict[str, List[Tuple[int, float]]], path: Path) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    for split, points in sorted(splits.items()):
        steps, values = zip(*points)
        ax.plot(steps, values, marker="o" if len(points) < 20 else None, label=split)
    ax.set_xlabel("step")
    ax.set_ylabel(metric)
    ax.set_title(metric)
    ax.grid(True, alpha=0.3)
    ax.legend()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return str(path)


def qualitative_grid(samples: List[dict]):
    """One row per sample: image | ground truth | pseudo mask | one panel per slot mask."""
    rows = []
    for sample in samples:
        row = [image_to_pil(sample["image"])]
        for panel in ("gt_mask", "pseudo_mask"):
            if panel in sample:
                row.append(labels_to_pil(sample[panel]))
        if "slot_masks" in sample:
            row.extend(slot_masks_to_pils(sample["slot_masks"]))
        rows.append(row)
    return make_grid(rows)


def emit_plots(run_dir: Union[str, Path]) -> List[str]:
    """
    Write every plot of a run into ``<run_dir>/plots``.

    Args:
        run_dir: Run directory with ``metrics.jsonl`` and optional qualitative samples

    Returns:
        Paths of the written PNG files (curves first, then the grid)

    Raises:
        FileNotFoundError: If the run directory does not exist or is empty
        ValueError: If no scalars were logged
    """
    run = RunRepository(run_dir)
    if run.is_empty():
        raise FileNotFoundError(f"run directory is missing or empty: {run_dir}")
    rows = run.read_metrics()
    if not rows:
        raise ValueError(f"no logged scalars in {run.metrics_path}")

    prefix = run_hash(run)
    written = []
    for metric, splits in sorted(collect_series(rows).items()):
        written.append(plot_curve(metric, splits, run.plots_dir / f"{prefix}_{metric}.png"))

    samples = run.load_qualitative()
    if samples:
        written.append(save_png(qualitative_grid(samples), run.plots_dir / f"{prefix}_qualitative.png"))

    logger.info(f"Wrote {len(written)} plots to {run.plots_dir}")
    return written


__all__ = ["emit_plots", "collect_series", "plot_curve", "qualitative_grid", "run_hash"]
