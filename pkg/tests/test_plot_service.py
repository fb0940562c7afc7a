"""Training curves and qualitative grids."""

from pathlib import Path

import pytest
import torch

from guided_slots.config import RunConfig
from guided_slots.repositories.run_repository import RunRepository
from guided_slots.services.plot_service import collect_series, emit_plots

pytestmark = pytest.mark.unit


def _log_run(run: RunRepository) -> None:
    run.append_metrics(2, "train", {"mse": 0.2, "bce": 0.5})
    run.append_metrics(1, "train", {"mse": 0.3, "bce": 0.7})
    run.append_metrics(2, "val", {"miou": 0.4})


def _sample():
    generator = torch.Generator().manual_seed(0)
    return {
        "image": torch.rand(3, 8, 8, generator=generator),
        "gt_mask": torch.randint(0, 3, (8, 8), generator=generator),
        "pseudo_mask": torch.zeros(8, 8, dtype=torch.long),
        "slot_masks": torch.rand(2, 8, 8, generator=generator).softmax(0),
    }


def test_series_are_grouped_and_sorted():
    series = collect_series([{"step": 3, "split": "train", "mse": 1.0}, {"step": 1, "split": "train", "mse": 2.0}])
    assert series == {"mse": {"train": [(1, 2.0), (3, 1.0)]}}


def test_one_curve_per_metric_plus_grid(run):
    _log_run(run)
    run.save_qualitative(0, _sample())
    run.save_qualitative(1, _sample())
    written = emit_plots(run.run_dir)
    names = [Path(p).name for p in written]
    assert names == ["run_bce.png", "run_miou.png", "run_mse.png", "run_qualitative.png"]
    assert all(Path(p).stat().st_size > 0 for p in written)


def test_plots_are_prefixed_with_config_hash(run, tiny_config):
    _log_run(run)
    run.save_config(tiny_config)
    written = emit_plots(run.run_dir)
    assert len(written) == 3
    assert all(Path(p).name.startswith(RunConfig.from_file(str(run.config_path)).config_hash) for p in written)


def test_missing_run_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        emit_plots(tmp_path / "nowhere")


def test_empty_run_directory(run):
    with pytest.raises(FileNotFoundError):
        emit_plots(run.run_dir)


def test_run_without_scalars(run, tiny_config):
    run.save_config(tiny_config)
    with pytest.raises(ValueError):
        emit_plots(run.run_dir)
