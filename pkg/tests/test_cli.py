"""Command-line commands and exit codes."""

from pathlib import Path

import pytest
import torch

from guided_slots.cli import EXIT_CONFIG, EXIT_ERROR, EXIT_NUMERIC, EXIT_OK, main
from guided_slots.config import RunConfig
from guided_slots.exceptions import NumericalFailureError
from guided_slots.models.diffusion import AttnStack, AttnStackMeta
from guided_slots.repositories.dataset_repository import read_dataset
from guided_slots.repositories.tensor_repository import TENSOR_SUFFIX, read_tensor, write_attn_stack

from .conftest import TINY_OVERRIDES


@pytest.fixture
def config_file(tmp_path) -> str:
    return RunConfig(**TINY_OVERRIDES).save(str(tmp_path / "tiny.json"))


@pytest.mark.unit
class TestExitCodes:
    def test_gendata_writes_corpus(self, config_file, tmp_path):
        out = tmp_path / "corpus"
        assert main(["gendata", "--config", config_file, "--out", str(out), "--n", "4"]) == EXIT_OK
        dataset = read_dataset(out)
        assert len(dataset.records) == 4
        assert dataset.records[0].image_size == (32, 32)

    def test_invalid_flag_value(self, tmp_path):
        argv = ["gendata", "--out", str(tmp_path / "c"), "--n", "2", "--image-size", "36"]
        assert main(argv) == EXIT_CONFIG

    def test_invalid_config_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"slots": {"count": 0}}', encoding="utf-8")
        assert main(["gendata", "--config", str(path), "--out", str(tmp_path / "c"), "--n", "2"]) == EXIT_CONFIG

    def test_plot_on_missing_run(self, tmp_path):
        assert main(["plot", "--run-dir", str(tmp_path / "missing")]) == EXIT_ERROR

    def test_numerical_failure(self, mocker, tmp_path):
        mocker.patch(
            "guided_slots.cli.emit_plots", side_effect=NumericalFailureError(step=3, last_checkpoint="step_000002.pt")
        )
        assert main(["plot", "--run-dir", str(tmp_path)]) == EXIT_NUMERIC

    def test_mask_from_attention_stack(self, config_file, tmp_path):
        cross_a = torch.zeros(2, 2, 3)
        cross_a[0, 0, 1] = 1.0
        cross_b = torch.rand(4, 4, 3)
        stack = AttnStack(
            cross=[cross_a, cross_b],
            self_=[torch.eye(4), torch.eye(16)],
            meta=AttnStackMeta(timesteps=[1, 1], resolutions=[(2, 2), (4, 4)], token_class_ids=(-1, 3, 1)),
        )
        write_attn_stack(stack, tmp_path / "stack")
        out = tmp_path / "mask"
        argv = ["genmasks", "--config", config_file, "--attn-dir", str(tmp_path / "stack")]
        argv += ["--classes", "1,3", "--image-size", "8", "--out", str(out)]
        assert main(argv) == EXIT_OK
        labels = read_tensor(out / f"pseudo_mask{TENSOR_SUFFIX}").to_tensor()
        assert labels.shape == (8, 8)
        assert set(labels.unique().tolist()) <= {0, 1, 3}
        assert (out / "pseudo_mask.png").exists()

    def test_attention_stack_needs_classes(self, config_file, tmp_path):
        argv = ["genmasks", "--config", config_file, "--attn-dir", str(tmp_path), "--out", str(tmp_path / "m")]
        assert main(argv) == EXIT_ERROR


@pytest.mark.integration
def test_full_pipeline(config_file, tmp_path):
    corpus, pretrain_dir, train_dir = tmp_path / "corpus", tmp_path / "pretrain", tmp_path / "train"
    common = ["--config", config_file, "--device", "cpu"]

    assert main(["gendata", *common, "--out", str(corpus), "--n", "12"]) == EXIT_OK
    assert main(["pretrain", *common, "--corpus", str(corpus), "--run-dir", str(pretrain_dir), "--steps", "2"]) == 0
    decoder = pretrain_dir / "checkpoints" / "step_000002.pt"
    assert decoder.exists()

    guided = pretrain_dir / "guided"
    argv = ["genmasks", *common, "--checkpoint", str(decoder), "--corpus", str(corpus), "--n", "4"]
    assert main(argv + ["--out", str(guided), "--keep-stacks", "1", "--overlays", "1"]) == EXIT_OK
    assert len(read_dataset(guided).records) == 4
    assert (guided / "stacks" / "gen_000000").exists()

    argv = ["train", *common, "--corpus", str(corpus), "--guided", str(guided), "--pretrained", str(decoder)]
    assert main(argv + ["--run-dir", str(train_dir), "--steps", "2"]) == EXIT_OK
    final = train_dir / "checkpoints" / "step_000002.pt"
    assert final.exists()

    argv = ["eval", "--device", "cpu", "--corpus", str(corpus), "--checkpoint", str(final), "--split", "all"]
    assert main(argv + ["--frechet", "--overlays", "1"]) == EXIT_OK
    assert (train_dir / "eval_report.json").exists()

    assert main(["plot", "--run-dir", str(train_dir)]) == EXIT_OK
    assert any(Path(train_dir / "plots").glob("*_total.png"))
