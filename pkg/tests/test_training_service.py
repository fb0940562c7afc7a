"""End-to-end training phases on a tiny configuration."""

import dataclasses

import pytest
import torch

from guided_slots.exceptions import NoGuidableClassesError, NumericalFailureError
from guided_slots.factory import create_bundle
from guided_slots.repositories.dataset_repository import read_dataset
from guided_slots.repositories.run_repository import RunRepository, load_checkpoint
from guided_slots.repositories.tensor_repository import read_attn_stack
from guided_slots.services.evaluation_service import EvaluationService
from guided_slots.services.training_service import TrainingService, phase1_pretrain_decoder

pytestmark = pytest.mark.integration


@pytest.fixture
def service(tiny_config, bundle, run) -> TrainingService:
    return TrainingService(tiny_config, bundle, run)


def _state_equal(a, b) -> bool:
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


class TestPretrain:
    def test_logs_training_and_held_out_losses(self, service, corpus, run):
        checkpoint = service.pretrain_decoder(corpus)
        rows = run.read_metrics()
        assert [r["step"] for r in rows if r["split"] == "pretrain"] == [1, 2]
        assert [r["step"] for r in rows if r["split"] == "heldout"] == [0, 2]
        assert set(checkpoint.modules) == {"denoiser", "embedder"}
        assert load_checkpoint(checkpoint.path).step == 2

    def test_empty_corpus(self, service):
        with pytest.raises(ValueError):
            service.pretrain_decoder([])

    def test_entry_point_saves_config(self, tiny_config, corpus, tmp_path):
        phase1_pretrain_decoder(tiny_config, corpus, tmp_path / "p1")
        assert RunRepository(tmp_path / "p1").config_path.exists()


class TestGuidedSet:
    def test_generated_records_carry_pseudo_masks(self, service, corpus, tmp_path):
        manifest = service.generate_guided_set(
            corpus, 5, tmp_path / "guided", stack_dir=tmp_path / "stacks", keep_stacks=2
        )
        dataset = read_dataset(manifest)
        assert dataset.split == "generated"
        assert [r.record_id for r in dataset.records] == [f"gen_{k:06d}" for k in range(5)]
        for record in dataset.records:
            assert record.provenance == "generated"
            present = set(torch.unique(record.semantic_tensor()).tolist()) - {0}
            assert present <= set(record.class_set)
        assert (tmp_path / "stacks" / "gen_000001").exists()
        assert not (tmp_path / "stacks" / "gen_000002").exists()
        assert len(read_attn_stack(tmp_path / "stacks" / "gen_000000").cross) == 2 * 4

    def test_generation_is_reproducible(self, tiny_config, corpus, tmp_path):
        manifests = []
        for name in ("a", "b"):
            service = TrainingService(tiny_config, create_bundle(tiny_config), RunRepository(tmp_path / name))
            manifests.append(service.generate_guided_set(corpus, 3, tmp_path / name / "guided"))
        assert read_dataset(manifests[0]).records == read_dataset(manifests[1]).records

    def test_sources_without_guidable_classes(self, service, corpus, tmp_path):
        silent = [dataclasses.replace(r, caption="nothing here") for r in corpus[:2]]
        with pytest.raises(NoGuidableClassesError):
            service.generate_guided_set(silent, 2, tmp_path / "guided")

    def test_rendered_guided_records(self, service, corpus):
        guided = service.rendered_guided_set(corpus[:4])
        assert len(guided) == 4
        assert all(r.provenance == "rendered" and r.semantic_mask is not None for r in guided)


class TestGuidedTraining:
    def test_trains_on_generated_set(self, service, corpus, run, tmp_path):
        guided = read_dataset(service.generate_guided_set(corpus, 4, tmp_path / "guided")).records
        checkpoint = service.train_guided(guided, validation=corpus[:3])
        assert checkpoint.step == 4
        rows = run.read_metrics()
        assert [r["step"] for r in rows if r["split"] == "train"] == [1, 2, 3, 4]
        assert [r["step"] for r in rows if r["split"] == "val"] == [2, 4]
        assert len(run.load_qualitative()) == 1
        assert run.latest_checkpoint().endswith("step_000004.pt")

    def test_generated_runs_reject_rendered_pixels(self, service, corpus):
        with pytest.raises(ValueError, match="rendered"):
            service.train_guided(corpus)

    def test_resume_continues_identically(self, tiny_config, corpus, tmp_path):
        config = tiny_config.with_overrides({"train_on": "rendered"})
        guided = TrainingService(config, create_bundle(config), RunRepository(tmp_path / "g")).rendered_guided_set(
            corpus
        )

        full = TrainingService(config, create_bundle(config), RunRepository(tmp_path / "full").create())
        final = full.train_guided(guided)
        halfway = RunRepository(tmp_path / "full").checkpoint_path(2)

        resumed_config = config.with_overrides({"training": {"resume_from": str(halfway)}})
        resumed = TrainingService(resumed_config, create_bundle(resumed_config), RunRepository(tmp_path / "r").create())
        final_resumed = resumed.train_guided(guided)

        for name, state in final.modules.items():
            assert _state_equal(state, final_resumed.modules[name]), name
        train_rows = lambda repo: [r for r in repo.read_metrics() if r["step"] > 2]  # noqa: E731
        assert train_rows(resumed.run) == train_rows(full.run)

    def test_non_finite_loss_stops_training(self, tiny_config, corpus, mocker, tmp_path):
        config = tiny_config.with_overrides({"train_on": "rendered"})
        service = TrainingService(config, create_bundle(config), RunRepository(tmp_path / "nan").create())
        guided = service.rendered_guided_set(corpus)
        mocker.patch(
            "guided_slots.services.training_service.reconstruction_mse",
            return_value=torch.tensor(float("nan"), requires_grad=True),
        )
        with pytest.raises(NumericalFailureError) as info:
            service.train_guided(guided)
        assert info.value.step == 1
        assert info.value.last_checkpoint is None

    def test_diffusion_decoder_backend(self, tiny_config, corpus, tmp_path):
        config = tiny_config.with_overrides({"train_on": "rendered", "decoder": {"kind": "diffusion"}})
        service = TrainingService(config, create_bundle(config), RunRepository(tmp_path / "d").create())
        checkpoint = service.train_guided(service.rendered_guided_set(corpus[:6]))
        assert checkpoint.step == config.training.steps

    def test_unguided_mode_has_no_guidance_term(self, tiny_config, corpus, tmp_path):
        config = tiny_config.with_overrides({"train_on": "rendered", "mode": "unguided"})
        service = TrainingService(config, create_bundle(config), RunRepository(tmp_path / "u").create())
        service.train_guided(service.rendered_guided_set(corpus))
        rows = [r for r in service.run.read_metrics() if r["split"] == "train"]
        assert all(r["bce"] == 0.0 and r["matched_slots"] == 0.0 for r in rows)


class TestEvaluationService:
    def test_repeated_evaluation_is_identical(self, bundle, corpus):
        evaluator = EvaluationService(bundle, batch_size=5)
        first, second = evaluator.evaluate(corpus), evaluator.evaluate(corpus)
        assert first == second
        assert first.n_images == len(corpus)
        assert 0.0 <= first.miou <= 1.0

    def test_frechet_distance_is_reported(self, bundle, corpus):
        report = EvaluationService(bundle, batch_size=4).evaluate(corpus[:6], with_frechet=True)
        assert report.frechet is not None and report.frechet >= 0.0

    def test_fixed_feature_encoder_leaves_global_rng_alone(self, bundle):
        bundle.encoder = torch.nn.Identity()
        evaluator = EvaluationService(bundle)
        before = torch.random.get_rng_state()
        first = evaluator._feature_encoder()
        assert torch.equal(torch.random.get_rng_state(), before)
        for a, b in zip(first.parameters(), evaluator._feature_encoder().parameters()):
            assert torch.equal(a, b)

    def test_records_without_masks(self, bundle, corpus):
        bare = [corpus[0].__class__(record_id="x", image=corpus[0].image, class_set=())]
        with pytest.raises(ValueError):
            EvaluationService(bundle).evaluate(bare)

    def test_probe_samples_and_qualitative_panels(self, bundle, corpus):
        evaluator = EvaluationService(bundle, batch_size=4)
        samples = evaluator.probe_samples(corpus, iou_threshold=0.0)
        assert samples.n_objects == sum(len(r.instance_labels or ()) for r in corpus)
        panels = evaluator.qualitative(corpus, 2)
        assert len(panels) == 2
        assert set(panels[0]) == {"image", "gt_mask", "pseudo_mask", "slot_masks"}
        assert panels[0]["slot_masks"].shape == (3, 32, 32)


class TestFactory:
    def test_same_config_same_parameters(self, tiny_config):
        a, b = create_bundle(tiny_config), create_bundle(tiny_config)
        for name, state in a.state_dicts().items():
            assert _state_equal(state, b.state_dicts()[name]), name

    def test_building_leaves_global_rng_alone(self, tiny_config):
        before = torch.random.get_rng_state()
        create_bundle(tiny_config)
        assert torch.equal(torch.random.get_rng_state(), before)

    def test_guided_parameters_leave_denoiser_frozen(self, bundle):
        bundle.freeze_for_guided_training()
        ids = {id(p) for p in bundle.guided_parameters()}
        assert not any(id(p) in ids for p in bundle.denoiser.parameters())
        assert not any(p.requires_grad for p in bundle.denoiser.parameters())
        assert all(id(p) in ids for p in bundle.slot_attention.parameters())

    def test_checkpoint_round_trip(self, bundle, run, tiny_config):
        service = TrainingService(tiny_config, bundle, run)
        checkpoint = service._checkpoint(1, list(bundle.modules()))
        fresh = create_bundle(tiny_config.with_overrides({"seed": 9}))
        assert set(fresh.load_checkpoint(load_checkpoint(checkpoint.path))) == set(bundle.modules())
        for name, state in bundle.state_dicts().items():
            assert _state_equal(state, fresh.state_dicts()[name])
