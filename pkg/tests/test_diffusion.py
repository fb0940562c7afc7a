"""Noise schedule, toy denoiser, attention capture and sampling."""

import pytest
import torch

from guided_slots.exceptions import BackendMismatchError
from guided_slots.models.diffusion import NO_CLASS, ConditioningTokens, DiffusionSchedule
from guided_slots.networks.diffusion import AttentionStore, ConditioningEmbedder, LatentMap, ToyUNet
from guided_slots.services.decoder_service import diffusion_train_step, generate, q_sample, reconstruct_from_slots

pytestmark = pytest.mark.unit


class CountingDenoiser:
    """Affine stub ``eps_hat = a * x_t + b`` that counts its calls."""

    def __init__(self, a: torch.Tensor, b: torch.Tensor):
        self.a = a
        self.b = b
        self.calls = 0

    def __call__(self, x_t, t, tokens, token_mask=None, store=None):
        self.calls += 1
        return self.a * x_t + self.b


def _cond(batch: int = 2, dtype=torch.float32) -> ConditioningTokens:
    return ConditioningTokens(tokens=torch.zeros(batch, 2, 4, dtype=dtype), source="slots")


@pytest.fixture
def unet():
    torch.manual_seed(0)
    return ToyUNet(latent_channels=4, base_channels=8, d_token=16).eval()


@pytest.fixture
def embedder():
    torch.manual_seed(0)
    return ConditioningEmbedder(num_classes=3, d_token=16, d_slots=6)


class TestSchedule:
    def test_linear_schedule(self):
        schedule = DiffusionSchedule.linear(50)
        assert schedule.T == 50
        assert bool((schedule.betas > 0).all()) and bool((schedule.betas < 1).all())
        assert bool((schedule.alpha_bars[1:] < schedule.alpha_bars[:-1]).all())
        assert schedule.alpha_bar(1) == pytest.approx(1.0 - float(schedule.betas[0]))

    @pytest.mark.parametrize("t", [0, 5])
    def test_timestep_outside_range(self, t):
        with pytest.raises(ValueError):
            DiffusionSchedule.linear(4).check_timestep(t)

    def test_betas_validated(self):
        with pytest.raises(ValueError):
            DiffusionSchedule(torch.tensor([0.5, 1.0]))

    def test_q_sample_closed_form(self):
        schedule = DiffusionSchedule.linear(10)
        x0 = torch.ones(1, 1, 2, 2, dtype=torch.float64)
        noise = torch.full_like(x0, 2.0)
        ab = schedule.alpha_bar(3)
        expected = ab**0.5 * 1.0 + (1.0 - ab) ** 0.5 * 2.0
        assert torch.allclose(q_sample(x0, 3, noise, schedule), torch.full_like(x0, expected))

    def test_q_sample_rejects_bad_timestep(self):
        schedule = DiffusionSchedule.linear(10)
        with pytest.raises(ValueError):
            q_sample(torch.zeros(1, 1, 2, 2), 11, torch.zeros(1, 1, 2, 2), schedule)


class TestLatentMap:
    def test_constant_image_survives_encode_decode(self):
        latent_map = LatentMap(4)
        images = torch.full((1, 3, 16, 16), 0.25)
        latents = latent_map.encode(images)
        assert latents.shape == (1, 4, 4, 4)
        assert torch.allclose(latent_map.decode(latents), images, atol=1e-6)


class TestConditioning:
    def test_prompt_tokens_mask_unnamed_classes(self, embedder):
        cond = embedder.prompt_tokens([(1, 3), (2,)])
        assert cond.token_class_ids == (NO_CLASS, 1, 2, 3)
        assert cond.mask.tolist() == [[True, True, False, True], [True, False, True, False]]
        assert cond.token_index(3) == 3

    def test_out_of_range_class(self, embedder):
        with pytest.raises(ValueError):
            embedder.prompt_tokens([(4,)])

    def test_slot_tokens(self, embedder):
        cond = embedder.slot_tokens(torch.zeros(2, 5, 6))
        assert cond.tokens.shape == (2, 5, 16)
        assert cond.token_class_ids == (NO_CLASS,) * 5

    def test_every_item_needs_a_visible_token(self):
        with pytest.raises(ValueError):
            ConditioningTokens(tokens=torch.zeros(1, 2, 4), source="slots", mask=torch.zeros(1, 2, dtype=torch.bool))


class TestTrainStep:
    def test_attention_is_captured_per_level(self, unet, embedder):
        schedule = DiffusionSchedule.linear(4)
        cond = embedder.prompt_tokens([(1,), (2, 3)])
        x0 = torch.randn(2, 4, 8, 8)
        store = AttentionStore()
        loss, stack = diffusion_train_step(unet, x0, cond, 2, torch.randn_like(x0), schedule, store)
        assert loss.dim() == 0 and bool(torch.isfinite(loss))
        assert len(stack.cross) == ToyUNet.num_attention_levels
        assert stack.meta.timesteps == [2, 2]
        assert stack.meta.resolutions == [(8, 8), (4, 4)]
        assert stack.cross[0].shape == (2, 8, 8, 4)
        assert stack.self_[0].shape == (2, 64, 64)
        # Classes outside a prompt get no attention
        assert float(stack.cross[0][0, ..., 2].abs().max()) == 0.0
        assert float(stack.cross[1][1, ..., 1].abs().max()) == 0.0
        stack.select(0).validate()

    def test_gradient_matches_finite_differences(self):
        schedule = DiffusionSchedule.linear(5)
        generator = torch.Generator().manual_seed(0)
        x0 = torch.randn(3, 2, 2, 2, generator=generator, dtype=torch.float64)
        noise = torch.randn(x0.shape, generator=generator, dtype=torch.float64)
        t = torch.tensor([1, 3, 5])
        cond = _cond(3, torch.float64)

        def loss_of(a, b):
            loss, _ = diffusion_train_step(CountingDenoiser(a, b), x0, cond, t, noise, schedule)
            return loss

        a = torch.tensor(0.3, dtype=torch.float64, requires_grad=True)
        b = torch.tensor(-0.2, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(loss_of, (a, b), eps=1e-6, atol=1e-8, rtol=1e-4)


class TestGenerate:
    def test_single_step_schedule_calls_denoiser_once(self):
        denoiser = CountingDenoiser(torch.tensor(0.0), torch.tensor(0.0))
        images, stack = generate(
            denoiser, _cond(), DiffusionSchedule.linear(1), torch.Generator().manual_seed(0), (4, 4, 4), LatentMap(4)
        )
        assert denoiser.calls == 1
        assert images.shape == (2, 3, 16, 16)
        assert stack is None

    def test_fixed_generator_gives_identical_images(self, unet, embedder):
        schedule = DiffusionSchedule.linear(4)
        cond = embedder.prompt_tokens([(1, 2)])
        runs = [
            generate(unet, cond, schedule, torch.Generator().manual_seed(9), (4, 8, 8), LatentMap(4), capture=True)
            for _ in range(2)
        ]
        assert torch.equal(runs[0][0], runs[1][0])
        stack = runs[0][1]
        assert len(stack.cross) == schedule.T * ToyUNet.num_attention_levels
        assert stack.meta.timesteps == [4, 4, 3, 3, 2, 2, 1, 1]

    def test_slot_reconstruction_needs_diffusion_backend(self, unet, embedder):
        with pytest.raises(BackendMismatchError):
            reconstruct_from_slots(
                "broadcast",
                unet,
                embedder,
                torch.zeros(1, 3, 6),
                DiffusionSchedule.linear(2),
                torch.Generator(),
                (4, 8, 8),
                LatentMap(4),
            )

    def test_identical_slots_identical_reconstruction(self, unet, embedder):
        slots = torch.randn(3, 6)
        out = [
            reconstruct_from_slots(
                "diffusion",
                unet,
                embedder,
                slots,
                DiffusionSchedule.linear(2),
                torch.Generator().manual_seed(1),
                (4, 8, 8),
                LatentMap(4),
            )
            for _ in range(2)
        ]
        assert out[0].shape == (1, 3, 32, 32)
        assert torch.equal(out[0], out[1])
