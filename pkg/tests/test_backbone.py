import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sketchmod.backbone import (
    NoiseSchedule,
    PatchAutoencoder,
    ToyBackbone,
    ToyBackboneConfig,
    forward_noise,
    predict_x0,
)
from sketchmod.errors import ConfigError, ContractError, GeometryError

from conftest import random_latent


class TestNoiseSchedule:
    @pytest.mark.parametrize("kind", ["linear", "scaled_linear"])
    @pytest.mark.parametrize("total_steps", [10, 50, 1000])
    def test_monotone_and_endpoints(self, kind, total_steps):
        sched = NoiseSchedule.from_kind(kind, total_steps)
        ab = sched.alpha_bar
        assert len(ab) == total_steps
        assert torch.all(ab[1:] < ab[:-1])
        assert ab[0] > 0.99
        assert ab[-1] < 0.05

    def test_reference_length_matches_classic_discretization(self):
        # At T=1000 the subsampling is the identity, so the first beta is
        # recovered exactly: alpha_bar[0] = 1 - beta_0.
        lin = NoiseSchedule.linear(1000)
        assert math.isclose(float(lin.alpha_bar[0]), 1 - 1e-4, rel_tol=1e-12)
        scaled = NoiseSchedule.scaled_linear(1000)
        assert math.isclose(float(scaled.alpha_bar[0]), 1 - 0.00085, rel_tol=1e-12)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            NoiseSchedule.from_kind("cosine", 100)

    def test_non_monotone_rejected(self):
        with pytest.raises(ContractError):
            NoiseSchedule(3, torch.tensor([0.9, 0.9, 0.1], dtype=torch.float64))

    def test_timestep_range_checked(self):
        sched = NoiseSchedule.linear(10)
        with pytest.raises(ContractError):
            sched.alpha_bar_at(10)
        with pytest.raises(ContractError):
            sched.alpha_bar_at(-1)


class TestForwardNoise:
    def test_alpha_one_returns_z0(self):
        sched = NoiseSchedule(2, torch.tensor([1.0, 0.01], dtype=torch.float64))
        z0 = random_latent((4, 8, 8), seed=0)
        eps = random_latent((4, 8, 8), seed=1)
        assert torch.equal(forward_noise(z0, 0, eps, sched), z0)

    def test_forced_arithmetic_quarter_alpha(self):
        sched = NoiseSchedule(2, torch.tensor([0.9999, 0.25], dtype=torch.float64))
        z0 = torch.zeros((4, 4, 4), dtype=torch.float64)
        eps = torch.ones((4, 4, 4), dtype=torch.float64)
        z_t = forward_noise(z0, 1, eps, sched)
        assert torch.allclose(z_t, torch.full_like(z_t, math.sqrt(0.75)))

    def test_matches_scalar_loop_oracle(self):
        sched = NoiseSchedule.linear(1000)
        z0 = random_latent((2, 5, 5), seed=2)
        eps = random_latent((2, 5, 5), seed=3)
        t = 500
        z_t = forward_noise(z0, t, eps, sched)
        ab = float(sched.alpha_bar[t])
        expected = torch.empty_like(z0)
        for c in range(2):
            for i in range(5):
                for j in range(5):
                    expected[c, i, j] = (
                        math.sqrt(ab) * z0[c, i, j] + math.sqrt(1 - ab) * eps[c, i, j]
                    )
        assert torch.allclose(z_t, expected, atol=0, rtol=0)

    def test_shape_mismatch_rejected(self):
        sched = NoiseSchedule.linear(10)
        with pytest.raises(ContractError):
            forward_noise(torch.zeros(4, 8, 8), 1, torch.zeros(4, 4, 4), sched)

    def test_out_of_range_timestep_rejected(self):
        sched = NoiseSchedule.linear(10)
        z = torch.zeros(4, 8, 8)
        with pytest.raises(ContractError):
            forward_noise(z, 10, z, sched)


class TestPredictX0:
    def test_zero_noise_rescales(self):
        sched = NoiseSchedule(2, torch.tensor([0.9999, 0.25], dtype=torch.float64))
        z_t = random_latent((4, 8, 8), seed=4)
        out = predict_x0(z_t, torch.zeros_like(z_t), 1, sched)
        assert torch.allclose(out, z_t / math.sqrt(0.25))

    def test_alpha_one_identity(self):
        sched = NoiseSchedule(2, torch.tensor([1.0, 0.25], dtype=torch.float64))
        z_t = random_latent((4, 8, 8), seed=5)
        eps = torch.zeros_like(z_t)
        assert torch.equal(predict_x0(z_t, eps, 0, sched), z_t)

    def test_round_trip_through_forward_noise(self):
        sched = NoiseSchedule.scaled_linear(1000)
        gen = torch.Generator().manual_seed(6)
        worst = 0.0
        for _ in range(100):
            z0 = torch.randn(4, 8, 8, generator=gen, dtype=torch.float64)
            eps = torch.randn(4, 8, 8, generator=gen, dtype=torch.float64)
            t = int(torch.randint(0, 1000, (1,), generator=gen))
            z_t = forward_noise(z0, t, eps, sched)
            recon = predict_x0(z_t, eps, t, sched)
            worst = max(worst, float((recon - z0).abs().max()))
        assert worst < 1e-6


class TestPatchAutoencoder:
    def test_square_transform_is_exactly_invertible(self):
        # reduction 2 on grayscale -> 4-dim patches, square orthogonal map
        ae = PatchAutoencoder(image_channels=1, reduction_factor=2, latent_channels=4)
        gen = torch.Generator().manual_seed(7)
        image = torch.rand((1, 64, 64), generator=gen, dtype=torch.float64)
        recon = ae.decode(ae.encode(image))
        assert float((recon - image).abs().max()) < 1e-5

    def test_projection_mode_is_idempotent_and_latent_exact(self):
        ae = PatchAutoencoder(image_channels=1, reduction_factor=4, latent_channels=4)
        gen = torch.Generator().manual_seed(8)
        image = torch.rand((1, 32, 32), generator=gen, dtype=torch.float64)
        once = ae.decode(ae.encode(image))
        twice = ae.decode(ae.encode(once))
        assert float((twice - once).abs().max()) < 1e-10
        z = torch.randn((4, 8, 8), generator=gen, dtype=torch.float64)
        assert float((ae.encode(ae.decode(z)) - z).abs().max()) < 1e-10

    def test_reference_geometry_512_to_4x128x128(self):
        ae = PatchAutoencoder(image_channels=3, reduction_factor=4, latent_channels=4)
        z = ae.encode(torch.zeros(3, 512, 512))
        assert tuple(z.shape) == (4, 128, 128)

    def test_toy_geometry_32_to_4x8x8(self):
        ae = PatchAutoencoder(image_channels=1, reduction_factor=4, latent_channels=4)
        z = ae.encode(torch.zeros(1, 32, 32))
        assert tuple(z.shape) == (4, 8, 8)

    def test_non_divisible_size_rejected(self):
        ae = PatchAutoencoder(image_channels=1, reduction_factor=4, latent_channels=4)
        with pytest.raises(GeometryError):
            ae.encode(torch.zeros(1, 30, 30))


class TestToyDenoiser:
    def test_deterministic_across_calls(self, toy_backbone):
        cond = toy_backbone.encode_text("a box and a disk")
        z = random_latent((4, 32, 32), seed=9, dtype=torch.float32)
        out1 = toy_backbone.denoise(z, 900, cond)
        out2 = toy_backbone.denoise(z, 900, cond)
        assert torch.equal(out1.eps_pred, out2.eps_pred)

    def test_two_instances_bitwise_identical(self):
        a = ToyBackbone(ToyBackboneConfig())
        b = ToyBackbone(ToyBackboneConfig())
        cond = a.encode_text("a stripe")
        z = random_latent((4, 32, 32), seed=10, dtype=torch.float32)
        assert torch.equal(a.denoise(z, 950, cond).eps_pred, b.denoise(z, 950, cond).eps_pred)

    def test_probe_layer_count_and_pixel_counts(self):
        backbone = ToyBackbone(ToyBackboneConfig(image_size=32, attn_resolutions=(8, 16)))
        cond = backbone.encode_text("a disk")
        z = random_latent((4, 16, 16), seed=11, dtype=torch.float32)
        out = backbone.denoise(z, 900, cond, probe=True)
        maps = out.attention_maps
        assert sorted(maps.maps) == ["16x16", "8x8"]
        assert maps.maps["8x8"].shape[0] == 64
        assert maps.maps["16x16"].shape[0] == 256

    def test_probe_off_returns_no_maps(self, toy_backbone):
        cond = toy_backbone.encode_text("a box")
        z = random_latent((4, 32, 32), seed=12, dtype=torch.float32)
        assert toy_backbone.denoise(z, 900, cond, probe=False).attention_maps is None

    def test_rows_normalized_over_tokens(self, toy_backbone):
        gen = torch.Generator().manual_seed(13)
        cond = toy_backbone.encode_text("a box and a stripe")
        for trial in range(50):
            z = torch.randn((4, 32, 32), generator=gen)
            out = toy_backbone.denoise(z, 900 + trial % 100, cond, probe=True)
            for layer_id, attn in out.attention_maps.maps.items():
                rows = attn.sum(dim=1)
                assert float((rows - 1).abs().max()) < 1e-5
                assert float(attn.min()) >= 0

    def test_eps_finite_and_shaped(self, toy_backbone):
        cond = toy_backbone.encode_text("a box")
        z = random_latent((4, 32, 32), seed=14, dtype=torch.float32)
        out = toy_backbone.denoise(z, 999, cond)
        assert out.eps_pred.shape == z.shape
        assert torch.isfinite(out.eps_pred).all()

    def test_single_token_maps_are_all_ones(self, toy_backbone):
        cond = toy_backbone.encode_text("box")
        z = random_latent((4, 32, 32), seed=15, dtype=torch.float32)
        out = toy_backbone.denoise(z, 900, cond, probe=True)
        for attn in out.attention_maps.maps.values():
            assert attn.shape[1] == 1
            assert torch.allclose(attn, torch.ones_like(attn))


class TestToyBackbone:
    def test_vae_decode_encode_round_trip(self, toy_backbone):
        rng = np.random.default_rng(16)
        image = rng.uniform(0, 1, size=(64, 64))
        recon = toy_backbone.vae_decode(toy_backbone.vae_encode(image))
        assert np.abs(recon[0] - image).max() < 1e-5

    def test_latent_geometry(self, toy_backbone):
        z = toy_backbone.vae_encode(np.zeros((64, 64)))
        assert tuple(z.shape) == (4, 32, 32)
        assert toy_backbone.latent_size == 32

    def test_empty_caption_rejected(self, toy_backbone):
        from sketchmod.errors import InputError

        with pytest.raises(InputError):
            toy_backbone.encode_text("   ")

    @given(st.text(alphabet="abcdefg ", min_size=1).filter(lambda s: s.strip()))
    @settings(max_examples=25, deadline=None)
    def test_text_encoding_deterministic(self, caption):
        backbone = ToyBackbone(ToyBackboneConfig())
        c1 = backbone.encode_text(caption)
        c2 = backbone.encode_text(caption)
        assert torch.equal(c1.token_embeddings, c2.token_embeddings)
        assert c1.token_labels == c2.token_labels
