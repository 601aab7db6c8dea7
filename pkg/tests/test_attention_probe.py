import json

import numpy as np
import pytest
import torch

from sketchmod.attention_probe import (
    ProbeConfig,
    export_probe_debug,
    probe_attention,
    resample_masks,
)
from sketchmod.backbone import ToyBackbone, ToyBackboneConfig, predict_x0
from sketchmod.errors import ConfigError, ContractError
from sketchmod.losses import attention_loss
from sketchmod.sketch_semantics import SemanticMaskSet


def double_backbone() -> ToyBackbone:
    backbone = ToyBackbone(ToyBackboneConfig())
    backbone.denoiser.double()
    return backbone


def probe_inputs(backbone, seed=0, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    size = backbone.latent_size
    z_t = torch.randn((4, size, size), generator=gen, dtype=dtype)
    eps_prime = torch.randn((4, size, size), generator=gen, dtype=dtype)
    cond = backbone.encode_text("a box and a disk")
    return z_t, eps_prime, cond


def toy_masks(resolution=(8, 8), tokens=(1, 4)) -> SemanticMaskSet:
    rng = np.random.default_rng(0)
    masks = {
        i: (rng.uniform(size=resolution) < 0.5).astype(np.uint8) for i in tokens
    }
    return SemanticMaskSet(masks=masks, token_labels={i: f"t{i}" for i in tokens})


class TestProbeAttention:
    def test_three_layers_at_declared_resolutions(self, toy_backbone):
        z_t, eps_prime, cond = probe_inputs(toy_backbone)
        maps = probe_attention(toy_backbone, z_t, 950, eps_prime, cond, ProbeConfig())
        assert sorted(maps.maps) == ["16x16", "32x32", "8x8"]
        assert maps.resolutions == {"8x8": (8, 8), "16x16": (16, 16), "32x32": (32, 32)}

    def test_single_token_condition_gives_all_ones(self, toy_backbone):
        z_t, eps_prime, _ = probe_inputs(toy_backbone, seed=1)
        cond = toy_backbone.encode_text("box")
        maps = probe_attention(toy_backbone, z_t, 950, eps_prime, cond, ProbeConfig())
        for attn in maps.maps.values():
            assert torch.allclose(attn, torch.ones_like(attn))

    def test_missing_layer_rejected(self, toy_backbone):
        z_t, eps_prime, cond = probe_inputs(toy_backbone, seed=2)
        with pytest.raises(ConfigError):
            probe_attention(
                toy_backbone, z_t, 950, eps_prime, cond, ProbeConfig(resolutions=(8, 64))
            )

    def test_probe_uses_recovered_latent(self, toy_backbone):
        # Probing (z_t, eps') must equal denoising z0_hat directly.
        z_t, eps_prime, cond = probe_inputs(toy_backbone, seed=3)
        maps = probe_attention(toy_backbone, z_t, 930, eps_prime, cond, ProbeConfig())
        z0_hat = predict_x0(z_t, eps_prime, 930, toy_backbone.schedule)
        direct = toy_backbone.denoise(z0_hat, 930, cond, probe=True).attention_maps
        for lid in maps.maps:
            assert torch.equal(maps.maps[lid], direct.maps[lid])

    def test_deterministic(self, toy_backbone):
        z_t, eps_prime, cond = probe_inputs(toy_backbone, seed=4)
        a = probe_attention(toy_backbone, z_t, 950, eps_prime, cond, ProbeConfig())
        b = probe_attention(toy_backbone, z_t, 950, eps_prime, cond, ProbeConfig())
        for lid in a.maps:
            assert torch.equal(a.maps[lid], b.maps[lid])

    def test_rows_normalized_on_seeded_inputs(self, toy_backbone):
        gen = torch.Generator().manual_seed(5)
        cond = toy_backbone.encode_text("a box and a stripe")
        for trial in range(50):
            size = toy_backbone.latent_size
            z_t = torch.randn((4, size, size), generator=gen)
            eps_prime = torch.randn((4, size, size), generator=gen)
            maps = probe_attention(
                toy_backbone, z_t, 900 + trial, eps_prime, cond, ProbeConfig()
            )
            for attn in maps.maps.values():
                assert float((attn.sum(dim=1) - 1).abs().max()) < 1e-5

    def test_finite_difference_sensitivity(self):
        backbone = double_backbone()
        z_t, eps_prime, cond = probe_inputs(backbone, seed=6, dtype=torch.float64)
        eps_prime.requires_grad_(True)
        config = ProbeConfig(resolutions=(8,))

        weights = torch.randn(
            (64, cond.num_tokens), generator=torch.Generator().manual_seed(7),
            dtype=torch.float64,
        )

        def objective(eps_val):
            maps = probe_attention(backbone, z_t, 950, eps_val, cond, config)
            return (maps.maps["8x8"] * weights).sum()

        loss = objective(eps_prime)
        (grad,) = torch.autograd.grad(loss, eps_prime)

        rng = np.random.default_rng(8)
        h = 1e-5
        checked = 0
        for _ in range(10):
            idx = tuple(int(rng.integers(0, s)) for s in eps_prime.shape)
            base = eps_prime.detach().clone()
            plus, minus = base.clone(), base.clone()
            plus[idx] += h
            minus[idx] -= h
            fd = (float(objective(plus).detach()) - float(objective(minus).detach())) / (2 * h)
            analytic = float(grad[idx])
            if abs(fd) < 1e-12:
                continue
            assert abs(analytic - fd) / abs(fd) < 1e-3
            checked += 1
        assert checked >= 5

    def test_composite_loss_gradient_finite_and_nonzero(self):
        backbone = double_backbone()
        z_t, eps_prime, cond = probe_inputs(backbone, seed=9, dtype=torch.float64)
        eps_prime.requires_grad_(True)
        config = ProbeConfig(resolutions=(8, 16))
        masks = {
            "8x8": toy_masks((8, 8)),
            "16x16": toy_masks((16, 16)),
        }
        maps = probe_attention(backbone, z_t, 960, eps_prime, cond, config)
        loss = attention_loss(maps, masks, lambda_reg=0.1)
        (grad,) = torch.autograd.grad(loss, eps_prime)
        assert torch.isfinite(grad).all()
        rng = np.random.default_rng(10)
        nonzero = 0
        for _ in range(10):
            idx = tuple(int(rng.integers(0, s)) for s in grad.shape)
            if float(grad[idx]) != 0.0:
                nonzero += 1
        assert nonzero >= 8


class TestResampleMasks:
    def test_all_ones_stays_all_ones(self):
        base = SemanticMaskSet(
            masks={0: np.ones((16, 16), np.uint8)}, token_labels={0: "x"}
        )
        per_layer = resample_masks(base, ProbeConfig(resolutions=(8, 16, 32)))
        for layer_id, mask_set in per_layer.items():
            assert mask_set.masks[0].all()

    def test_single_pixel_drops_below_majority(self):
        mask = np.zeros((16, 16), np.uint8)
        mask[2, 3] = 1
        base = SemanticMaskSet(masks={0: mask}, token_labels={0: "x"})
        out = resample_masks(base, ProbeConfig(resolutions=(8,)))["8x8"]
        assert not out.masks[0].any()

    def test_identity_resolution_unchanged(self):
        rng = np.random.default_rng(11)
        mask = (rng.uniform(size=(8, 8)) < 0.5).astype(np.uint8)
        base = SemanticMaskSet(masks={0: mask}, token_labels={0: "x"})
        out = resample_masks(base, ProbeConfig(resolutions=(8,)))["8x8"]
        assert np.array_equal(out.masks[0], mask)

    def test_empty_mask_set_rejected(self):
        base = SemanticMaskSet(masks={}, token_labels={})
        with pytest.raises(ContractError):
            resample_masks(base, ProbeConfig())


class TestDebugExport:
    def test_writes_grids_and_index(self, toy_backbone, tmp_path):
        z_t, eps_prime, cond = probe_inputs(toy_backbone, seed=12)
        config = ProbeConfig(resolutions=(8, 16))
        maps = probe_attention(toy_backbone, z_t, 950, eps_prime, cond, config)
        base = SemanticMaskSet(
            masks={1: np.ones((16, 16), np.uint8), 4: np.zeros((16, 16), np.uint8)},
            token_labels={1: "box", 4: "disk"},
        )
        masks_by_layer = resample_masks(base, config)
        index_path = export_probe_debug(maps, masks_by_layer, tmp_path / "probe")
        index = json.loads(index_path.read_text())
        assert {e["layer_id"] for e in index["layers"]} == {"8x8", "16x16"}
        for entry in index["layers"]:
            assert (tmp_path / "probe" / entry["attention_image"]).exists()
            assert (tmp_path / "probe" / entry["masks_image"]).exists()
            assert [t["label"] for t in entry["tokens"]] == ["box", "disk"]
