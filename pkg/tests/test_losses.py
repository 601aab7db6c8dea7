import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sketchmod.backbone import AttentionMapSet
from sketchmod.errors import ContractError
from sketchmod.losses import (
    LossWeights,
    attention_loss,
    l1_regularizers,
    noise_loss,
    total_loss,
    variance_loss,
)
from sketchmod.modnet import ModulationMaps
from sketchmod.sketch_semantics import SemanticMaskSet

from conftest import random_latent


def maps_from(scale, shift, t=900) -> ModulationMaps:
    return ModulationMaps(torch.as_tensor(scale), torch.as_tensor(shift), t=t)


def random_attention_instance(seed, layers=((4, 4), (8, 8)), tokens=3):
    """Random positive maps and random binary masks for oracle tests."""
    rng = np.random.default_rng(seed)
    maps, resolutions, mask_sets = {}, {}, {}
    for h, w in layers:
        layer_id = f"{h}x{w}"
        maps[layer_id] = torch.tensor(rng.uniform(0.01, 1.0, size=(h * w, tokens)))
        resolutions[layer_id] = (h, w)
        mask_sets[layer_id] = SemanticMaskSet(
            masks={i: (rng.uniform(size=(h, w)) < 0.4).astype(np.uint8) for i in range(tokens)},
            token_labels={i: f"tok{i}" for i in range(tokens)},
        )
    return AttentionMapSet(maps=maps, resolutions=resolutions), mask_sets


def attention_loss_oracle(maps: AttentionMapSet, mask_sets, lambda_reg: float) -> float:
    """Triple scalar loop over layers, tokens and pixels."""
    total = 0.0
    for layer_id, attn in maps.maps.items():
        h, w = maps.resolutions[layer_id]
        for token, mask in mask_sets[layer_id].masks.items():
            if not mask.any():
                continue
            inside = 0.0
            total_mass = 0.0
            for p in range(h * w):
                value = float(attn[p, token])
                total_mass += value
                if mask.reshape(-1)[p]:
                    inside += value
            if total_mass == 0.0:
                continue
            total += 1.0 - (inside / total_mass) ** 2 - lambda_reg * inside
    return total


class TestNoiseLoss:
    def test_identity_gives_zero(self):
        eps = random_latent((4, 8, 8), seed=0)
        assert float(noise_loss(eps, eps)) == 0.0

    def test_forced_arithmetic(self):
        true = torch.zeros(4, 4, 4)
        pred = torch.full((4, 4, 4), 2.0)
        assert float(noise_loss(true, pred)) == pytest.approx(4.0)

    def test_matches_scalar_two_loop_oracle(self):
        true = random_latent((2, 6, 6), seed=1)
        pred = random_latent((2, 6, 6), seed=2)
        acc, count = 0.0, 0
        for c in range(2):
            for i in range(6):
                for j in range(6):
                    acc += (float(true[c, i, j]) - float(pred[c, i, j])) ** 2
                    count += 1
        assert float(noise_loss(true, pred)) == pytest.approx(acc / count, rel=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            noise_loss(torch.zeros(4, 8, 8), torch.zeros(4, 4, 4))


class TestL1Regularizers:
    def test_zero_maps(self):
        maps = maps_from(torch.zeros(4, 4, 4), torch.zeros(4, 4, 4))
        l1s, l1b = l1_regularizers(maps)
        assert float(l1s) == 0.0 and float(l1b) == 0.0

    def test_forced_arithmetic(self):
        scale = torch.tensor([[[1.0, -1.0], [2.0, 0.0]]])
        maps = maps_from(scale, torch.zeros_like(scale))
        l1s, l1b = l1_regularizers(maps)
        assert float(l1s) == pytest.approx(4.0)
        assert float(l1b) == 0.0

    def test_matches_scalar_abs_sum_oracle(self):
        scale = random_latent((3, 5, 5), seed=3)
        shift = random_latent((3, 5, 5), seed=4)
        l1s, l1b = l1_regularizers(maps_from(scale, shift))
        oracle_s = sum(abs(float(v)) for v in scale.reshape(-1))
        oracle_b = sum(abs(float(v)) for v in shift.reshape(-1))
        assert float(l1s) == pytest.approx(oracle_s, rel=1e-12)
        assert float(l1b) == pytest.approx(oracle_b, rel=1e-12)


class TestVarianceLoss:
    def test_constant_maps_give_zero(self):
        maps = maps_from(torch.full((4, 4, 4), 3.0), torch.full((4, 4, 4), -1.0))
        assert float(variance_loss(maps)) == 0.0

    def test_symmetric_two_value_case(self):
        scale = torch.cat([torch.zeros(8), torch.full((8,), 2.0)]).reshape(1, 4, 4)
        maps = maps_from(scale, torch.ones_like(scale))
        assert float(variance_loss(maps)) == pytest.approx(-1.0)

    def test_matches_two_pass_std_oracle(self):
        scale = random_latent((2, 4, 4), seed=5)
        shift = random_latent((2, 4, 4), seed=6)

        def two_pass_std(values):
            values = [float(v) for v in values.reshape(-1)]
            mean = sum(values) / len(values)
            return math.sqrt(sum((v - mean) ** 2 for v in values) / len(values))

        expected = -(two_pass_std(scale) + two_pass_std(shift))
        assert float(variance_loss(maps_from(scale, shift))) == pytest.approx(expected, rel=1e-9)

    def test_single_element_map_rejected(self):
        maps = maps_from(torch.zeros(1, 1, 1), torch.zeros(1, 1, 1))
        with pytest.raises(ContractError):
            variance_loss(maps)


class TestAttentionLoss:
    def one_layer(self, attn, h, w):
        return AttentionMapSet(
            maps={"L": torch.as_tensor(attn, dtype=torch.float64)}, resolutions={"L": (h, w)}
        )

    def mask_set(self, arrays):
        return {
            "L": SemanticMaskSet(
                masks={i: np.asarray(a, dtype=np.uint8) for i, a in enumerate(arrays)},
                token_labels={i: f"tok{i}" for i in range(len(arrays))},
            )
        }

    def test_full_coverage_zero_lambda_is_zero(self):
        attn = np.full((4, 1), 0.25)
        masks = self.mask_set([np.ones((2, 2))])
        loss = attention_loss(self.one_layer(attn, 2, 2), masks, lambda_reg=0.0)
        assert float(loss) == pytest.approx(0.0)

    def test_hand_case_uniform_four_pixels_half_mask(self):
        attn = np.full((4, 1), 0.25)
        masks = self.mask_set([np.array([[1, 1], [0, 0]])])
        loss = attention_loss(self.one_layer(attn, 2, 2), masks, lambda_reg=0.1)
        assert float(loss) == pytest.approx(0.70, abs=1e-12)

    def test_matches_triple_loop_oracle_on_random_instances(self):
        for seed in range(10):
            maps, mask_sets = random_attention_instance(seed)
            loss = attention_loss(maps, mask_sets, lambda_reg=0.1)
            assert float(loss) == pytest.approx(
                attention_loss_oracle(maps, mask_sets, 0.1), rel=1e-9
            )

    def test_empty_mask_token_skipped(self):
        attn = np.full((4, 2), 0.5)
        masks = self.mask_set([np.zeros((2, 2)), np.ones((2, 2))])
        loss_with = attention_loss(self.one_layer(attn, 2, 2), masks, lambda_reg=0.0)
        only_second = {
            "L": SemanticMaskSet(masks={1: np.ones((2, 2), np.uint8)}, token_labels={1: "x"})
        }
        loss_without = attention_loss(self.one_layer(attn, 2, 2), only_second, lambda_reg=0.0)
        assert float(loss_with) == pytest.approx(float(loss_without))

    def test_token_missing_from_maps_rejected(self):
        attn = np.full((4, 1), 0.5)
        masks = self.mask_set([np.ones((2, 2)), np.ones((2, 2))])  # token 1 not in maps
        with pytest.raises(ContractError):
            attention_loss(self.one_layer(attn, 2, 2), masks, lambda_reg=0.0)

    def test_base_mask_set_is_resampled_per_layer(self):
        maps, _ = random_attention_instance(3, layers=((4, 4), (8, 8)), tokens=2)
        rng = np.random.default_rng(4)
        base = SemanticMaskSet(
            masks={i: (rng.uniform(size=(8, 8)) < 0.5).astype(np.uint8) for i in range(2)},
            token_labels={0: "a", 1: "b"},
        )
        from sketchmod.sketch_semantics import resample_mask_set

        per_layer = {
            "4x4": resample_mask_set(base, (4, 4)),
            "8x8": resample_mask_set(base, (8, 8)),
        }
        auto = attention_loss(maps, base, lambda_reg=0.05)
        manual = attention_loss(maps, per_layer, lambda_reg=0.05)
        assert float(auto) == pytest.approx(float(manual), rel=1e-12)

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=25, deadline=None)
    def test_term_bounds(self, seed):
        maps, mask_sets = random_attention_instance(seed, layers=((4, 4),), tokens=1)
        attn = maps.maps["4x4"]
        mask = mask_sets["4x4"].masks[0]
        if not mask.any():
            return
        lam = 0.1
        total_mass = float(attn[:, 0].sum())
        term = float(attention_loss(maps, mask_sets, lambda_reg=lam))
        assert -lam * total_mass - 1e-9 <= term <= 1.0 + 1e-9
        zero_lam = float(attention_loss(maps, mask_sets, lambda_reg=0.0))
        assert 0.0 - 1e-12 <= zero_lam <= 1.0 + 1e-12

    def test_moving_mass_into_mask_decreases_loss(self):
        rng = np.random.default_rng(11)
        attn = rng.uniform(0.05, 1.0, size=(16, 1))
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[:2] = 1
        masks = self.mask_set([mask])
        base = float(attention_loss(self.one_layer(attn, 4, 4), masks, lambda_reg=0.1))
        moved = attn.copy()
        moved[15, 0] -= 0.04  # outside pixel
        moved[0, 0] += 0.04  # inside pixel, total mass unchanged
        after = float(attention_loss(self.one_layer(moved, 4, 4), masks, lambda_reg=0.1))
        assert after < base

    def test_gradient_matches_central_differences(self):
        lam = 0.1
        for seed in range(20):
            maps, mask_sets = random_attention_instance(seed, layers=((4, 4),), tokens=2)
            attn = maps.maps["4x4"].clone().requires_grad_(True)
            wrapped = AttentionMapSet(maps={"4x4": attn}, resolutions={"4x4": (4, 4)})
            loss = attention_loss(wrapped, mask_sets, lambda_reg=lam)
            (grad,) = torch.autograd.grad(loss, attn)

            rng = np.random.default_rng(seed + 1)
            p = int(rng.integers(0, attn.shape[0]))
            i = int(rng.integers(0, attn.shape[1]))
            h = 1e-5
            base = attn.detach().clone()

            def loss_at(value):
                perturbed = base.clone()
                perturbed[p, i] = value
                m = AttentionMapSet(maps={"4x4": perturbed}, resolutions={"4x4": (4, 4)})
                return float(attention_loss(m, mask_sets, lambda_reg=lam))

            fd = (loss_at(float(base[p, i]) + h) - loss_at(float(base[p, i]) - h)) / (2 * h)
            analytic = float(grad[p, i])
            assert abs(analytic - fd) / max(abs(fd), 1e-8) < 1e-4

    def test_descent_on_free_logits_reaches_target_coverage(self):
        # 16x16 grid, 3 tokens partitioning the columns, lambda_reg=0.1.
        bands = [(0, 6), (6, 11), (11, 16)]
        masks = {}
        for i, (a, b) in enumerate(bands):
            m = np.zeros((16, 16), dtype=np.uint8)
            m[:, a:b] = 1
            masks[i] = m
        mask_sets = {
            "16x16": SemanticMaskSet(masks=masks, token_labels={i: f"t{i}" for i in masks})
        }
        logits = torch.zeros((256, 3), dtype=torch.float64, requires_grad=True)
        losses = []
        for _ in range(200):
            attn = torch.softmax(logits, dim=1)
            maps = AttentionMapSet(maps={"16x16": attn}, resolutions={"16x16": (16, 16)})
            loss = attention_loss(maps, mask_sets, lambda_reg=0.1)
            losses.append(float(loss.detach()))
            (grad,) = torch.autograd.grad(loss, logits)
            with torch.no_grad():
                logits -= 5.0 * grad

        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
        attn = torch.softmax(logits.detach(), dim=1)
        for i in masks:
            column = attn[:, i]
            inside = float((column * torch.tensor(masks[i].reshape(-1).astype(float))).sum())
            assert inside / float(column.sum()) > 0.95


class TestVarianceGradients:
    def test_matches_central_differences(self):
        for seed in range(20):
            scale = random_latent((2, 3, 3), seed=seed).requires_grad_(True)
            shift = random_latent((2, 3, 3), seed=seed + 100).requires_grad_(True)
            loss = variance_loss(ModulationMaps(scale, shift, t=0))
            grad_s, grad_b = torch.autograd.grad(loss, (scale, shift))

            rng = np.random.default_rng(seed)
            idx = tuple(int(rng.integers(0, s)) for s in (2, 3, 3))
            h = 1e-5

            def loss_with(delta):
                s = scale.detach().clone()
                s[idx] += delta
                return float(variance_loss(ModulationMaps(s, shift.detach(), t=0)))

            fd = (loss_with(h) - loss_with(-h)) / (2 * h)
            assert abs(float(grad_s[idx]) - fd) / max(abs(fd), 1e-8) < 1e-4


class TestTotalLoss:
    def test_freehand_gates_noise_to_zero(self):
        total, breakdown = total_loss(1e6, 0.0, 0.0, 0.0, 0.0, LossWeights(), True)
        assert float(total) == 0.0
        assert breakdown.total == 0.0
        assert breakdown.noise == 1e6  # raw part still reported

    def test_reference_default_weights(self):
        total, _ = total_loss(1.0, 1.0, 0.0, 0.0, 0.0, LossWeights(), False)
        assert float(total) == pytest.approx(2.0)

    def test_matches_weighted_sum_oracle(self):
        rng = np.random.default_rng(12)
        for _ in range(1000):
            parts = rng.standard_normal(5)
            weights = LossWeights(*rng.uniform(0, 2, size=3), lambda_reg=0.1)
            total, breakdown = total_loss(*parts, weights, False)
            expected = (
                weights.lambda0 * parts[0]
                + weights.lambda1 * parts[1]
                + weights.lambda2 * (parts[2] + parts[3] + parts[4])
            )
            assert float(total) == pytest.approx(expected, rel=1e-9, abs=1e-12)
            recomputed = (
                weights.lambda0 * breakdown.noise
                + weights.lambda1 * breakdown.attn
                + weights.lambda2
                * (breakdown.l1_scale + breakdown.l1_shift + breakdown.variance)
            )
            assert breakdown.total == pytest.approx(recomputed, rel=1e-9, abs=1e-12)

    def test_negative_weights_rejected(self):
        with pytest.raises(ContractError):
            LossWeights(lambda0=-0.1)

    def test_log_record_shape(self):
        _, breakdown = total_loss(1.0, 2.0, 0.5, 0.5, -0.1, LossWeights(), False)
        record = breakdown.as_record(step=7, is_freehand_fraction=0.5)
        assert set(record) == {
            "step", "noise", "attn", "l1_scale", "l1_shift",
            "variance", "total", "is_freehand_fraction",
        }
