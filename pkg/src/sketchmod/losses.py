"""Training losses and their weighted total.

Four components:

* noise reconstruction: mean squared error between the true added noise
  and the (modulated) prediction,
* L1 regularizers on the scale and shift maps (raw sums, as written),
* a variance bonus -(sigma(S) + sigma(B)) encouraging expressive maps,
* an attention-coverage term per probed layer and supervised token:

      1 - (inside_mass / total_mass)^2 - lambda_reg * inside_mass

  where inside_mass sums the token's attention over its mask and
  total_mass over all pixels.  Raising coverage and concentrating mass
  inside the mask both lower the loss; the lambda_reg term additionally
  penalizes attention leaking outside the target region.

The total is lambda0 * noise + lambda1 * attn + lambda2 * (l1_scale +
l1_shift + variance), with lambda0 gated to zero for freehand samples so
no pixel-aligned ground truth is required for them.

All operations are pure and keep the autograd graph when handed tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Tuple, Union

import torch

from .backbone import AttentionMapSet
from .errors import ContractError
from .sketch_semantics import SemanticMaskSet, resample_mask_set


@dataclass(frozen=True)
class LossWeights:
    """Weights of the four loss components.

    lambda_reg (inside the attention term) has no published value; 0.1 is
    the package default.
    """

    lambda0: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda_reg: float = 0.1

    def __post_init__(self):
        for name in ("lambda0", "lambda1", "lambda2", "lambda_reg"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")


@dataclass
class LossBreakdown:
    """One training step's loss components.

    ``total`` equals lambda0 * noise + lambda1 * attn + lambda2 *
    (l1_scale + l1_shift + variance) with the effective lambda0 (zero for
    freehand samples).
    """

    noise: float
    attn: float
    l1_scale: float
    l1_shift: float
    variance: float
    total: float

    def as_record(self, step: int, is_freehand_fraction: float) -> Dict[str, float]:
        """Flat JSON record for the training log."""
        return {
            "step": step,
            "noise": self.noise,
            "attn": self.attn,
            "l1_scale": self.l1_scale,
            "l1_shift": self.l1_shift,
            "variance": self.variance,
            "total": self.total,
            "is_freehand_fraction": is_freehand_fraction,
        }


def noise_loss(eps_true: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    """Mean over all elements of the squared prediction error.

    The expectation is realized as the per-element mean so the loss scale
    is independent of latent geometry.
    """
    if eps_true.shape != eps_pred.shape:
        raise ContractError(
            f"eps_true shape {tuple(eps_true.shape)} != eps_pred shape {tuple(eps_pred.shape)}"
        )
    return ((eps_true - eps_pred) ** 2).mean()


def l1_regularizers(maps) -> Tuple[torch.Tensor, torch.Tensor]:
    """(||S||_1, ||B||_1) as raw sums of absolute values."""
    return maps.scale.abs().sum(), maps.shift.abs().sum()


def variance_loss(maps) -> torch.Tensor:
    """-(sigma(S) + sigma(B)) with sigma the population standard deviation
    over all elements of each map."""
    if maps.scale.numel() < 2 or maps.shift.numel() < 2:
        raise ContractError("variance_loss needs maps with at least 2 elements")
    return -(torch.std(maps.scale, correction=0) + torch.std(maps.shift, correction=0))


MasksArg = Union[SemanticMaskSet, Mapping[str, SemanticMaskSet]]


def attention_loss(maps: AttentionMapSet, masks: MasksArg, lambda_reg: float = 0.1) -> torch.Tensor:
    """Attention-coverage loss summed over probed layers and tokens.

    Args:
        maps: Head-averaged cross-attention maps, one (P, L) matrix per
            layer, rows normalized over tokens.
        masks: Either one SemanticMaskSet (resampled to each layer's
            resolution by block majority) or a precomputed mapping
            layer_id -> SemanticMaskSet at matching resolutions.
        lambda_reg: Weight of the inside-mass reward term.

    Tokens whose mask is empty at a layer's resolution, or whose total
    attention mass is zero, contribute 0 (avoids division by zero).
    Raises if a supervised token index is not a column of the maps.
    """
    total = None
    for layer_id, attn in maps.maps.items():
        resolution = maps.resolutions[layer_id]
        layer_masks = (
            masks[layer_id] if isinstance(masks, Mapping) else resample_mask_set(masks, resolution)
        )
        if layer_masks.grid_hw != tuple(resolution):
            raise ContractError(
                f"masks for layer {layer_id} are {layer_masks.grid_hw}, expected {resolution}"
            )
        n_tokens = attn.shape[1]
        for token_index, mask in layer_masks.masks.items():
            if not 0 <= token_index < n_tokens:
                raise ContractError(
                    f"token {token_index} supervised but absent from the {n_tokens}-token maps"
                )
            if not mask.any():
                continue
            column = attn[:, token_index]
            mask_flat = torch.as_tensor(mask.reshape(-1), dtype=attn.dtype)
            inside = (column * mask_flat).sum()
            total_mass = column.sum()
            if float(total_mass.detach()) == 0.0:
                continue
            term = 1.0 - (inside / total_mass) ** 2 - lambda_reg * inside
            total = term if total is None else total + term
    if total is None:
        return torch.zeros((), dtype=next(iter(maps.maps.values())).dtype)
    return total


def total_loss(
    noise,
    attn,
    l1_scale,
    l1_shift,
    variance,
    weights: LossWeights,
    sample_is_freehand: bool = False,
) -> Tuple[torch.Tensor, LossBreakdown]:
    """Weighted sum of the four components with per-sample lambda0 gating.

    Returns (total, breakdown); ``total`` keeps the autograd graph when the
    parts are tensors, the breakdown records plain floats.
    """
    parts = [torch.as_tensor(p, dtype=torch.float64) if not torch.is_tensor(p) else p
             for p in (noise, attn, l1_scale, l1_shift, variance)]
    noise_t, attn_t, l1s_t, l1b_t, var_t = parts
    lambda0 = 0.0 if sample_is_freehand else weights.lambda0
    total = (
        lambda0 * noise_t
        + weights.lambda1 * attn_t
        + weights.lambda2 * (l1s_t + l1b_t + var_t)
    )

    def _scalar(x: torch.Tensor) -> float:
        return float(x.detach())

    breakdown = LossBreakdown(
        noise=_scalar(noise_t),
        attn=_scalar(attn_t),
        l1_scale=_scalar(l1s_t),
        l1_shift=_scalar(l1b_t),
        variance=_scalar(var_t),
        total=_scalar(total),
    )
    return total, breakdown
