"""Cross-attention probing of the denoiser at the implied clean latent.

From the (modulated) noise prediction the denoised latent is recovered
and passed back through the text-conditioned denoiser with probing
enabled, harvesting head-averaged cross-attention maps at the configured
layers.  The probe sits inside the training graph: backbone parameters
stay frozen, but gradients flow through the probe activations back to the
noise prediction and from there into the modulation network.

The probe reuses the current training timestep for the extraction pass,
keeping the conditioning signal consistent with the step being
supervised, and feeds the recovered latent directly (no re-noising).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
import torch

from .backbone import AttentionMapSet, NoiseSchedule, TextCondition, predict_x0
from .errors import ConfigError, ContractError
from .sketch_semantics import SemanticMaskSet, resample_mask_set

__all__ = [
    "AttentionMapSet",
    "ProbeConfig",
    "probe_attention",
    "resample_masks",
    "export_probe_debug",
]


@dataclass(frozen=True)
class ProbeConfig:
    """Which attention layers to harvest, identified by resolution."""

    resolutions: Tuple[int, ...] = (8, 16, 32)

    def __post_init__(self):
        if not self.resolutions:
            raise ConfigError("probe needs at least one layer")

    @property
    def layer_ids(self) -> Tuple[str, ...]:
        return tuple(f"{r}x{r}" for r in self.resolutions)


def probe_attention(
    backbone,
    z_t: torch.Tensor,
    t: int,
    eps_prime: torch.Tensor,
    cond: TextCondition,
    config: ProbeConfig,
    schedule: NoiseSchedule | None = None,
) -> AttentionMapSet:
    """Recover the denoised latent from ``eps_prime`` and probe attention.

    Args:
        backbone: DiffusionBackbone providing ``denoise`` and the schedule.
        z_t: Noisy latent at timestep ``t``.
        eps_prime: (Modulated) noise prediction; gradients propagate from
            the returned maps back to this tensor.
        cond: Text conditioning for the extraction pass.
        config: Probe layers; each must exist in the backbone.

    Raises:
        ConfigError: If a requested layer is absent from the backbone.
    """
    schedule = schedule or backbone.schedule
    available = backbone.probe_layers()
    missing = [lid for lid in config.layer_ids if lid not in available]
    if missing:
        raise ConfigError(
            f"probe layers {missing} absent from backbone (has {sorted(available)})"
        )
    z0_hat = predict_x0(z_t, eps_prime, t, schedule)
    out = backbone.denoise(z0_hat, t, cond, probe=True)
    maps = {lid: out.attention_maps.maps[lid] for lid in config.layer_ids}
    resolutions = {lid: out.attention_maps.resolutions[lid] for lid in config.layer_ids}
    return AttentionMapSet(maps=maps, resolutions=resolutions)


def resample_masks(
    masks: SemanticMaskSet, config: ProbeConfig
) -> Dict[str, SemanticMaskSet]:
    """One mask set per probe layer, block-majority resampled (ties -> 1)."""
    if not masks.masks:
        raise ContractError("mask set is empty")
    out: Dict[str, SemanticMaskSet] = {}
    for r, layer_id in zip(config.resolutions, config.layer_ids):
        out[layer_id] = resample_mask_set(masks, (r, r))
    return out


def _to_grayscale_grid(arrays) -> np.ndarray:
    """Stack same-shaped [0,1] arrays horizontally with 1px separators."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    h = arrays[0].shape[0]
    sep = np.full((h, 1), 0.5)
    cells = []
    for a in arrays:
        span = a.max() - a.min()
        cells.append((a - a.min()) / span if span > 0 else np.zeros_like(a))
        cells.append(sep)
    return np.concatenate(cells[:-1], axis=1)


def export_probe_debug(
    maps: AttentionMapSet,
    masks_by_layer: Dict[str, SemanticMaskSet],
    out_dir,
) -> Path:
    """Write per-layer attention/mask grids as grayscale PNGs plus an index.

    For each layer, one image grid of the per-token attention maps and one
    of the resampled masks, consumed by the studio overlay view.
    """
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = {"layers": []}
    for layer_id, attn in maps.maps.items():
        h, w = maps.resolutions[layer_id]
        layer_masks = masks_by_layer[layer_id]
        token_order = sorted(layer_masks.masks)
        attn_np = attn.detach().cpu().numpy()
        attn_grid = _to_grayscale_grid(
            [attn_np[:, i].reshape(h, w) for i in token_order]
        )
        mask_grid = _to_grayscale_grid([layer_masks.masks[i] for i in token_order])
        attn_path = out / f"attention_{layer_id}.png"
        mask_path = out / f"masks_{layer_id}.png"
        Image.fromarray((attn_grid * 255).astype(np.uint8), mode="L").save(attn_path)
        Image.fromarray((mask_grid * 255).astype(np.uint8), mode="L").save(mask_path)
        index["layers"].append(
            {
                "layer_id": layer_id,
                "resolution": [h, w],
                "tokens": [
                    {"token_index": i, "label": layer_masks.token_labels[i]}
                    for i in token_order
                ],
                "attention_image": attn_path.name,
                "masks_image": mask_path.name,
            }
        )
    index_path = out / "index.json"
    index_path.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return index_path
