"""Semantic sketch encoder contract, supervision masks, fine-tuning selection.

The sketch encoder turns a raster sketch into a C x h x w patch-feature
grid living in the same contrastive space as label embeddings.  Binary
per-token supervision masks are derived either by thresholding the cosine
similarity between patch features and label embeddings, or from dataset
segmentation maps.  Only the last few encoder layers are trainable; a
frozen copy of the encoder is kept for reference encodings so supervision
targets never drift during fine-tuning.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Mapping, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError, InputError
from .seeding import reseed_module, stable_seed

MASK_EXPORT_SCHEMA_VERSION = 1


@dataclass
class SketchFeatureGrid:
    """Patch-feature map emitted by a sketch encoder.

    Attributes:
        features: (C, h, w) tensor.  Keeps its autograd graph when produced
            by the trainable encoder path.
        encoder_id: Identifier of the producing encoder.
    """

    features: torch.Tensor
    encoder_id: str = "toy"

    def __post_init__(self):
        if self.features.ndim != 3 or min(self.features.shape) < 1:
            raise ContractError(f"features must be (C, h, w), got {tuple(self.features.shape)}")

    @property
    def channels(self) -> int:
        return self.features.shape[0]

    @property
    def grid_hw(self) -> Tuple[int, int]:
        return self.features.shape[1], self.features.shape[2]


@dataclass
class SemanticMaskSet:
    """Per-token binary spatial regions used for attention supervision.

    Attributes:
        masks: token_index -> (h, w) uint8 array with values in {0, 1}.
        token_labels: token_index -> object label.
        source: "encoder_similarity" or "dataset_segmentation".
    """

    masks: Dict[int, np.ndarray]
    token_labels: Dict[int, str]
    source: str = "encoder_similarity"

    def __post_init__(self):
        shapes = {m.shape for m in self.masks.values()}
        if len(shapes) > 1:
            raise ContractError(f"all masks must share h x w, got {shapes}")
        for idx, m in self.masks.items():
            if not np.isin(m, (0, 1)).all():
                raise ContractError(f"mask for token {idx} has values outside {{0, 1}}")
            if idx not in self.token_labels:
                raise ContractError(f"token {idx} missing from token_labels")

    @property
    def grid_hw(self) -> Tuple[int, int]:
        first = next(iter(self.masks.values()))
        return first.shape

    def empty_token_indices(self) -> Tuple[int, ...]:
        """Tokens whose mask is all-zero (e.g. labels absent from the data)."""
        return tuple(sorted(i for i, m in self.masks.items() if not m.any()))


@dataclass(frozen=True)
class EncoderConfig:
    """Fine-tuning configuration for the sketch encoder."""

    trainable_suffix_layers: int = 3
    frozen_reference: bool = False

    def __post_init__(self):
        if self.trainable_suffix_layers < 0:
            raise ContractError("trainable_suffix_layers must be non-negative")


class ToySketchEncoder(nn.Module):
    """Seeded convolutional stand-in for a pretrained semantic sketch encoder.

    A stack of ``depth`` convolutional layers (stride-2 after the first)
    followed by adaptive average pooling onto the declared output grid.
    The geometry is fully configurable so the same code path runs the
    512 x 14 x 14 reference layout and small test layouts.

    A frozen deep copy of the freshly initialized weights is retained; the
    ``frozen_reference`` encode path uses it and is therefore unaffected by
    any fine-tuning of the trainable suffix.
    """

    def __init__(
        self,
        out_channels: int = 32,
        grid: Tuple[int, int] = (8, 8),
        depth: int = 5,
        hidden_channels: int = 32,
        in_channels: int = 1,
        seed: int = 0,
    ):
        super().__init__()
        if depth < 2:
            raise ContractError("encoder depth must be at least 2")
        self.out_channels = out_channels
        self.grid = tuple(grid)
        self.depth = depth
        self.in_channels = in_channels
        self.encoder_id = f"toy-c{out_channels}-g{self.grid[0]}x{self.grid[1]}-d{depth}-s{seed}"

        layers = [nn.Conv2d(in_channels, hidden_channels, 3, padding=1)]
        for _ in range(depth - 2):
            layers.append(nn.Conv2d(hidden_channels, hidden_channels, 3, stride=2, padding=1))
        layers.append(nn.Conv2d(hidden_channels, out_channels, 1))
        self.layers = nn.ModuleList(layers)

        reseed_module(self, stable_seed("toy-sketch-encoder", seed), scale=0.3)
        self._reference = copy.deepcopy(self)
        for p in self._reference.parameters():
            p.requires_grad_(False)

    def _to_tensor(self, sketch: np.ndarray) -> torch.Tensor:
        if sketch.size == 0:
            raise InputError("empty sketch image")
        arr = torch.as_tensor(np.ascontiguousarray(sketch), dtype=torch.float32)
        if arr.ndim == 2:
            arr = arr.unsqueeze(0)
        if arr.ndim != 3:
            raise InputError(f"sketch must be (H, W) or (C, H, W), got {tuple(sketch.shape)}")
        if arr.shape[0] != self.in_channels:
            # RGB input to a single-channel encoder collapses to luminance.
            arr = arr.mean(dim=0, keepdim=True)
        return arr.unsqueeze(0)

    def _forward_features(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers[:-1]:
            x = F.silu(layer(x))
        x = F.adaptive_avg_pool2d(x, self.grid)
        return self.layers[-1](x)

    def encode(self, sketch: np.ndarray, config: EncoderConfig = EncoderConfig()) -> SketchFeatureGrid:
        """Encode a raster sketch into a (C, h, w) feature grid.

        With ``config.frozen_reference`` the frozen pre-fine-tuning weights
        are used, which is the path that supervision masks are derived from.
        """
        x = self._to_tensor(sketch)
        if config.frozen_reference:
            with torch.no_grad():
                feats = self._reference._forward_features(x)
            encoder_id = self.encoder_id + "-frozen"
        else:
            feats = self._forward_features(x)
            encoder_id = self.encoder_id
        return SketchFeatureGrid(features=feats.squeeze(0), encoder_id=encoder_id)

    def trainable_parameters(self, config: EncoderConfig) -> Dict[str, nn.Parameter]:
        """Mark exactly the last ``trainable_suffix_layers`` layers trainable.

        Returns the selected parameters by name; all other parameters are
        frozen in place.
        """
        suffix = config.trainable_suffix_layers
        if suffix > self.depth:
            raise ContractError(f"suffix {suffix} exceeds encoder depth {self.depth}")
        cutoff = self.depth - suffix
        selected: Dict[str, nn.Parameter] = {}
        for i, layer in enumerate(self.layers):
            trainable = i >= cutoff
            for name, param in layer.named_parameters():
                param.requires_grad_(trainable)
                if trainable:
                    selected[f"layers.{i}.{name}"] = param
        return selected


def _as_float_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy().astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def derive_masks(
    grid: SketchFeatureGrid,
    labels: Sequence[Tuple[int, str, np.ndarray]],
    threshold: float = 0.5,
) -> SemanticMaskSet:
    """Threshold patch-feature / label-embedding cosine similarity into masks.

    Args:
        grid: Encoder feature grid (C, h, w).
        labels: (token_index, label, embedding) triples; embeddings must
            have dimension C.
        threshold: Similarity cutoff in (-1, 1); a patch belongs to the
            mask iff cosine similarity >= threshold.  Cells where either
            vector has zero norm are defined as similarity 0.
    """
    if not -1.0 < threshold < 1.0:
        raise ContractError(f"threshold must lie in (-1, 1), got {threshold}")
    feats = _as_float_array(grid.features)
    c, h, w = feats.shape
    flat = feats.reshape(c, h * w)
    feat_norms = np.linalg.norm(flat, axis=0)

    masks: Dict[int, np.ndarray] = {}
    token_labels: Dict[int, str] = {}
    for token_index, label, embedding in labels:
        emb = _as_float_array(embedding).reshape(-1)
        if emb.shape[0] != c:
            raise ContractError(
                f"label {label!r} embedding has dimension {emb.shape[0]}, expected {c}"
            )
        emb_norm = np.linalg.norm(emb)
        denom = feat_norms * emb_norm
        sims = np.zeros(h * w)
        valid = denom > 0
        sims[valid] = (emb @ flat[:, valid]) / denom[valid]
        masks[token_index] = (sims >= threshold).reshape(h, w).astype(np.uint8)
        token_labels[token_index] = label
    return SemanticMaskSet(masks=masks, token_labels=token_labels, source="encoder_similarity")


def _overlap_weights(src: int, dst: int) -> np.ndarray:
    """(dst, src) row-stochastic matrix of fractional cell overlaps."""
    weights = np.zeros((dst, src))
    scale = src / dst
    for j in range(dst):
        lo, hi = j * scale, (j + 1) * scale
        for i in range(int(np.floor(lo)), min(int(np.ceil(hi)), src)):
            weights[j, i] = max(0.0, min(hi, i + 1) - max(lo, i))
    return weights / scale


def resample_binary_mask(mask: np.ndarray, target_hw: Tuple[int, int]) -> np.ndarray:
    """Resample a binary mask by block majority, ties resolved to 1.

    Each target cell takes the area-weighted mean of the source cells it
    covers and binarizes at 0.5.  For integer downsampling ratios this is
    exact block majority; preserves thin regions better than
    nearest-neighbor.
    """
    th, tw = target_hw
    if mask.shape == (th, tw):
        return mask.astype(np.uint8).copy()
    wr = _overlap_weights(mask.shape[0], th)
    wc = _overlap_weights(mask.shape[1], tw)
    frac = wr @ mask.astype(np.float64) @ wc.T
    return (frac >= 0.5 - 1e-9).astype(np.uint8)


def resample_mask_set(masks: SemanticMaskSet, target_hw: Tuple[int, int]) -> SemanticMaskSet:
    return SemanticMaskSet(
        masks={i: resample_binary_mask(m, target_hw) for i, m in masks.masks.items()},
        token_labels=dict(masks.token_labels),
        source=masks.source,
    )


def masks_from_segmentation(
    segmentation: np.ndarray,
    label_to_token: Mapping[object, int],
    target_hw: Tuple[int, int],
    token_labels: Mapping[int, str] | None = None,
) -> SemanticMaskSet:
    """Build per-token masks from a dense segmentation map.

    Args:
        segmentation: (H, W) array of segmentation labels (any comparable
            values, typically integer class ids).
        label_to_token: segmentation label -> token index.  Labels absent
            from the segmentation yield empty (all-zero) masks, reported by
            :meth:`SemanticMaskSet.empty_token_indices`.
        target_hw: Output resolution; downsampling uses block majority with
            ties resolved to 1.
        token_labels: Optional token index -> display label; defaults to
            the stringified segmentation label.
    """
    if segmentation.ndim != 2:
        raise ContractError(f"segmentation must be (H, W), got {tuple(segmentation.shape)}")
    masks: Dict[int, np.ndarray] = {}
    names: Dict[int, str] = {}
    for label, token_index in label_to_token.items():
        indicator = (segmentation == label).astype(np.uint8)
        resampled = resample_binary_mask(indicator, target_hw)
        if token_index in masks:
            masks[token_index] = np.maximum(masks[token_index], resampled)
        else:
            masks[token_index] = resampled
            names[token_index] = str(label)
    if token_labels:
        names.update({i: token_labels[i] for i in names if i in token_labels})
    return SemanticMaskSet(masks=masks, token_labels=names, source="dataset_segmentation")


def load_label_vocabulary(path) -> Tuple[str, ...]:
    """Read a newline-delimited UTF-8 label vocabulary file."""
    text = Path(path).read_text(encoding="utf-8")
    return tuple(line.strip() for line in text.splitlines() if line.strip())


def match_caption_tokens(tokens: Sequence[str], vocabulary: Iterable[str]) -> Dict[int, str]:
    """Associate caption tokens with vocabulary labels by exact match.

    Multi-token labels use their first token for the match and keep the
    full label string.  Returns token_index -> label for the first
    occurrence of each matched label.
    """
    first_token_to_label = {}
    for label in vocabulary:
        head = label.lower().split()[0]
        first_token_to_label.setdefault(head, label)
    out: Dict[int, str] = {}
    seen = set()
    for idx, tok in enumerate(tokens):
        label = first_token_to_label.get(tok.lower())
        if label is not None and label not in seen:
            out[idx] = label
            seen.add(label)
    return out


def export_mask_set(masks: SemanticMaskSet, base_path) -> Tuple[Path, Path]:
    """Write a mask set as a multi-page lossless image stack plus JSON index.

    Returns (stack_path, index_path).  Pages follow ascending token index.
    """
    from PIL import Image

    base = Path(base_path)
    stack_path = base.with_suffix(".tiff")
    index_path = base.with_suffix(".json")
    order = sorted(masks.masks)
    pages = [Image.fromarray(masks.masks[i] * 255, mode="L") for i in order]
    if not pages:
        raise InputError("cannot export an empty mask set")
    pages[0].save(stack_path, save_all=True, append_images=pages[1:], compression="tiff_deflate")
    index = {
        "schema_version": MASK_EXPORT_SCHEMA_VERSION,
        "source": masks.source,
        "pages": [
            {"page": k, "token_index": i, "label": masks.token_labels[i]}
            for k, i in enumerate(order)
        ],
    }
    index_path.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return stack_path, index_path
