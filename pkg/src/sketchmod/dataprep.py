"""Bridge from manifest entries to training samples with supervision masks.

Synthetic entries take their masks from the dataset segmentation map;
freehand entries derive them by thresholding frozen-encoder features
against label embeddings.  Supervised tokens are the caption tokens that
exactly match a vocabulary label (multi-token labels match on their first
token); when nothing matches, every caption token is supervised via the
encoder-similarity path so the sample still carries usable masks.
"""

from __future__ import annotations

from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .data_eval import DatasetManifest, ManifestEntry
from .pipeline import TrainingSample
from .rasters import load_label_map, load_raster, resize_raster, to_grayscale
from .seeding import token_embedding
from .sketch_semantics import (
    EncoderConfig,
    SemanticMaskSet,
    derive_masks,
    masks_from_segmentation,
    match_caption_tokens,
)

LABEL_EMBEDDING_SALT = "label"


def _derived_masks(
    sketch: np.ndarray,
    tokens: Sequence[str],
    token_map: Dict[int, str],
    encoder,
    threshold: float,
) -> SemanticMaskSet:
    grid = encoder.encode(sketch, EncoderConfig(frozen_reference=True))
    if not token_map:
        token_map = {i: tok for i, tok in enumerate(tokens)}
    labels = [
        (idx, label, token_embedding(label, grid.channels, salt=LABEL_EMBEDDING_SALT))
        for idx, label in token_map.items()
    ]
    return derive_masks(grid, labels, threshold=threshold)


def build_sample(
    entry: ManifestEntry,
    manifest: DatasetManifest,
    encoder,
    vocabulary: Sequence[str],
    label_id_map: Mapping[str, int],
    threshold: float = 0.5,
    image_size: Optional[int] = None,
) -> TrainingSample:
    sketch = to_grayscale(load_raster(manifest.resolve(entry.sketch_path)))
    image = (
        to_grayscale(load_raster(manifest.resolve(entry.image_path)))
        if entry.image_path
        else None
    )
    if image_size is not None:
        sketch = resize_raster(sketch, image_size)
        if image is not None:
            image = resize_raster(image, image_size)
    tokens = entry.caption.lower().split()
    token_map = match_caption_tokens(tokens, vocabulary)

    if entry.segmentation_path and token_map:
        segmentation = load_label_map(manifest.resolve(entry.segmentation_path))
        label_to_token = {
            label_id_map[label]: idx for idx, label in token_map.items() if label in label_id_map
        }
        masks = masks_from_segmentation(
            segmentation,
            label_to_token,
            target_hw=segmentation.shape,
            token_labels={idx: label for idx, label in token_map.items()},
        )
    else:
        masks = _derived_masks(sketch, tokens, token_map, encoder, threshold)

    return TrainingSample(
        sketch=sketch,
        caption=entry.caption,
        masks=masks,
        is_freehand=entry.kind == "freehand",
        image=None if entry.kind == "freehand" else image,
        reference_image=image,
    )


def prepare_training_samples(
    manifest: DatasetManifest,
    encoder,
    vocabulary: Sequence[str],
    label_id_map: Optional[Mapping[str, int]] = None,
    threshold: float = 0.5,
    split: str = "train",
    image_size: Optional[int] = None,
) -> Tuple[List[TrainingSample], List[TrainingSample]]:
    """Returns (freehand_samples, synthetic_samples) for one split.

    With ``image_size`` set, rasters are resized to the backbone geometry.
    """
    if label_id_map is None:
        label_id_map = {label: i + 1 for i, label in enumerate(vocabulary)}
    freehand: List[TrainingSample] = []
    synthetic: List[TrainingSample] = []
    for entry in manifest.split(split):
        sample = build_sample(
            entry, manifest, encoder, vocabulary, label_id_map, threshold, image_size
        )
        (freehand if sample.is_freehand else synthetic).append(sample)
    return freehand, synthetic
