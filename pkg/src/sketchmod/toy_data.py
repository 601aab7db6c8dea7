"""Deterministic toy scenes: images, sketches, segmentations, manifest.

Scenes are 1-2 gray shapes (box / disk / stripe) on a light background.
Synthetic sketches are derived from the image with the edge-map stand-in,
so they are pixel-aligned; freehand sketches draw the shape outlines at
jittered positions and sizes, so they are deliberately misaligned with the
image, mirroring how a human sketches from memory.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .data_eval import DatasetManifest, ManifestEntry, save_manifest, synthesize_sketch
from .rasters import save_label_map, save_raster
from .seeding import stable_seed

TOY_LABELS = ("box", "disk", "stripe")
BACKGROUND = 0.9


def _shape_mask(kind: str, size: int, cx: float, cy: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "box":
        return (np.abs(xx - cx) <= radius) & (np.abs(yy - cy) <= radius)
    if kind == "disk":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
    if kind == "stripe":
        return np.abs(xx - cx) <= max(2.0, radius / 2.0)
    raise ValueError(f"unknown shape {kind!r}")


def _outline(mask: np.ndarray) -> np.ndarray:
    from scipy import ndimage

    interior = ndimage.binary_erosion(mask, structure=np.ones((3, 3)))
    return mask & ~interior


def render_scene(size: int, seed: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, str]:
    """Render one scene.

    Returns (image, segmentation, freehand_sketch, caption); the
    segmentation holds label ids (0 background, 1 + index into TOY_LABELS).
    """
    rng = np.random.default_rng(seed)
    n_shapes = int(rng.integers(1, 3))
    kinds = list(rng.choice(TOY_LABELS, size=n_shapes, replace=False))

    image = np.full((size, size), BACKGROUND)
    segmentation = np.zeros((size, size), dtype=np.int64)
    freehand = np.ones((size, size))
    for kind in kinds:
        cx, cy = rng.uniform(size * 0.25, size * 0.75, size=2)
        radius = rng.uniform(size * 0.12, size * 0.22)
        gray = rng.uniform(0.15, 0.45)
        mask = _shape_mask(kind, size, cx, cy, radius)
        image[mask] = gray
        segmentation[mask] = 1 + TOY_LABELS.index(kind)

        # Freehand stroke: same shape redrawn with jittered pose.
        jx, jy = rng.uniform(-size * 0.08, size * 0.08, size=2)
        jr = radius * rng.uniform(0.8, 1.2)
        freehand[_outline(_shape_mask(kind, size, cx + jx, cy + jy, jr))] = 0.0

    caption = " and ".join(f"a {kind}" for kind in kinds)
    return image, segmentation, freehand, caption


def build_toy_dataset(
    root, n_pairs: int = 16, n_test: int = 4, image_size: int = 64, seed: int = 0
) -> Path:
    """Write a toy dataset under ``root`` and return the manifest path.

    Each scene contributes one freehand and one synthetic entry sharing the
    image, caption and segmentation.  Also writes ``labels.txt`` (the label
    vocabulary, line order defining segmentation ids 1..N).
    """
    root = Path(root)
    for sub in ("images", "sketches", "segmentations"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    entries: List[ManifestEntry] = []
    total = n_pairs + n_test
    for i in range(total):
        split = "train" if i < n_pairs else "test"
        image, segmentation, freehand, caption = render_scene(
            image_size, stable_seed("toy-scene", seed, i)
        )
        image_rel = f"images/img_{i:04d}.png"
        seg_rel = f"segmentations/seg_{i:04d}.png"
        free_rel = f"sketches/free_{i:04d}.png"
        syn_rel = f"sketches/syn_{i:04d}.png"
        save_raster(root / image_rel, image)
        save_label_map(root / seg_rel, segmentation)
        save_raster(root / free_rel, freehand)
        save_raster(root / syn_rel, synthesize_sketch(image))
        common = dict(image_path=image_rel, segmentation_path=seg_rel, caption=caption, split=split)
        entries.append(ManifestEntry(sketch_path=free_rel, kind="freehand", **common))
        entries.append(ManifestEntry(sketch_path=syn_rel, kind="synthetic", **common))

    (root / "labels.txt").write_text("\n".join(TOY_LABELS) + "\n", encoding="utf-8")
    manifest_path = root / "manifest.json"
    save_manifest(DatasetManifest(entries=entries, root=root), manifest_path)
    return manifest_path


def label_ids(vocabulary) -> Dict[str, int]:
    """Vocabulary line order -> segmentation ids (background is 0)."""
    return {label: i + 1 for i, label in enumerate(vocabulary)}
