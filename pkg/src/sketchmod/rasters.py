"""Raster image IO: lossless files and base64 payloads.

Images travel through the toolkit as float arrays in [0, 1], grayscale
(H, W) or channel-first (C, H, W).
"""

from __future__ import annotations

import base64
import io
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """(H, W) or (C, H, W) -> (H, W) luminance."""
    if image.ndim == 2:
        return image
    if image.ndim == 3:
        return image.mean(axis=0)
    raise InputError(f"expected (H, W) or (C, H, W) image, got {image.shape}")


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def _to_pil(image: np.ndarray) -> Image.Image:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return Image.fromarray(_to_uint8(arr), mode="L")
    if arr.ndim == 3 and arr.shape[0] == 1:
        return Image.fromarray(_to_uint8(arr[0]), mode="L")
    if arr.ndim == 3 and arr.shape[0] == 3:
        return Image.fromarray(_to_uint8(arr).transpose(1, 2, 0), mode="RGB")
    raise InputError(f"cannot rasterize array of shape {arr.shape}")


def _from_pil(img: Image.Image) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        return arr
    return arr.transpose(2, 0, 1)


def save_raster(path, image: np.ndarray) -> Path:
    path = Path(path)
    _to_pil(image).save(path)
    return path


def load_raster(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise InputError(f"raster not found: {path}")
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB" if "A" in img.mode or img.mode == "P" else "L")
        return _from_pil(img)


def resize_raster(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear-resize a [0,1] raster to size x size (deterministic)."""
    if image.ndim == 2 and image.shape == (size, size):
        return image
    pil = _to_pil(image).resize((size, size), Image.BILINEAR)
    return _from_pil(pil)


def save_label_map(path, labels: np.ndarray) -> Path:
    """Write an integer label map (e.g. a segmentation) losslessly."""
    arr = np.asarray(labels)
    if arr.min() < 0 or arr.max() > 255:
        raise InputError("label maps must hold ids in [0, 255]")
    path = Path(path)
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)
    return path


def load_label_map(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise InputError(f"label map not found: {path}")
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.int64)


def encode_raster_b64(image: np.ndarray) -> str:
    buf = io.BytesIO()
    _to_pil(image).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_raster_b64(payload: str) -> np.ndarray:
    try:
        raw = base64.b64decode(payload, validate=True)
        with Image.open(io.BytesIO(raw)) as img:
            if img.mode not in ("L", "RGB"):
                img = img.convert("L")
            return _from_pil(img)
    except InputError:
        raise
    except Exception as exc:
        raise InputError(f"could not decode raster payload: {exc}") from exc
