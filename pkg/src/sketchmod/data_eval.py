"""Dataset ingestion, the synthetic-sketch stand-in, and the metric suite.

Metrics follow the usual contracts: Fréchet distance between Gaussian
feature fits (visual quality), cosine similarity between sketch and image
embeddings (sketch adherence), and a perceptual distance over normalized
deep features (fidelity to references).  Feature extractors are injected;
the shipped toy extractors keep the whole suite runnable offline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import ndimage

from .errors import ContractError, InputError, NumericError
from .rasters import to_grayscale
from .seeding import reseed_module, stable_seed

MANIFEST_SCHEMA_VERSION = 1

VALID_SPLITS = ("train", "test")
VALID_KINDS = ("freehand", "synthetic")


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    sketch_path: str
    caption: str
    split: str
    kind: str
    image_path: Optional[str] = None
    segmentation_path: Optional[str] = None

    def validate(self, index: int, root: Path) -> None:
        if self.split not in VALID_SPLITS:
            raise InputError(f"entry {index}: split must be one of {VALID_SPLITS}")
        if self.kind not in VALID_KINDS:
            raise InputError(f"entry {index}: kind must be one of {VALID_KINDS}")
        if not self.caption or not self.caption.strip():
            raise InputError(f"entry {index}: caption is empty")
        if self.kind == "synthetic" and not self.image_path:
            raise InputError(f"entry {index}: synthetic entries must have an image_path")
        for name in ("sketch_path", "image_path", "segmentation_path"):
            rel = getattr(self, name)
            if rel is not None and not (root / rel).exists():
                raise InputError(f"entry {index}: {name} does not exist: {rel}")


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    root: Path = field(default_factory=Path)

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def split(self, name: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def by_kind(self, kind: str, split: Optional[str] = None) -> List[ManifestEntry]:
        return [
            e for e in self.entries if e.kind == kind and (split is None or e.split == split)
        ]


_ENTRY_FIELDS = ("sketch_path", "image_path", "caption", "segmentation_path", "split", "kind")


def load_manifest(path) -> DatasetManifest:
    """Load and validate a dataset manifest.

    Errors name the offending entry by index.  Entry order is preserved.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict) or "entries" not in raw:
        raise InputError("manifest must be an object with an 'entries' list")
    if raw.get("schema_version", MANIFEST_SCHEMA_VERSION) != MANIFEST_SCHEMA_VERSION:
        raise InputError(f"unsupported manifest schema_version {raw.get('schema_version')}")

    root = path.parent
    entries = []
    for i, item in enumerate(raw["entries"]):
        unknown = set(item) - set(_ENTRY_FIELDS)
        if unknown:
            raise InputError(f"entry {i}: unknown fields {sorted(unknown)}")
        missing = {"sketch_path", "caption", "split", "kind"} - set(item)
        if missing:
            raise InputError(f"entry {i}: missing fields {sorted(missing)}")
        entry = ManifestEntry(**item)
        entry.validate(i, root)
        entries.append(entry)

    seen: Dict[str, str] = {}
    for i, e in enumerate(entries):
        prior = seen.get(e.sketch_path)
        if prior is not None and prior != e.split:
            raise InputError(f"entry {i}: sketch_path {e.sketch_path} appears in both splits")
        seen[e.sketch_path] = e.split
    return DatasetManifest(entries=entries, root=root)


def save_manifest(manifest: DatasetManifest, path) -> Path:
    """Write the canonical JSON form (stable key order, two-space indent)."""
    path = Path(path)
    payload = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "entries": [
            {k: getattr(e, k) for k in _ENTRY_FIELDS if getattr(e, k) is not None}
            for e in manifest.entries
        ],
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Synthetic sketch stand-in
# ---------------------------------------------------------------------------


def synthesize_sketch(image: np.ndarray) -> np.ndarray:
    """Derive a line drawing from an image: dark-region boundaries, thinned.

    Stand-in for a learned photo-to-sketch generator.  The image is
    binarized at mid-tone, the one-pixel inner boundary of the dark region
    is extracted and thinned to single-pixel strokes.  Deterministic, and
    idempotent on its own output (a thin stroke set is its own boundary
    and its own skeleton).  Returns black strokes (0) on white (1).
    """
    from skimage.morphology import thin

    gray = to_grayscale(np.asarray(image, dtype=np.float64))
    lo, hi = gray.min(), gray.max()
    if hi - lo < 1e-6:
        return np.ones_like(gray)
    dark = gray <= (lo + hi) / 2.0
    interior = ndimage.binary_erosion(dark, structure=np.ones((3, 3)))
    boundary = dark & ~interior
    strokes = thin(boundary)
    return 1.0 - strokes.astype(np.float64)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _check_covariance(cov: np.ndarray, name: str) -> np.ndarray:
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ContractError(f"{name} must be square, got {cov.shape}")
    scale = max(1.0, float(np.abs(cov).max()))
    if not np.allclose(cov, cov.T, atol=1e-8 * scale):
        raise ContractError(f"{name} must be symmetric")
    eigvals = np.linalg.eigvalsh((cov + cov.T) / 2.0)
    if eigvals.min() < -1e-8 * scale:
        raise NumericError(f"{name} is not positive semi-definite (min eig {eigvals.min():.3e})")
    return (cov + cov.T) / 2.0


def sqrtm_psd(matrix: np.ndarray, clip_tol: float = 1e-10) -> np.ndarray:
    """Symmetric PSD matrix square root via eigendecomposition.

    Eigenvalues in [-clip_tol * scale, 0) are clipped to zero; anything
    more negative raises, since the input was supposed to be PSD.
    """
    sym = (matrix + matrix.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(sym)
    scale = max(1.0, float(np.abs(eigvals).max()))
    if eigvals.min() < -clip_tol * scale:
        raise NumericError(f"matrix has negative eigenvalue {eigvals.min():.3e} beyond tolerance")
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def frechet_distance(
    mu1: np.ndarray, cov1: np.ndarray, mu2: np.ndarray, cov2: np.ndarray
) -> float:
    """||mu1 - mu2||^2 + tr(C1 + C2 - 2 (C1 C2)^{1/2}).

    The product square root is computed as the PSD square root of the
    symmetrized product s1 @ C2 @ s1 with s1 = sqrt(C1).
    """
    mu1 = np.asarray(mu1, dtype=np.float64).reshape(-1)
    mu2 = np.asarray(mu2, dtype=np.float64).reshape(-1)
    if mu1.shape != mu2.shape:
        raise ContractError(f"mean dimensions differ: {mu1.shape} vs {mu2.shape}")
    cov1 = _check_covariance(cov1, "cov1")
    cov2 = _check_covariance(cov2, "cov2")
    if cov1.shape[0] != mu1.shape[0] or cov2.shape[0] != mu1.shape[0]:
        raise ContractError("covariance dimensions must match the means")

    s1 = sqrtm_psd(cov1)
    cross = sqrtm_psd(s1 @ cov2 @ s1)
    value = float(np.sum((mu1 - mu2) ** 2) + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(cross))
    # Exact-zero case accumulates tiny negative round-off.
    return max(value, 0.0) if value > -1e-8 else value


def clip_similarity(
    sketch_embedding: np.ndarray, image_embedding: np.ndarray, scale: float = 1.0
) -> float:
    """Cosine similarity between two embeddings, optionally scaled by a
    constant (reported similarity magnitudes above 1 imply such a scale;
    the default reports raw cosine)."""
    a = np.asarray(sketch_embedding, dtype=np.float64).reshape(-1)
    b = np.asarray(image_embedding, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ContractError(f"embedding dimensions differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ContractError("zero-norm embedding")
    return scale * float(a @ b / (na * nb))


def _normalize_features(feats: np.ndarray) -> np.ndarray:
    """Unit-normalize the channel vector at each spatial position."""
    norms = np.sqrt((feats**2).sum(axis=0, keepdims=True))
    return feats / (norms + 1e-10)


def perceptual_distance(a: np.ndarray, b: np.ndarray, extractor) -> float:
    """Mean over layers of the MSE between unit-normalized feature maps."""
    if np.asarray(a).shape != np.asarray(b).shape:
        raise ContractError(f"image shapes differ: {np.asarray(a).shape} vs {np.asarray(b).shape}")
    feats_a = extractor.feature_maps(a)
    feats_b = extractor.feature_maps(b)
    layer_means = []
    for fa, fb in zip(feats_a, feats_b):
        na, nb = _normalize_features(fa), _normalize_features(fb)
        layer_means.append(((na - nb) ** 2).mean())
    return float(np.mean(layer_means))


class ToyFeatureExtractor:
    """Seeded convolutional feature extractor for offline metric runs.

    ``feature_maps`` returns per-layer (C, h, w) activations (perceptual
    distance); ``embed`` mean-pools them into one vector (Fréchet fits and
    similarity).  Adapters may bind pretrained networks to the same two
    methods.
    """

    def __init__(self, channels: Tuple[int, ...] = (8, 16, 32), seed: int = 0):
        layers = []
        in_ch = 1
        for out_ch in channels:
            layers.append(torch.nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1))
            in_ch = out_ch
        self._net = torch.nn.ModuleList(layers)
        reseed_module(self._net, stable_seed("toy-feature-extractor", seed), scale=0.5)
        for p in self._net.parameters():
            p.requires_grad_(False)

    def feature_maps(self, image: np.ndarray) -> List[np.ndarray]:
        gray = to_grayscale(np.asarray(image, dtype=np.float64))
        x = torch.as_tensor(gray, dtype=torch.float32)[None, None]
        out = []
        with torch.no_grad():
            for layer in self._net:
                x = torch.tanh(layer(x))
                out.append(x.squeeze(0).numpy().astype(np.float64))
        return out

    def embed(self, image: np.ndarray) -> np.ndarray:
        maps = self.feature_maps(image)
        return np.concatenate([m.mean(axis=(1, 2)) for m in maps])


@dataclass
class MetricExtractors:
    """Pluggable feature providers for the three metrics."""

    image_embedder: object
    sketch_embedder: object
    perceptual: object

    @classmethod
    def toy(cls, seed: int = 0) -> "MetricExtractors":
        image = ToyFeatureExtractor(seed=seed)
        sketch = ToyFeatureExtractor(seed=seed + 1)
        return cls(image_embedder=image, sketch_embedder=sketch, perceptual=image)


@dataclass
class MetricReport:
    fid: float
    clip_sim: float
    lpips: float
    n_samples: int

    def as_dict(self) -> Dict:
        return {
            "fid": self.fid,
            "clip_sim": self.clip_sim,
            "lpips": self.lpips,
            "n_samples": self.n_samples,
        }

    def as_table(self) -> str:
        """Plain-text table in FID (down), CLIP (up), LPIPS (down) order."""
        header = f"{'FID↓':>12}  {'CLIP↑':>8}  {'LPIPS↓':>8}  {'n':>5}"
        row = f"{self.fid:12.4f}  {self.clip_sim:8.4f}  {self.lpips:8.4f}  {self.n_samples:5d}"
        return header + "\n" + row


def _gaussian_fit(features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mu = features.mean(axis=0)
    cov = np.cov(features, rowvar=False)
    return mu, np.atleast_2d(cov)


def evaluate(
    generated: Sequence[np.ndarray],
    references: Sequence[np.ndarray],
    sketches: Sequence[np.ndarray],
    extractors: MetricExtractors,
    clip_scale: float = 1.0,
) -> MetricReport:
    """Aggregate the three metrics over sample sets.

    Fréchet distance compares Gaussian fits of generated vs reference
    embeddings; similarity averages sketch/generated cosine pairs; the
    perceptual distance averages generated/reference pairs.
    """
    if not generated or not references or not sketches:
        raise ContractError("generated, references and sketches must be non-empty")
    if len(generated) < 2 or len(references) < 2:
        raise ContractError("need at least 2 generated and 2 reference samples for covariance")
    if len(sketches) != len(generated):
        raise ContractError("need one sketch per generated image")

    gen_feats = np.stack([extractors.image_embedder.embed(im) for im in generated])
    ref_feats = np.stack([extractors.image_embedder.embed(im) for im in references])
    fid = frechet_distance(*_gaussian_fit(gen_feats), *_gaussian_fit(ref_feats))

    sims = [
        clip_similarity(extractors.sketch_embedder.embed(sk), gf, scale=clip_scale)
        for sk, gf in zip(sketches, gen_feats)
    ]
    lpips_vals = [
        perceptual_distance(g, r, extractors.perceptual) for g, r in zip(generated, references)
    ]
    return MetricReport(
        fid=float(fid),
        clip_sim=float(np.mean(sims)),
        lpips=float(np.mean(lpips_vals)),
        n_samples=len(generated),
    )
