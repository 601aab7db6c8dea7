"""Three-branch noise modulation network.

Produces per-element scale and shift maps from three inputs — semantic
sketch features, the predicted noise, and the noisy latent — and applies
them to the noise prediction as

    eps' = eps * (1 + S) + B.

Architecture: each modality runs through its own downsampling path (the
sketch path reduces channels and is bilinearly resampled onto the latent
paths' 1/8-resolution grid; the noise and latent paths interleave
double-convolutions with 2x max-pooling).  The concatenated features pass
through a timestep-conditioned fusion block, three transposed-convolution
upsampling stages bring the result back to the latent resolution, and a
final convolution emits 8 channels that are split into the two 4-channel
maps.  The final convolution is zero-initialized by default so training
starts at the identity modulation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import sinusoidal_embedding
from .errors import ConfigError, ContractError, GeometryError
from .seeding import reseed_module, stable_seed
from .sketch_semantics import SketchFeatureGrid

CHECKPOINT_SCHEMA_VERSION = 1

# Channel widths of the noise and latent downsampling paths, per stage.
PATH_CHANNELS = (16, 32, 64, 128)


@dataclass(frozen=True)
class ModNetConfig:
    """Geometry of the modulation network.

    The same code path runs the reference geometry (512-channel sketch
    features over 4 x 128 x 128 latents) and small test geometries.

    Attributes:
        sketch_channels: Channels of the incoming sketch feature grid.
            The sketch path halves this twice (512 -> 256 -> 128).
        latent_channels: Channels of the latent / noise tensors.
        fusion_channels: Width of the fused representation (the three
            branch outputs, sketch_channels//4 + 128 + 128 at reference
            scale, are reduced to this by the fusion block).
        time_embed_dim: Sinusoidal timestep embedding dimension.
        zero_init_final: Zero-initialize the final convolution so the
            network starts as the identity modulation (S = B = 0).
        seed: Parameter initialization seed.
    """

    sketch_channels: int = 512
    latent_channels: int = 4
    fusion_channels: int = 256
    time_embed_dim: int = 256
    zero_init_final: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("sketch_channels", "latent_channels", "fusion_channels", "time_embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.sketch_channels % 4:
            raise ConfigError("sketch_channels must be divisible by 4 (path halves it twice)")
        if self.fusion_channels % 16:
            raise ConfigError("fusion_channels must be divisible by 16 (three 2x upsamples)")


@dataclass
class ModulationMaps:
    """Scale and shift maps for one timestep, each shaped like the latent."""

    scale: torch.Tensor
    shift: torch.Tensor
    t: int

    def __post_init__(self):
        if self.scale.shape != self.shift.shape:
            raise ContractError(
                f"scale shape {tuple(self.scale.shape)} != shift shape {tuple(self.shift.shape)}"
            )


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(4 if channels % 4 == 0 else 1, channels)


class DoubleConv(nn.Module):
    """Two 3x3 convolutions, each followed by group normalization and SiLU.

    The hidden width is ``in_channels + out_channels // 2``; this width
    rule is what puts the reference configuration at its ~9.4M
    trainable-parameter budget.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        mid = in_channels + out_channels // 2
        self.conv1 = nn.Conv2d(in_channels, mid, 3, padding=1)
        self.norm1 = _norm(mid)
        self.conv2 = nn.Conv2d(mid, out_channels, 3, padding=1)
        self.norm2 = _norm(out_channels)
        self.mid_channels = mid

    def forward(self, x, time_bias: torch.Tensor | None = None):
        h = self.norm1(self.conv1(x))
        if time_bias is not None:
            h = h + time_bias[:, :, None, None]
        h = F.silu(h)
        return F.silu(self.norm2(self.conv2(h)))


class _InputPath(nn.Module):
    """Downsampling path for the noise / latent modalities.

    Four double-convolutions interleaved with three 2x max-pools, taking
    the 4-channel input to 128 channels at 1/8 resolution.
    """

    def __init__(self, in_channels: int):
        super().__init__()
        widths = (in_channels,) + PATH_CHANNELS
        self.blocks = nn.ModuleList(
            DoubleConv(widths[i], widths[i + 1]) for i in range(len(PATH_CHANNELS))
        )

    def forward(self, x):
        for i, block in enumerate(self.blocks):
            if i > 0:
                x = F.max_pool2d(x, 2)
            x = block(x)
        return x


class ModulationNetwork(nn.Module):
    """Encoder-decoder CNN emitting scale/shift maps from three modalities."""

    def __init__(self, config: ModNetConfig = ModNetConfig()):
        super().__init__()
        self.config = config
        sc = config.sketch_channels
        fc = config.fusion_channels

        self.sketch_block1 = DoubleConv(sc, sc // 2)
        self.sketch_block2 = DoubleConv(sc // 2, sc // 4)
        self.noise_path = _InputPath(config.latent_channels)
        self.latent_path = _InputPath(config.latent_channels)

        fusion_in = sc // 4 + 2 * PATH_CHANNELS[-1]
        self.fusion = DoubleConv(fusion_in, fc)
        self.time_mlp = nn.Sequential(
            nn.Linear(config.time_embed_dim, config.time_embed_dim),
            nn.SiLU(),
            nn.Linear(config.time_embed_dim, self.fusion.mid_channels),
        )

        out_ch = 2 * config.latent_channels
        self.up1 = nn.ConvTranspose2d(fc, fc // 2, 2, stride=2)
        self.up_conv1 = DoubleConv(fc // 2, fc // 4)
        self.up2 = nn.ConvTranspose2d(fc // 4, fc // 8, 2, stride=2)
        self.up_conv2 = DoubleConv(fc // 8, fc // 16)
        self.up3 = nn.ConvTranspose2d(fc // 16, out_ch, 2, stride=2)
        self.up_conv3 = DoubleConv(out_ch, out_ch)
        self.final = nn.Conv2d(out_ch, out_ch, 3, padding=1)

        reseed_module(self, stable_seed("modnet", config.seed))
        if config.zero_init_final:
            with torch.no_grad():
                self.final.weight.zero_()
                self.final.bias.zero_()

    def parameter_count(self) -> int:
        """Exact trainable-parameter count of this network."""
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def forward(
        self,
        sketch: SketchFeatureGrid | torch.Tensor,
        eps: torch.Tensor,
        z_t: torch.Tensor,
        t: int,
    ) -> ModulationMaps:
        """Compute scale and shift maps for one timestep.

        Args:
            sketch: (C_sketch, h, w) semantic feature grid.
            eps: (C_latent, H, W) predicted noise.
            z_t: (C_latent, H, W) noisy latent; H and W must be divisible
                by 8 (three 2x downsamples).
            t: Diffusion timestep (conditions the fusion block).

        Returns:
            ModulationMaps with scale and shift of shape (C_latent, H, W).
        """
        feats = sketch.features if isinstance(sketch, SketchFeatureGrid) else sketch
        if feats.shape[0] != self.config.sketch_channels:
            raise ContractError(
                f"sketch features have {feats.shape[0]} channels, "
                f"config expects {self.config.sketch_channels}"
            )
        if eps.shape != z_t.shape:
            raise ContractError(f"eps shape {tuple(eps.shape)} != z_t shape {tuple(z_t.shape)}")
        if eps.shape[0] != self.config.latent_channels:
            raise ContractError(
                f"latent has {eps.shape[0]} channels, config expects {self.config.latent_channels}"
            )
        h, w = z_t.shape[1], z_t.shape[2]
        if h % 8 or w % 8:
            raise GeometryError(f"latent spatial size {h}x{w} must be divisible by 8")

        dtype = eps.dtype
        s = self.sketch_block2(self.sketch_block1(feats.to(dtype).unsqueeze(0)))
        s = F.interpolate(s, size=(h // 8, w // 8), mode="bilinear", align_corners=False)
        n = self.noise_path(eps.unsqueeze(0))
        l = self.latent_path(z_t.unsqueeze(0))

        t_vec = torch.tensor([float(t)], dtype=dtype)
        time_bias = self.time_mlp(sinusoidal_embedding(t_vec, self.config.time_embed_dim))
        fused = self.fusion(torch.cat([s, n, l], dim=1), time_bias=time_bias)

        x = self.up_conv1(self.up1(fused))
        x = self.up_conv2(self.up2(x))
        x = self.up_conv3(self.up3(x))
        out = self.final(x).squeeze(0)
        scale, shift = torch.chunk(out, 2, dim=0)
        return ModulationMaps(scale=scale, shift=shift, t=t)


def modulate(eps: torch.Tensor, maps: ModulationMaps) -> torch.Tensor:
    """Apply the modulation rule elementwise: eps * (1 + S) + B."""
    if eps.shape != maps.scale.shape:
        raise ContractError(
            f"eps shape {tuple(eps.shape)} != maps shape {tuple(maps.scale.shape)}"
        )
    return eps * (1.0 + maps.scale) + maps.shift


def parameter_count(config: ModNetConfig) -> int:
    """Trainable-parameter count of a network built from ``config``."""
    return ModulationNetwork(config).parameter_count()


def save_checkpoint(network: ModulationNetwork, path) -> Tuple[Path, Path]:
    """Write named parameter arrays plus a JSON sidecar.

    Returns (archive_path, sidecar_path).  The sidecar records the config,
    the parameter count and a schema version so checkpoints are
    self-describing.
    """
    archive = Path(path)
    if archive.suffix != ".npz":
        archive = archive.with_suffix(".npz")
    arrays = {name: p.detach().cpu().numpy() for name, p in network.state_dict().items()}
    np.savez(archive, **arrays)
    sidecar = archive.with_suffix(".json")
    sidecar.write_text(
        json.dumps(
            {
                "schema_version": CHECKPOINT_SCHEMA_VERSION,
                "config": asdict(network.config),
                "parameter_count": network.parameter_count(),
            },
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    return archive, sidecar


def load_checkpoint(path) -> ModulationNetwork:
    archive = Path(path)
    if archive.suffix != ".npz":
        archive = archive.with_suffix(".npz")
    sidecar = archive.with_suffix(".json")
    if not archive.exists() or not sidecar.exists():
        raise ConfigError(f"checkpoint not found: {archive}")
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    if meta.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ConfigError(f"unsupported checkpoint schema: {meta.get('schema_version')}")
    network = ModulationNetwork(ModNetConfig(**meta["config"]))
    with np.load(archive) as data:
        state = {name: torch.from_numpy(data[name]) for name in data.files}
    network.load_state_dict(state)
    return network
