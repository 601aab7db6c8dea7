"""Latent-diffusion backbone: noise schedule, autoencoder, text-conditioned denoiser.

The backbone contract is what the rest of the toolkit builds against:

* a :class:`NoiseSchedule` with cumulative signal coefficients governing
  forward noising and denoised-latent recovery,
* an autoencoder pair mapping rasters to 4-channel latents and back,
* a denoiser predicting the noise in a latent, optionally exposing its
  cross-attention maps for probing.

The shipped :class:`ToyBackbone` is a small, fully deterministic
implementation of that contract (fixed orthogonal patch autoencoder plus a
seeded convolutional denoiser with cross-attention at selected
resolutions).  It is never trained; its purpose is to make every pipeline
path executable without pretrained weights.  Real backbones plug in via
the :class:`DiffusionBackbone` protocol.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Protocol, Tuple, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError, GeometryError, InputError
from .seeding import reseed_module, stable_seed, token_embedding

# Reference discretization used to define the built-in beta schedules.
# Schedules with fewer steps subsample this grid, which keeps the
# near-clean / near-noise endpoints intact for any step count.
REFERENCE_STEPS = 1000

LINEAR_BETA_RANGE = (1e-4, 0.02)
SCALED_LINEAR_BETA_RANGE = (0.00085, 0.012)


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep cumulative signal coefficients.

    ``alpha_bar[t]`` is the cumulative product of per-step signal ratios:
    the fraction of the clean latent surviving at timestep ``t``.  It is
    strictly decreasing, close to 1 at t=0 and close to 0 at t=T-1.

    Attributes:
        total_steps: Number of timesteps T.
        alpha_bar: float64 tensor of shape (T,), values in (0, 1].
        kind: Name of the builder that produced the schedule.
    """

    total_steps: int
    alpha_bar: torch.Tensor
    kind: str = "custom"

    def __post_init__(self):
        ab = self.alpha_bar
        if ab.ndim != 1 or ab.numel() != self.total_steps:
            raise ContractError(
                f"alpha_bar must have shape ({self.total_steps},), got {tuple(ab.shape)}"
            )
        if not torch.all((ab > 0) & (ab <= 1)):
            raise ContractError("alpha_bar values must lie in (0, 1]")
        if not torch.all(ab[1:] < ab[:-1]):
            raise ContractError("alpha_bar must be strictly decreasing")

    @classmethod
    def linear(cls, total_steps: int = REFERENCE_STEPS) -> "NoiseSchedule":
        return cls._from_beta_range(total_steps, LINEAR_BETA_RANGE, sqrt_space=False, kind="linear")

    @classmethod
    def scaled_linear(cls, total_steps: int = REFERENCE_STEPS) -> "NoiseSchedule":
        """Default schedule: betas linear in sqrt-space over [0.00085, 0.012]."""
        return cls._from_beta_range(
            total_steps, SCALED_LINEAR_BETA_RANGE, sqrt_space=True, kind="scaled_linear"
        )

    @classmethod
    def _from_beta_range(
        cls, total_steps: int, beta_range: Tuple[float, float], sqrt_space: bool, kind: str
    ) -> "NoiseSchedule":
        if total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        grid = max(total_steps, REFERENCE_STEPS)
        lo, hi = beta_range
        if sqrt_space:
            betas = torch.linspace(math.sqrt(lo), math.sqrt(hi), grid, dtype=torch.float64) ** 2
        else:
            betas = torch.linspace(lo, hi, grid, dtype=torch.float64)
        alpha_bar = torch.cumprod(1.0 - betas, dim=0)
        # Subsample the reference grid; spacing >= 1 keeps indices distinct
        # and therefore alpha_bar strictly decreasing.
        idx = torch.round(torch.linspace(0, grid - 1, total_steps, dtype=torch.float64)).long()
        return cls(total_steps=total_steps, alpha_bar=alpha_bar[idx], kind=kind)

    @classmethod
    def from_kind(cls, kind: str, total_steps: int) -> "NoiseSchedule":
        builders = {"linear": cls.linear, "scaled_linear": cls.scaled_linear}
        if kind not in builders:
            raise ConfigError(f"unknown schedule kind {kind!r}; expected one of {sorted(builders)}")
        return builders[kind](total_steps)

    def alpha_bar_at(self, t: int) -> float:
        if not 0 <= t < self.total_steps:
            raise ContractError(f"timestep {t} out of range [0, {self.total_steps})")
        return float(self.alpha_bar[t])


def forward_noise(
    z0: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Noise a clean latent to timestep ``t``.

    z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps
    """
    if z0.shape != eps.shape:
        raise ContractError(f"z0 shape {tuple(z0.shape)} != eps shape {tuple(eps.shape)}")
    ab = schedule.alpha_bar_at(t)
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def predict_x0(
    z_t: torch.Tensor, eps_prime: torch.Tensor, t: int, schedule: NoiseSchedule
) -> torch.Tensor:
    """Recover the denoised latent implied by a noise prediction.

    z0_hat = (z_t - sqrt(1 - alpha_bar_t) * eps') / sqrt(alpha_bar_t)

    Inverts :func:`forward_noise` exactly when ``eps_prime`` equals the
    noise actually added.  No clipping is applied to the result.
    """
    if z_t.shape != eps_prime.shape:
        raise ContractError(
            f"z_t shape {tuple(z_t.shape)} != eps_prime shape {tuple(eps_prime.shape)}"
        )
    ab = schedule.alpha_bar_at(t)
    if ab <= 0:
        raise ContractError(f"alpha_bar is singular at t={t}")
    return (z_t - math.sqrt(1.0 - ab) * eps_prime) / math.sqrt(ab)


# ---------------------------------------------------------------------------
# Conditioning and denoiser output types
# ---------------------------------------------------------------------------


@dataclass
class TextCondition:
    """Tokenized text conditioning.

    Attributes:
        token_embeddings: (L, d_text) float tensor, one row per token.
        token_labels: The L token strings, used to associate tokens with
            object labels when building supervision masks.
    """

    token_embeddings: torch.Tensor
    token_labels: list

    def __post_init__(self):
        if self.token_embeddings.ndim != 2 or self.token_embeddings.shape[0] < 1:
            raise ContractError("token_embeddings must be (L, d) with L >= 1")
        if len(self.token_labels) != self.token_embeddings.shape[0]:
            raise ContractError("token_labels length must match token_embeddings rows")

    @property
    def num_tokens(self) -> int:
        return self.token_embeddings.shape[0]


@dataclass
class AttentionMapSet:
    """Head-averaged cross-attention maps, one per probed layer.

    Attributes:
        maps: layer_id -> (P, L) tensor of softmax weights; each pixel row
            sums to 1 over the L tokens.
        resolutions: layer_id -> (h, w), with P == h * w.
    """

    maps: Dict[str, torch.Tensor]
    resolutions: Dict[str, Tuple[int, int]]

    def __post_init__(self):
        for layer_id, m in self.maps.items():
            h, w = self.resolutions[layer_id]
            if m.shape[0] != h * w:
                raise ContractError(
                    f"layer {layer_id}: {m.shape[0]} rows != {h}x{w} pixels"
                )

    @property
    def layer_ids(self):
        return list(self.maps)


@dataclass
class DenoiserOutput:
    eps_pred: torch.Tensor
    attention_maps: Optional[AttentionMapSet] = None


# ---------------------------------------------------------------------------
# Toy autoencoder: fixed orthogonal patch projection
# ---------------------------------------------------------------------------


class PatchAutoencoder:
    """Training-free autoencoder built from one orthogonal patch transform.

    Each non-overlapping ``reduction_factor`` x ``reduction_factor`` patch is
    flattened and multiplied by the first ``latent_channels`` rows of a
    seeded orthogonal matrix; decoding applies the transpose.  When
    ``latent_channels == image_channels * reduction_factor**2`` the transform
    is square, so decode(encode(x)) == x for every image.  With fewer
    latent channels the pair is an orthogonal projection: encode(decode(z))
    is still exact for every latent, and decode(encode(.)) is idempotent.
    """

    def __init__(
        self,
        image_channels: int = 1,
        reduction_factor: int = 2,
        latent_channels: int = 4,
        seed: int = 0,
    ):
        patch_dim = image_channels * reduction_factor**2
        if latent_channels > patch_dim:
            raise ConfigError(
                f"latent_channels={latent_channels} exceeds patch dimension {patch_dim}"
            )
        self.image_channels = image_channels
        self.reduction_factor = reduction_factor
        self.latent_channels = latent_channels

        rng = np.random.default_rng(stable_seed("patch-autoencoder", seed))
        q, _ = np.linalg.qr(rng.standard_normal((patch_dim, patch_dim)))
        weight = q[:latent_channels].reshape(
            latent_channels, image_channels, reduction_factor, reduction_factor
        )
        self.weight = torch.from_numpy(np.ascontiguousarray(weight))

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """(C_img, H, W) image -> (C_lat, H/r, W/r) latent."""
        if image.ndim != 3 or image.shape[0] != self.image_channels:
            raise GeometryError(
                f"expected ({self.image_channels}, H, W) image, got {tuple(image.shape)}"
            )
        r = self.reduction_factor
        if image.shape[1] % r or image.shape[2] % r:
            raise GeometryError(
                f"image size {tuple(image.shape[1:])} not divisible by reduction factor {r}"
            )
        w = self.weight.to(image.dtype)
        return F.conv2d(image.unsqueeze(0), w, stride=r).squeeze(0)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """(C_lat, h, w) latent -> (C_img, h*r, w*r) image."""
        if z.ndim != 3 or z.shape[0] != self.latent_channels:
            raise GeometryError(
                f"expected ({self.latent_channels}, h, w) latent, got {tuple(z.shape)}"
            )
        w = self.weight.to(z.dtype)
        return F.conv_transpose2d(z.unsqueeze(0), w, stride=self.reduction_factor).squeeze(0)


# ---------------------------------------------------------------------------
# Toy denoiser
# ---------------------------------------------------------------------------


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sinusoidal timestep embedding, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class _ResBlock(nn.Module):
    """GroupNorm -> SiLU -> Conv, twice, with additive time bias and skip."""

    def __init__(self, in_channels: int, out_channels: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(4, in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels)
        self.norm2 = nn.GroupNorm(4, out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = (
            nn.Conv2d(in_channels, out_channels, 1)
            if in_channels != out_channels
            else nn.Identity()
        )

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class _CrossAttention(nn.Module):
    """Multi-head cross-attention from spatial features to text tokens.

    Returns both the attended features and the head-averaged attention
    matrix (pixels x tokens) so the denoiser can expose it for probing.
    """

    def __init__(self, channels: int, context_dim: int, heads: int = 2):
        super().__init__()
        if channels % heads:
            raise ConfigError("channels must be divisible by heads")
        self.heads = heads
        self.head_dim = channels // heads
        self.norm = nn.GroupNorm(4, channels)
        self.to_q = nn.Conv2d(channels, channels, 1)
        self.to_k = nn.Linear(context_dim, channels)
        self.to_v = nn.Linear(context_dim, channels)
        self.to_out = nn.Conv2d(channels, channels, 1)

    def forward(self, x, context):
        b, c, h, w = x.shape
        p = h * w
        q = self.to_q(self.norm(x)).reshape(b, self.heads, self.head_dim, p)
        q = q.permute(0, 1, 3, 2)  # (b, heads, p, head_dim)
        k = self.to_k(context).reshape(b, -1, self.heads, self.head_dim).permute(0, 2, 1, 3)
        v = self.to_v(context).reshape(b, -1, self.heads, self.head_dim).permute(0, 2, 1, 3)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = torch.softmax(scores, dim=-1)  # (b, heads, p, tokens)
        out = (attn @ v).permute(0, 1, 3, 2).reshape(b, c, h, w)
        return x + self.to_out(out), attn.mean(dim=1)


class ToyDenoiser(nn.Module):
    """Small convolutional encoder-decoder noise predictor.

    Downsamples the latent from its native resolution to 8x8, runs one
    cross-attention block at each declared attention resolution on the way
    down, then decodes back with skip connections.  All parameters are
    seeded at construction and frozen: the toy backbone is never trained.

    The prediction is anchored to the noisy latent itself: at high noise
    z_t is mostly the added noise, so ``anchor * z_t`` is a structured,
    partially-correct baseline.  The anchor deliberately under-weights it
    (0.3 instead of ~1), leaving a low-frequency gap that downstream
    modulation can learn to close.

    Args:
        latent_channels: Channels of the latent tensor (4 by default).
        latent_size: Spatial side of the latent (must be a power-of-two
            multiple of the smallest attention resolution).
        context_dim: Dimension of text token embeddings.
        attn_resolutions: Resolutions at which cross-attention blocks are
            placed; resolutions larger than the latent are dropped.
        base_channels: Channel count at the native resolution.
        heads: Attention heads (maps are averaged over heads).
    """

    INPUT_ANCHOR = 0.3

    def __init__(
        self,
        latent_channels: int = 4,
        latent_size: int = 32,
        context_dim: int = 64,
        attn_resolutions: Tuple[int, ...] = (8, 16, 32),
        base_channels: int = 32,
        heads: int = 2,
        seed: int = 0,
    ):
        super().__init__()
        self.latent_channels = latent_channels
        self.latent_size = latent_size

        sizes = [latent_size]
        while sizes[-1] > 8 and sizes[-1] % 2 == 0:
            sizes.append(sizes[-1] // 2)
        self.sizes = sizes
        channels = [min(base_channels * 2**i, base_channels * 4) for i in range(len(sizes))]
        self.attn_sizes = [s for s in attn_resolutions if s in sizes]

        time_dim = 2 * base_channels
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(base_channels, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        self.base_channels = base_channels

        self.in_conv = nn.Conv2d(latent_channels, channels[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleDict()
        self.downsamplers = nn.ModuleList()
        for i, size in enumerate(sizes):
            cin = channels[max(i - 1, 0)]
            self.down_blocks.append(_ResBlock(cin, channels[i], time_dim))
            if size in self.attn_sizes:
                self.down_attn[str(size)] = _CrossAttention(channels[i], context_dim, heads)
            if i < len(sizes) - 1:
                self.downsamplers.append(nn.Conv2d(channels[i], channels[i], 3, 2, 1))

        self.mid_block = _ResBlock(channels[-1], channels[-1], time_dim)

        self.up_blocks = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for i in reversed(range(len(sizes) - 1)):
            self.upsamplers.append(nn.ConvTranspose2d(channels[i + 1], channels[i], 2, 2))
            self.up_blocks.append(_ResBlock(2 * channels[i], channels[i], time_dim))

        self.out_norm = nn.GroupNorm(4, channels[0])
        self.out_conv = nn.Conv2d(channels[0], latent_channels, 3, padding=1)

        reseed_module(self, stable_seed("toy-denoiser", seed))
        # Widen the attention logits so the softmax has real dynamic range:
        # near-uniform maps would make attention supervision insensitive to
        # the latent input.
        with torch.no_grad():
            for block in self.down_attn.values():
                block.to_q.weight.mul_(8.0)
                block.to_k.weight.mul_(8.0)
        for param in self.parameters():
            param.requires_grad_(False)
        self.eval()

    def attention_layers(self) -> Dict[str, Tuple[int, int]]:
        """Declared probe layers: layer_id -> (h, w)."""
        return {f"{s}x{s}": (s, s) for s in self.attn_sizes}

    def forward(self, z_t: torch.Tensor, t: int, cond: TextCondition, probe: bool = False):
        """Predict the noise in ``z_t``.

        Returns:
            (eps_pred, maps) where maps is a layer_id -> (P, L) dict when
            ``probe`` is true, else None.  The forward pass keeps the
            autograd graph with respect to ``z_t`` even though parameters
            are frozen, so probed maps stay differentiable.
        """
        if z_t.ndim != 3 or z_t.shape[0] != self.latent_channels:
            raise GeometryError(
                f"expected ({self.latent_channels}, {self.latent_size}, "
                f"{self.latent_size}) latent, got {tuple(z_t.shape)}"
            )
        dtype = z_t.dtype
        context = cond.token_embeddings.to(dtype).unsqueeze(0)
        t_vec = torch.tensor([float(t)], dtype=dtype)
        temb = self.time_mlp(sinusoidal_embedding(t_vec, self.base_channels))

        maps: Dict[str, torch.Tensor] = {}
        x = self.in_conv(z_t.unsqueeze(0))
        skips = []
        for i, size in enumerate(self.sizes):
            x = self.down_blocks[i](x, temb)
            if str(size) in self.down_attn:
                x, attn = self.down_attn[str(size)](x, context)
                if probe:
                    maps[f"{size}x{size}"] = attn.squeeze(0)
            skips.append(x)
            if i < len(self.downsamplers):
                x = self.downsamplers[i](x)

        x = self.mid_block(x, temb)

        for j, up in enumerate(self.upsamplers):
            x = up(x)
            x = self.up_blocks[j](torch.cat([x, skips[len(self.sizes) - 2 - j]], dim=1), temb)

        eps = self.out_conv(F.silu(self.out_norm(x))).squeeze(0) + self.INPUT_ANCHOR * z_t
        return eps, (maps if probe else None)


# ---------------------------------------------------------------------------
# Backbone protocol and toy implementation
# ---------------------------------------------------------------------------


@runtime_checkable
class DiffusionBackbone(Protocol):
    """Adapter contract for plugging in an external latent-diffusion stack.

    Implementations are immutable after construction; all methods must be
    pure given their inputs.
    """

    schedule: NoiseSchedule

    @property
    def latent_channels(self) -> int: ...

    @property
    def latent_size(self) -> int: ...

    def probe_layers(self) -> Dict[str, Tuple[int, int]]: ...

    def encode_text(self, caption: str) -> TextCondition: ...

    def vae_encode(self, image: np.ndarray) -> torch.Tensor: ...

    def vae_decode(self, z: torch.Tensor) -> np.ndarray: ...

    def denoise(
        self, z_t: torch.Tensor, t: int, cond: TextCondition, probe: bool = False
    ) -> DenoiserOutput: ...


@dataclass(frozen=True)
class ToyBackboneConfig:
    image_size: int = 64
    image_channels: int = 1
    reduction_factor: int = 2
    latent_channels: int = 4
    text_dim: int = 64
    base_channels: int = 32
    attn_resolutions: Tuple[int, ...] = (8, 16, 32)
    schedule_kind: str = "scaled_linear"
    train_timesteps: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.reduction_factor:
            raise ConfigError("image_size must be divisible by reduction_factor")


class ToyBackbone:
    """Deterministic toy latent-diffusion backbone.

    With the default geometry (64x64 grayscale images, reduction factor 2)
    the patch autoencoder is exactly invertible and the latent is 4x32x32,
    which supports cross-attention probing at 8x8, 16x16 and 32x32.
    """

    def __init__(self, config: ToyBackboneConfig = ToyBackboneConfig()):
        self.config = config
        self.schedule = NoiseSchedule.from_kind(config.schedule_kind, config.train_timesteps)
        self.autoencoder = PatchAutoencoder(
            image_channels=config.image_channels,
            reduction_factor=config.reduction_factor,
            latent_channels=config.latent_channels,
            seed=config.seed,
        )
        latent_size = config.image_size // config.reduction_factor
        self.denoiser = ToyDenoiser(
            latent_channels=config.latent_channels,
            latent_size=latent_size,
            context_dim=config.text_dim,
            attn_resolutions=config.attn_resolutions,
            base_channels=config.base_channels,
            seed=config.seed,
        )

    @property
    def latent_channels(self) -> int:
        return self.config.latent_channels

    @property
    def latent_size(self) -> int:
        return self.config.image_size // self.config.reduction_factor

    @property
    def image_size(self) -> int:
        return self.config.image_size

    def probe_layers(self) -> Dict[str, Tuple[int, int]]:
        return self.denoiser.attention_layers()

    def parameter_checksum(self) -> float:
        """Sum of all denoiser parameters; cheap change detector."""
        return float(sum(p.double().sum() for p in self.denoiser.parameters()))

    def encode_text(self, caption: str) -> TextCondition:
        tokens = caption.lower().split()
        if not tokens:
            raise InputError("caption must contain at least one token")
        emb = np.stack([token_embedding(tok, self.config.text_dim) for tok in tokens])
        return TextCondition(torch.from_numpy(emb).to(torch.float32), tokens)

    def vae_encode(self, image: np.ndarray) -> torch.Tensor:
        if image.size == 0:
            raise InputError("empty image")
        arr = torch.from_numpy(np.ascontiguousarray(image)).to(torch.float32)
        if arr.ndim == 2:
            arr = arr.unsqueeze(0)
        return self.autoencoder.encode(arr)

    def vae_decode(self, z: torch.Tensor) -> np.ndarray:
        img = self.autoencoder.decode(z)
        return img.detach().cpu().numpy()

    def denoise(
        self, z_t: torch.Tensor, t: int, cond: TextCondition, probe: bool = False
    ) -> DenoiserOutput:
        if not 0 <= t < self.schedule.total_steps:
            raise ContractError(f"timestep {t} out of range [0, {self.schedule.total_steps})")
        eps, maps = self.denoiser(z_t, t, cond, probe=probe)
        attention = None
        if probe:
            res = self.probe_layers()
            attention = AttentionMapSet(maps=maps, resolutions={k: res[k] for k in maps})
        return DenoiserOutput(eps_pred=eps, attention_maps=attention)
