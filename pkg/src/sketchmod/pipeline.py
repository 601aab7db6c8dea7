"""Training loop and deterministic inference sampler.

Training draws timesteps uniformly from the high-noise top fraction of the
schedule, builds half-freehand / half-synthetic batches, runs the full
per-sample graph (noise, modulate, probe, losses with per-sample lambda0
gating) and steps an AdamW optimizer scoped to the modulation network plus
the encoder's trainable suffix.  The backbone is frozen throughout.

Inference is a deterministic DDIM iteration; modulation is applied only on
the first ceil(fraction * steps) highest-noise steps, and every run emits
a step trace recording which steps were modulated.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .attention_probe import ProbeConfig, probe_attention, resample_masks
from .backbone import forward_noise, predict_x0
from .errors import ConfigError, ContractError, NonFiniteLossError
from .losses import LossBreakdown, LossWeights, attention_loss, l1_regularizers, noise_loss, total_loss, variance_loss
from .modnet import ModulationNetwork, modulate, save_checkpoint
from .seeding import torch_generator
from .sketch_semantics import EncoderConfig, SemanticMaskSet

CHECKPOINT_EVERY = 500


@dataclass(frozen=True)
class TrainingConfig:
    """Training-run knobs.

    high_noise_fraction restricts timestep draws to the top fraction of
    the schedule (0.1 = highest-noise 10%); the same axis accepts larger
    fractions up to 1.0 for ablations.  freehand_fraction is fixed at 0.5:
    batches are exactly half freehand, half synthetic.
    """

    total_train_timesteps: int = 1000
    high_noise_fraction: float = 0.1
    batch_size: int = 4
    freehand_fraction: float = 0.5
    steps: int = 200
    learning_rate: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be even (exact 50/50 split)")
        if not 0 < self.high_noise_fraction <= 1:
            raise ConfigError("high_noise_fraction must lie in (0, 1]")
        if self.high_noise_fraction * self.total_train_timesteps < 1:
            raise ConfigError("high_noise_fraction * total_train_timesteps must be >= 1")
        if self.freehand_fraction != 0.5:
            raise ConfigError("freehand_fraction is fixed at 0.5")


@dataclass(frozen=True)
class SamplerConfig:
    """Inference knobs: 50 deterministic steps, top 10% modulated."""

    inference_steps: int = 50
    modulated_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.inference_steps < 1:
            raise ConfigError("inference_steps must be >= 1")
        if not 0 < self.modulated_fraction <= 1:
            raise ConfigError("modulated_fraction must lie in (0, 1]")

    @property
    def modulated_steps(self) -> int:
        return math.ceil(self.modulated_fraction * self.inference_steps)


@dataclass
class TrainingSample:
    """One sketch/caption training item.

    Freehand samples have no pixel-aligned image; they still carry a
    (misaligned) reference image used to construct the noisy latent, while
    lambda0 gating removes its pixel supervision.
    """

    sketch: np.ndarray
    caption: str
    masks: SemanticMaskSet
    is_freehand: bool
    image: Optional[np.ndarray] = None
    reference_image: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.is_freehand and self.image is None:
            raise ContractError("synthetic samples must have a pixel-aligned image")
        if self.reference_image is None:
            if self.image is None:
                raise ContractError(
                    "freehand samples need a reference image for latent construction"
                )
            self.reference_image = self.image


@dataclass
class StepTrace:
    step: int
    t: int
    modulated: bool

    def as_record(self) -> Dict:
        return {"step_index": self.step, "t": self.t, "modulated": self.modulated}


@dataclass
class Components:
    """Everything a training step or sampler call needs."""

    backbone: object
    modnet: ModulationNetwork
    encoder: object
    encoder_config: EncoderConfig = field(default_factory=EncoderConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)


def sample_training_timestep(config: TrainingConfig, rng: torch.Generator) -> int:
    """Uniform timestep from the restricted high-noise range.

    t ~ Uniform[ceil((1 - fraction) * T), T - 1].
    """
    t_total = config.total_train_timesteps
    t_min = math.ceil((1.0 - config.high_noise_fraction) * t_total - 1e-9)
    return int(torch.randint(t_min, t_total, (1,), generator=rng).item())


class EpochStream:
    """Deterministically reshuffling sample stream.

    Yields items in seeded-shuffle order; exhausting an epoch reshuffles
    (with an epoch-dependent seed) and continues.
    """

    def __init__(self, samples: Sequence[TrainingSample], seed: int = 0):
        if not samples:
            raise ContractError("stream needs at least one sample")
        self._samples = list(samples)
        self._seed = seed
        self.epoch = 0
        self._order: List[int] = []
        self._pos = 0
        self._reshuffle()

    def _reshuffle(self):
        rng = np.random.default_rng((self._seed, self.epoch))
        self._order = list(rng.permutation(len(self._samples)))
        self._pos = 0

    def take(self, n: int) -> List[TrainingSample]:
        out = []
        for _ in range(n):
            if self._pos >= len(self._order):
                self.epoch += 1
                self._reshuffle()
            out.append(self._samples[self._order[self._pos]])
            self._pos += 1
        return out


def build_batch(
    freehand_stream: EpochStream,
    synthetic_stream: EpochStream,
    config: TrainingConfig,
) -> List[TrainingSample]:
    """Exactly batch_size/2 samples from each stream, interleaved f,s,f,s…"""
    half = config.batch_size // 2
    freehand = freehand_stream.take(half)
    synthetic = synthetic_stream.take(half)
    batch: List[TrainingSample] = []
    for f, s in zip(freehand, synthetic):
        batch.extend((f, s))
    return batch


def _write_diagnostic(run_dir: Optional[Path], payload: Dict) -> Optional[Path]:
    if run_dir is None:
        return None
    path = Path(run_dir) / "diagnostic.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _sample_losses(
    sample: TrainingSample,
    components: Components,
    weights: LossWeights,
    config: TrainingConfig,
    rng: torch.Generator,
):
    """Full per-sample forward graph: noise, modulate, probe, losses.

    Consumes exactly one timestep draw and one noise draw from ``rng`` so
    evaluation can replay a training step's batch bit-for-bit.
    """
    backbone = components.backbone
    cond = backbone.encode_text(sample.caption)
    z0 = backbone.vae_encode(sample.reference_image)
    t = sample_training_timestep(config, rng)
    eps = torch.randn(z0.shape, generator=rng, dtype=z0.dtype)
    z_t = forward_noise(z0, t, eps, backbone.schedule)

    eps_theta = backbone.denoise(z_t, t, cond).eps_pred
    grid = components.encoder.encode(sample.sketch, components.encoder_config)
    maps = components.modnet(grid, eps_theta, z_t, t)
    eps_prime = modulate(eps_theta, maps)

    attn_maps = probe_attention(backbone, z_t, t, eps_prime, cond, components.probe)
    masks_by_layer = resample_masks(sample.masks, components.probe)

    noise_part = noise_loss(eps, eps_prime)
    attn_part = attention_loss(attn_maps, masks_by_layer, weights.lambda_reg)
    l1s, l1b = l1_regularizers(maps)
    var = variance_loss(maps)
    return total_loss(noise_part, attn_part, l1s, l1b, var, weights, sample.is_freehand)


def _aggregate(batch, totals, breakdowns) -> LossBreakdown:
    """Average per-sample parts; the noise part is the lambda0-gated mean,
    so the decomposition invariant holds at the batch level and freehand
    reference images never contribute to it."""
    n = len(batch)
    return LossBreakdown(
        noise=sum(0.0 if s.is_freehand else b.noise for s, b in zip(batch, breakdowns)) / n,
        attn=sum(b.attn for b in breakdowns) / n,
        l1_scale=sum(b.l1_scale for b in breakdowns) / n,
        l1_shift=sum(b.l1_shift for b in breakdowns) / n,
        variance=sum(b.variance for b in breakdowns) / n,
        total=float(torch.stack(totals).mean().detach()),
    )


def evaluate_batch(
    batch: Sequence[TrainingSample],
    components: Components,
    weights: LossWeights,
    config: TrainingConfig,
    rng: torch.Generator,
) -> LossBreakdown:
    """Loss on a batch without touching parameters.

    Seeding ``rng`` as at a given training step replays that step's exact
    timestep and noise draws, giving a like-for-like loss comparison
    before and after training.
    """
    with torch.no_grad():
        results = [_sample_losses(s, components, weights, config, rng) for s in batch]
    return _aggregate(batch, [t for t, _ in results], [b for _, b in results])


def train_step(
    batch: Sequence[TrainingSample],
    components: Components,
    weights: LossWeights,
    config: TrainingConfig,
    optimizer: torch.optim.Optimizer,
    rng: torch.Generator,
    step_index: int = 0,
    run_dir: Optional[Path] = None,
) -> LossBreakdown:
    """One optimizer step on the mean batch loss.

    Per sample: encode the reference image, draw a restricted timestep and
    noise, form z_t, predict noise, modulate it with the network's maps,
    probe attention through the implied clean latent, and assemble the
    four losses with lambda0 gated off for freehand samples.
    """
    totals: List[torch.Tensor] = []
    breakdowns: List[LossBreakdown] = []
    for sample in batch:
        total, breakdown = _sample_losses(sample, components, weights, config, rng)
        totals.append(total)
        breakdowns.append(breakdown)

    batch_total = torch.stack(totals).mean()
    if not torch.isfinite(batch_total):
        snapshot = {
            "step": step_index,
            "seed": config.seed,
            "parts": [vars(b) for b in breakdowns],
            "captions": [s.caption for s in batch],
            "is_freehand": [s.is_freehand for s in batch],
        }
        path = _write_diagnostic(run_dir, snapshot)
        raise NonFiniteLossError(f"non-finite loss at step {step_index}", snapshot_path=path)

    optimizer.zero_grad(set_to_none=True)
    batch_total.backward()
    optimizer.step()

    return _aggregate(batch, totals, breakdowns)


def build_optimizer(components: Components, config: TrainingConfig) -> torch.optim.Optimizer:
    """AdamW over the modulation network plus the encoder's trainable suffix."""
    params = list(components.modnet.parameters())
    suffix = components.encoder.trainable_parameters(components.encoder_config)
    params.extend(suffix.values())
    return torch.optim.AdamW(params, lr=config.learning_rate)


@dataclass
class SampleOverlays:
    """Introspection maps collected at the first (most modulated) step."""

    scale_map: np.ndarray
    shift_map: np.ndarray
    attention: Dict[str, np.ndarray]


@dataclass
class SampleResult:
    image: np.ndarray
    step_trace: List[StepTrace]
    trajectory: Optional[List[torch.Tensor]] = None
    overlays: Optional[SampleOverlays] = None


def _inference_timesteps(total_steps: int, inference_steps: int) -> List[int]:
    if inference_steps > total_steps:
        raise ConfigError("inference_steps cannot exceed the training schedule length")
    taus = np.round(np.linspace(total_steps - 1, 0, inference_steps)).astype(int)
    return [int(t) for t in taus]


def sample(
    sketch: Optional[np.ndarray],
    caption: str,
    sampler: SamplerConfig,
    components: Components,
    record_trajectory: bool = False,
    collect_overlays: bool = False,
) -> SampleResult:
    """Deterministic DDIM sampling with modulation on the first
    ceil(fraction * steps) highest-noise steps.

    Passing ``sketch=None`` (or a Components without a modnet) runs the
    plain backbone sampler; the step trace then reports no modulated steps.
    """
    backbone = components.backbone
    schedule = backbone.schedule
    cond = backbone.encode_text(caption)
    use_modnet = components.modnet is not None and sketch is not None
    features = None
    if use_modnet:
        features = components.encoder.encode(
            sketch, EncoderConfig(frozen_reference=False)
        )

    taus = _inference_timesteps(schedule.total_steps, sampler.inference_steps)
    n_modulated = sampler.modulated_steps
    gen = torch_generator(sampler.seed)
    size = backbone.latent_size
    z = torch.randn((backbone.latent_channels, size, size), generator=gen)

    trace: List[StepTrace] = []
    trajectory: List[torch.Tensor] = []
    overlays: Optional[SampleOverlays] = None

    with torch.no_grad():
        for i, t in enumerate(taus):
            eps = backbone.denoise(z, t, cond).eps_pred
            modulated = use_modnet and i < n_modulated
            if modulated:
                maps = components.modnet(features, eps, z, t)
                eps = modulate(eps, maps)
                if collect_overlays and overlays is None:
                    attn = probe_attention(backbone, z, t, eps, cond, components.probe)
                    overlays = SampleOverlays(
                        scale_map=maps.scale.mean(dim=0).cpu().numpy(),
                        shift_map=maps.shift.mean(dim=0).cpu().numpy(),
                        attention={
                            lid: attn.maps[lid]
                            .mean(dim=1)
                            .reshape(attn.resolutions[lid])
                            .cpu()
                            .numpy()
                            for lid in attn.maps
                        },
                    )
            z0_hat = predict_x0(z, eps, t, schedule)
            if i + 1 < len(taus):
                ab_next = schedule.alpha_bar_at(taus[i + 1])
                z = math.sqrt(ab_next) * z0_hat + math.sqrt(1.0 - ab_next) * eps
            else:
                z = z0_hat
            trace.append(StepTrace(step=i + 1, t=t, modulated=modulated))
            if record_trajectory:
                trajectory.append(z.detach().clone())

    image = backbone.vae_decode(z)
    return SampleResult(
        image=image,
        step_trace=trace,
        trajectory=trajectory if record_trajectory else None,
        overlays=overlays,
    )


def write_step_trace(trace: Sequence[StepTrace], path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for entry in trace:
            fh.write(json.dumps(entry.as_record(), sort_keys=True) + "\n")
    return path


@dataclass
class TrainingRun:
    history: List[LossBreakdown]
    checkpoint_path: Path
    loss_log_path: Path


def run_training(
    freehand: Sequence[TrainingSample],
    synthetic: Sequence[TrainingSample],
    components: Components,
    weights: LossWeights,
    config: TrainingConfig,
    run_dir,
    run_manifest_extra: Optional[Dict] = None,
) -> TrainingRun:
    """Full training loop: batches, steps, JSONL loss log, checkpoints.

    Writes run_manifest.json, loss_log.jsonl (one record per step) and a
    checkpoint every CHECKPOINT_EVERY steps plus a final one.  Asserts the
    backbone is untouched by comparing parameter checksums.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    manifest = {
        "training": asdict(config),
        "weights": asdict(weights),
        "modnet": asdict(components.modnet.config),
        "probe": {"resolutions": list(components.probe.resolutions)},
        "seed": config.seed,
    }
    if run_manifest_extra:
        manifest.update(run_manifest_extra)
    (run_dir / "run_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    freehand_stream = EpochStream(freehand, seed=config.seed)
    synthetic_stream = EpochStream(synthetic, seed=config.seed + 1)
    optimizer = build_optimizer(components, config)
    rng = torch_generator(config.seed)

    checksum_before = components.backbone.parameter_checksum()
    history: List[LossBreakdown] = []
    loss_log = run_dir / "loss_log.jsonl"
    with loss_log.open("w", encoding="utf-8") as log:
        for step_index in range(1, config.steps + 1):
            batch = build_batch(freehand_stream, synthetic_stream, config)
            breakdown = train_step(
                batch, components, weights, config, optimizer, rng,
                step_index=step_index, run_dir=run_dir,
            )
            history.append(breakdown)
            freehand_count = sum(1 for s in batch if s.is_freehand)
            log.write(
                json.dumps(
                    breakdown.as_record(step_index, freehand_count / len(batch)),
                    sort_keys=True,
                )
                + "\n"
            )
            if step_index % CHECKPOINT_EVERY == 0:
                save_checkpoint(components.modnet, run_dir / f"modnet_step{step_index:06d}.npz")

    if components.backbone.parameter_checksum() != checksum_before:
        raise ContractError("backbone parameters changed during training")

    checkpoint_path, _ = save_checkpoint(components.modnet, run_dir / "modnet_final.npz")
    return TrainingRun(history=history, checkpoint_path=checkpoint_path, loss_log_path=loss_log)
