"""Run configuration: one YAML file wiring every component together.

The default configuration is the toy desk-scale setup; any key can be
overridden from the file.  ``backbone.kind`` selects between the shipped
toy backbone and an externally registered adapter.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .attention_probe import ProbeConfig
from .backbone import ToyBackbone, ToyBackboneConfig
from .errors import ConfigError
from .losses import LossWeights
from .modnet import ModNetConfig, ModulationNetwork, load_checkpoint
from .pipeline import Components, SamplerConfig, TrainingConfig
from .sketch_semantics import EncoderConfig, ToySketchEncoder

CONFIG_ENV_VAR = "SKETCHMOD_CONFIG"


@dataclass(frozen=True)
class BackboneSection:
    kind: str = "toy"
    image_size: int = 64
    image_channels: int = 1
    reduction_factor: int = 2
    latent_channels: int = 4
    text_dim: int = 64
    base_channels: int = 32
    schedule_kind: str = "scaled_linear"
    train_timesteps: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("toy", "external"):
            raise ConfigError("backbone.kind must be 'toy' or 'external'")


@dataclass(frozen=True)
class EncoderSection:
    channels: int = 32
    grid: int = 8
    depth: int = 5
    hidden_channels: int = 32
    trainable_suffix_layers: int = 3
    mask_threshold: float = 0.5
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneSection = field(default_factory=BackboneSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    modnet: ModNetConfig = field(default_factory=lambda: ModNetConfig(sketch_channels=32))
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def as_dict(self) -> dict:
        return {
            "backbone": asdict(self.backbone),
            "encoder": asdict(self.encoder),
            "modnet": asdict(self.modnet),
            "probe": {"resolutions": list(self.probe.resolutions)},
            "training": asdict(self.training),
            "weights": asdict(self.weights),
            "sampler": asdict(self.sampler),
        }


_SECTIONS = {
    "backbone": BackboneSection,
    "encoder": EncoderSection,
    "modnet": ModNetConfig,
    "training": TrainingConfig,
    "weights": LossWeights,
    "sampler": SamplerConfig,
}


def load_run_config(path: Optional[str] = None) -> RunConfig:
    """Load a YAML run config; SKETCHMOD_CONFIG overrides the default path.

    Missing sections and keys fall back to the toy defaults.
    """
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR)
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config not found: {path}")
    raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a mapping")
    unknown = set(raw) - set(_SECTIONS) - {"probe"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"config section {name!r} must be a mapping")
        try:
            kwargs[name] = cls(**section)
        except TypeError as exc:
            raise ConfigError(f"config section {name!r}: {exc}") from exc
    probe_raw = raw.get("probe", {})
    resolutions = tuple(probe_raw.get("resolutions", ProbeConfig().resolutions))
    kwargs["probe"] = ProbeConfig(resolutions=resolutions)
    return RunConfig(**kwargs)


def save_run_config(config: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(config.as_dict(), sort_keys=True), encoding="utf-8")
    return path


def build_components(config: RunConfig, checkpoint: Optional[str] = None) -> Components:
    """Instantiate backbone, encoder and modulation network from a config."""
    if config.backbone.kind != "toy":
        raise ConfigError(
            "no external backbone adapter is configured; set backbone.kind: toy"
        )
    backbone = ToyBackbone(
        ToyBackboneConfig(
            image_size=config.backbone.image_size,
            image_channels=config.backbone.image_channels,
            reduction_factor=config.backbone.reduction_factor,
            latent_channels=config.backbone.latent_channels,
            text_dim=config.backbone.text_dim,
            base_channels=config.backbone.base_channels,
            attn_resolutions=config.probe.resolutions,
            schedule_kind=config.backbone.schedule_kind,
            train_timesteps=config.backbone.train_timesteps,
            seed=config.backbone.seed,
        )
    )
    encoder = ToySketchEncoder(
        out_channels=config.encoder.channels,
        grid=(config.encoder.grid, config.encoder.grid),
        depth=config.encoder.depth,
        hidden_channels=config.encoder.hidden_channels,
        seed=config.encoder.seed,
    )
    if config.modnet.sketch_channels != config.encoder.channels:
        raise ConfigError(
            f"modnet.sketch_channels={config.modnet.sketch_channels} must equal "
            f"encoder.channels={config.encoder.channels}"
        )
    if config.modnet.latent_channels != config.backbone.latent_channels:
        raise ConfigError("modnet.latent_channels must equal backbone.latent_channels")
    modnet = load_checkpoint(checkpoint) if checkpoint else ModulationNetwork(config.modnet)
    return Components(
        backbone=backbone,
        modnet=modnet,
        encoder=encoder,
        encoder_config=EncoderConfig(
            trainable_suffix_layers=config.encoder.trainable_suffix_layers
        ),
        probe=config.probe,
    )
