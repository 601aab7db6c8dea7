"""Sketch-conditioned noise modulation for latent diffusion.

A small side network rescales and shifts a frozen diffusion backbone's
noise prediction from semantic sketch features, trained with an
attention-supervision loss that removes the need for pixel-aligned
ground-truth images.
"""

from .backbone import (
    AttentionMapSet,
    DenoiserOutput,
    DiffusionBackbone,
    NoiseSchedule,
    TextCondition,
    ToyBackbone,
    ToyBackboneConfig,
    forward_noise,
    predict_x0,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    attention_loss,
    l1_regularizers,
    noise_loss,
    total_loss,
    variance_loss,
)
from .modnet import ModNetConfig, ModulationMaps, ModulationNetwork, modulate, parameter_count
from .attention_probe import ProbeConfig, probe_attention, resample_masks
from .pipeline import (
    Components,
    SamplerConfig,
    TrainingConfig,
    TrainingSample,
    build_batch,
    sample,
    sample_training_timestep,
    train_step,
)
from .sketch_semantics import (
    EncoderConfig,
    SemanticMaskSet,
    SketchFeatureGrid,
    ToySketchEncoder,
    derive_masks,
    masks_from_segmentation,
)
from .data_eval import (
    DatasetManifest,
    MetricReport,
    clip_similarity,
    evaluate,
    frechet_distance,
    load_manifest,
    perceptual_distance,
    synthesize_sketch,
)

__version__ = "0.1.0"
