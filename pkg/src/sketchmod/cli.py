"""Command-line entry points.

Exit codes: 0 success, 2 usage/config errors, 3 runtime failures.
The run config path defaults to the SKETCHMOD_CONFIG environment variable.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .config import CONFIG_ENV_VAR, build_components, load_run_config
from .errors import ConfigError, InputError, NonFiniteLossError, SketchmodError

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _fail(code: int, message: str):
    click.echo(message, err=True)
    sys.exit(code)


def _load(config_path):
    try:
        return load_run_config(config_path)
    except (ConfigError, InputError) as exc:
        _fail(EXIT_CONFIG, str(exc))


config_option = click.option(
    "--config", "config_path", default=None, envvar=CONFIG_ENV_VAR,
    help="Run config YAML (default: $SKETCHMOD_CONFIG or built-in toy defaults).",
)


@click.group()
def main():
    """Sketch-conditioned noise modulation toolkit."""


@main.command()
@click.argument("manifest_path", type=click.Path())
@click.option("--run-dir", required=True, type=click.Path())
@config_option
def train(manifest_path, run_dir, config_path):
    """Train the modulation network on a dataset manifest."""
    from .data_eval import load_manifest
    from .pipeline import run_training
    from .dataprep import prepare_training_samples
    from .sketch_semantics import load_label_vocabulary

    run_config = _load(config_path)
    try:
        manifest = load_manifest(manifest_path)
        labels_path = manifest.root / "labels.txt"
        vocabulary = load_label_vocabulary(labels_path) if labels_path.exists() else ()
        components = build_components(run_config)
        freehand, synthetic = prepare_training_samples(
            manifest, components.encoder, vocabulary,
            threshold=run_config.encoder.mask_threshold,
            image_size=run_config.backbone.image_size,
        )
        if not freehand or not synthetic:
            raise InputError("manifest needs both freehand and synthetic train entries")
    except (ConfigError, InputError) as exc:
        _fail(EXIT_CONFIG, str(exc))

    try:
        run = run_training(
            freehand, synthetic, components, run_config.weights, run_config.training,
            run_dir, run_manifest_extra={"dataset": str(Path(manifest_path).resolve())},
        )
    except NonFiniteLossError as exc:
        _fail(EXIT_RUNTIME, f"{exc} (diagnostic: {exc.snapshot_path})")
    except SketchmodError as exc:
        _fail(EXIT_RUNTIME, str(exc))
    click.echo(f"trained {len(run.history)} steps; checkpoint: {run.checkpoint_path}")


@main.command()
@click.argument("sketch_path", type=click.Path())
@click.argument("caption")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--steps", default=50, show_default=True)
@click.option("--modulated-fraction", default=0.1, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--trace", "trace_path", default=None, type=click.Path())
@click.option("--overlays", "overlays_dir", default=None, type=click.Path())
@config_option
def generate(sketch_path, caption, out_path, checkpoint, steps,
             modulated_fraction, seed, trace_path, overlays_dir, config_path):
    """Generate an image from a sketch and caption."""
    from .pipeline import SamplerConfig, sample, write_step_trace
    from .rasters import load_raster, save_raster, to_grayscale

    run_config = _load(config_path)
    try:
        if not Path(checkpoint).with_suffix(".npz").exists():
            raise ConfigError(f"checkpoint not found: {checkpoint}")
        components = build_components(run_config, checkpoint=checkpoint)
        sketch = to_grayscale(load_raster(sketch_path))
        sampler = SamplerConfig(
            inference_steps=steps, modulated_fraction=modulated_fraction, seed=seed
        )
    except (ConfigError, InputError) as exc:
        _fail(EXIT_CONFIG, str(exc))

    try:
        result = sample(sketch, caption, sampler, components,
                        collect_overlays=overlays_dir is not None)
        save_raster(out_path, result.image)
        if trace_path:
            write_step_trace(result.step_trace, trace_path)
        if overlays_dir:
            _write_overlay_bundle(result, Path(overlays_dir))
    except SketchmodError as exc:
        _fail(EXIT_RUNTIME, str(exc))
    click.echo(f"wrote {out_path}")


def _write_overlay_bundle(result, out_dir: Path):
    import numpy as np

    from .rasters import save_raster

    out_dir.mkdir(parents=True, exist_ok=True)
    if result.overlays is None:
        return
    index = {"attention_layers": [], "scale_map": "scale.png", "shift_map": "shift.png"}

    def normalized(arr):
        span = arr.max() - arr.min()
        return (arr - arr.min()) / span if span > 0 else np.zeros_like(arr)

    save_raster(out_dir / "scale.png", normalized(result.overlays.scale_map))
    save_raster(out_dir / "shift.png", normalized(result.overlays.shift_map))
    for lid, arr in result.overlays.attention.items():
        name = f"attention_{lid}.png"
        save_raster(out_dir / name, normalized(arr))
        index["attention_layers"].append({"layer_id": lid, "file": name})
    (out_dir / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")


@main.command()
@click.argument("manifest_path", type=click.Path())
@click.option("--checkpoint", default=None, type=click.Path())
@click.option("--split", default="test", show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path())
@click.option("--clip-scale", default=1.0, show_default=True)
@config_option
def evaluate(manifest_path, checkpoint, split, out_path, clip_scale, config_path):
    """Generate from a manifest split and report FID / CLIP / LPIPS."""
    from .data_eval import MetricExtractors, evaluate as run_metrics, load_manifest
    from .pipeline import sample
    from .rasters import load_raster, resize_raster, to_grayscale

    run_config = _load(config_path)
    try:
        manifest = load_manifest(manifest_path)
        components = build_components(run_config, checkpoint=checkpoint)
        entries = [e for e in manifest.split(split) if e.image_path]
        if len(entries) < 2:
            raise InputError(f"split {split!r} needs at least 2 entries with images")
    except (ConfigError, InputError) as exc:
        _fail(EXIT_CONFIG, str(exc))

    try:
        size = run_config.backbone.image_size
        sketches, references, generated = [], [], []
        for i, entry in enumerate(entries):
            sketch = resize_raster(
                to_grayscale(load_raster(manifest.resolve(entry.sketch_path))), size
            )
            sampler = run_config.sampler.__class__(
                inference_steps=run_config.sampler.inference_steps,
                modulated_fraction=run_config.sampler.modulated_fraction,
                seed=run_config.sampler.seed + i,
            )
            result = sample(sketch, entry.caption, sampler, components)
            sketches.append(sketch)
            references.append(
                resize_raster(
                    to_grayscale(load_raster(manifest.resolve(entry.image_path))), size
                )
            )
            generated.append(to_grayscale(result.image))
        report = run_metrics(
            generated, references, sketches, MetricExtractors.toy(), clip_scale=clip_scale
        )
    except SketchmodError as exc:
        _fail(EXIT_RUNTIME, str(exc))

    click.echo(report.as_table())
    if out_path:
        Path(out_path).write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n")


@main.command("export-masks")
@click.argument("sketch_path", type=click.Path())
@click.option("--labels", "labels_path", required=True, type=click.Path())
@click.option("--out", "out_base", required=True, type=click.Path())
@click.option("--threshold", default=0.5, show_default=True)
@config_option
def export_masks(sketch_path, labels_path, out_base, threshold, config_path):
    """Derive masks for a sketch against a label vocabulary and export them."""
    from .rasters import load_raster, to_grayscale
    from .seeding import token_embedding
    from .sketch_semantics import (
        EncoderConfig, derive_masks, export_mask_set, load_label_vocabulary,
    )

    run_config = _load(config_path)
    try:
        components = build_components(run_config)
        vocabulary = load_label_vocabulary(labels_path)
        if not vocabulary:
            raise InputError(f"no labels in {labels_path}")
        sketch = to_grayscale(load_raster(sketch_path))
        grid = components.encoder.encode(sketch, EncoderConfig(frozen_reference=True))
        triples = [
            (i, label, token_embedding(label, grid.channels, salt="label"))
            for i, label in enumerate(vocabulary)
        ]
        mask_set = derive_masks(grid, triples, threshold=threshold)
        stack, index = export_mask_set(mask_set, out_base)
    except (ConfigError, InputError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    except SketchmodError as exc:
        _fail(EXIT_RUNTIME, str(exc))
    click.echo(f"wrote {stack} and {index}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8234, show_default=True)
@click.option("--checkpoint", default=None, type=click.Path())
@config_option
def serve(host, port, checkpoint, config_path):
    """Serve the HTTP API (and the studio UI when built)."""
    import uvicorn

    from .service import create_default_app

    try:
        app = create_default_app(config_path, checkpoint=checkpoint)
    except (ConfigError, InputError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
