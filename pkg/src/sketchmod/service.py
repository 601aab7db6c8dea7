"""HTTP service exposing generation and mask derivation to the studio UI.

Model components are loaded once at app creation and shared read-only;
requests never mutate them.  Error responses always carry a structured
{code, message, field?} body: 400 for schema violations, 422 for geometry
violations, 500 for component failures.  Stack traces never leak.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .config import RunConfig
from .errors import ConfigError, GeometryError, InputError, SketchmodError
from .pipeline import Components, SamplerConfig, sample
from .rasters import decode_raster_b64, encode_raster_b64, to_grayscale
from .seeding import token_embedding
from .sketch_semantics import EncoderConfig, derive_masks


class GenerateRequest(BaseModel):
    sketch: str = Field(description="base64-encoded PNG")
    caption: str = Field(min_length=1)
    seed: int = 0
    inference_steps: int = Field(default=50, ge=1)
    modulated_fraction: float = Field(default=0.1, gt=0.0, le=1.0)
    return_overlays: bool = False


class StepTraceEntry(BaseModel):
    step: int
    modulated: bool


class GenerateResponse(BaseModel):
    image: str
    step_trace: List[StepTraceEntry]
    overlays: Optional[Dict] = None


class MasksRequest(BaseModel):
    sketch: str = Field(description="base64-encoded PNG")
    labels: List[str] = Field(min_length=1)
    threshold: float = Field(default=0.5, gt=-1.0, lt=1.0)


def _error_body(code: str, message: str, field: Optional[str] = None) -> Dict:
    body = {"code": code, "message": message}
    if field:
        body["field"] = field
    return body


def create_app(components: Components, run_config: Optional[RunConfig] = None) -> FastAPI:
    app = FastAPI(title="sketchmod", docs_url=None, redoc_url=None)
    run_config = run_config or RunConfig()

    @app.exception_handler(RequestValidationError)
    async def on_validation_error(request: Request, exc: RequestValidationError):
        first = exc.errors()[0] if exc.errors() else {}
        field = ".".join(str(p) for p in first.get("loc", []) if p != "body") or None
        return JSONResponse(
            status_code=400,
            content=_error_body("validation_error", first.get("msg", "invalid request"), field),
        )

    @app.exception_handler(GeometryError)
    async def on_geometry_error(request: Request, exc: GeometryError):
        return JSONResponse(status_code=422, content=_error_body("geometry_error", str(exc)))

    @app.exception_handler(ConfigError)
    async def on_config_error(request: Request, exc: ConfigError):
        return JSONResponse(status_code=422, content=_error_body("config_error", str(exc)))

    @app.exception_handler(InputError)
    async def on_input_error(request: Request, exc: InputError):
        # Undecodable payloads are schema violations, like failed validation.
        return JSONResponse(status_code=400, content=_error_body("input_error", str(exc)))

    @app.exception_handler(SketchmodError)
    async def on_component_error(request: Request, exc: SketchmodError):
        return JSONResponse(status_code=500, content=_error_body("component_error", str(exc)))

    @app.get("/v1/health")
    async def health():
        return {"status": "ok"}

    @app.get("/v1/config")
    async def config_view():
        return {
            "backbone": {
                "image_size": components.backbone.image_size,
                "latent_channels": components.backbone.latent_channels,
                "latent_size": components.backbone.latent_size,
            },
            "probe_layers": {
                lid: list(hw) for lid, hw in components.backbone.probe_layers().items()
            },
            "modnet_parameters": components.modnet.parameter_count(),
        }

    @app.post("/v1/generate", response_model=GenerateResponse)
    async def generate(request: GenerateRequest) -> GenerateResponse:
        sketch = to_grayscale(decode_raster_b64(request.sketch))
        sampler = SamplerConfig(
            inference_steps=request.inference_steps,
            modulated_fraction=request.modulated_fraction,
            seed=request.seed,
        )
        result = sample(
            sketch,
            request.caption,
            sampler,
            components,
            collect_overlays=request.return_overlays,
        )
        overlays = None
        if request.return_overlays:
            overlays = _build_overlays(components, sketch, request.caption, result)
        return GenerateResponse(
            image=encode_raster_b64(result.image),
            step_trace=[
                StepTraceEntry(step=t.step, modulated=t.modulated) for t in result.step_trace
            ],
            overlays=overlays,
        )

    @app.post("/v1/masks")
    async def masks(request: MasksRequest):
        sketch = to_grayscale(decode_raster_b64(request.sketch))
        grid = components.encoder.encode(sketch, EncoderConfig(frozen_reference=True))
        triples = [
            (i, label, token_embedding(label, grid.channels, salt="label"))
            for i, label in enumerate(request.labels)
        ]
        mask_set = derive_masks(grid, triples, threshold=request.threshold)
        return {
            "source": mask_set.source,
            "grid": list(mask_set.grid_hw),
            "masks": [
                {
                    "token_index": i,
                    "label": mask_set.token_labels[i],
                    "empty": bool(i in mask_set.empty_token_indices()),
                    "mask": encode_raster_b64(mask_set.masks[i].astype(float)),
                }
                for i in sorted(mask_set.masks)
            ],
        }

    return app


def _build_overlays(components: Components, sketch, caption: str, result) -> Dict:
    """Overlay bundle: derived masks, first-step attention, scale/shift maps."""
    grid = components.encoder.encode(sketch, EncoderConfig(frozen_reference=True))
    tokens = caption.lower().split()
    triples = [
        (i, tok, token_embedding(tok, grid.channels, salt="label"))
        for i, tok in enumerate(tokens)
    ]
    mask_set = derive_masks(grid, triples)
    overlays: Dict = {
        "masks": {
            mask_set.token_labels[i]: encode_raster_b64(mask_set.masks[i].astype(float))
            for i in sorted(mask_set.masks)
        }
    }
    if result.overlays is not None:
        import numpy as np

        def normalized(arr):
            span = arr.max() - arr.min()
            return (arr - arr.min()) / span if span > 0 else np.zeros_like(arr)

        overlays["attention"] = {
            lid: encode_raster_b64(normalized(arr))
            for lid, arr in result.overlays.attention.items()
        }
        overlays["scale_map"] = encode_raster_b64(normalized(result.overlays.scale_map))
        overlays["shift_map"] = encode_raster_b64(normalized(result.overlays.shift_map))
    return overlays


def create_default_app(
    config_path: Optional[str] = None, checkpoint: Optional[str] = None
) -> FastAPI:
    from .config import build_components, load_run_config

    run_config = load_run_config(config_path)
    components = build_components(run_config, checkpoint=checkpoint)
    app = create_app(components, run_config)

    studio_dir = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if studio_dir.exists():
        from fastapi.staticfiles import StaticFiles

        app.mount("/studio", StaticFiles(directory=studio_dir, html=True), name="studio")
    return app
