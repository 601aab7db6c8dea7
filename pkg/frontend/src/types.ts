export interface StrokePoint {
  x: number;
  y: number;
}

export interface Stroke {
  points: StrokePoint[];
  width: number;
}

/** A freehand drawing: black strokes on a white canvas. */
export interface StrokeDocument {
  strokes: Stroke[];
  canvasSize: { width: number; height: number };
}

export interface StepTraceEntry {
  step: number;
  modulated: boolean;
}

export interface OverlayBundle {
  masks: Record<string, string>;
  attention?: Record<string, string>;
  scale_map?: string;
  shift_map?: string;
}

export interface GenerateRequestBody {
  sketch: string;
  caption: string;
  seed: number;
  inference_steps?: number;
  modulated_fraction?: number;
  return_overlays?: boolean;
}

export interface GenerateResponseBody {
  image: string;
  step_trace: StepTraceEntry[];
  overlays: OverlayBundle | null;
}

export interface ServiceErrorBody {
  code: string;
  message: string;
  field?: string;
}

export interface ServiceConfig {
  backbone: { image_size: number; latent_channels: number; latent_size: number };
  probe_layers: Record<string, [number, number]>;
  modnet_parameters: number;
}
