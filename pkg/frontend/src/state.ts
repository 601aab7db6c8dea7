/**
 * Session state and its pure transitions.
 *
 * Redraws are pure functions of the state; responses are stored frozen
 * and never mutated.  At most one generate request is in flight: submit
 * while pending is a no-op by construction.
 */

import { GenerateResponseBody, Stroke, StrokeDocument } from "./types.js";

export interface SessionState {
  document: StrokeDocument;
  caption: string;
  seed: number;
  pending: boolean;
  lastResponse: GenerateResponseBody | null;
  /** overlay id -> visible; ids exist only for layers in the last response */
  overlayVisibility: Record<string, boolean>;
  errorBanner: string | null;
}

export const CANVAS_SIZE = 512;

export function initialState(): SessionState {
  return {
    document: { strokes: [], canvasSize: { width: CANVAS_SIZE, height: CANVAS_SIZE } },
    caption: "",
    seed: 0,
    pending: false,
    lastResponse: null,
    overlayVisibility: {},
    errorBanner: null,
  };
}

export function addStroke(state: SessionState, stroke: Stroke): SessionState {
  const clamped: Stroke = {
    width: stroke.width,
    points: stroke.points.map((p) => ({
      x: Math.max(0, Math.min(state.document.canvasSize.width, p.x)),
      y: Math.max(0, Math.min(state.document.canvasSize.height, p.y)),
    })),
  };
  return {
    ...state,
    document: { ...state.document, strokes: [...state.document.strokes, clamped] },
  };
}

export function clearCanvas(state: SessionState): SessionState {
  return { ...state, document: { ...state.document, strokes: [] } };
}

export function setCaption(state: SessionState, caption: string): SessionState {
  return { ...state, caption };
}

export function setSeed(state: SessionState, seed: number): SessionState {
  return { ...state, seed };
}

export function canSubmit(state: SessionState): boolean {
  return !state.pending && state.caption.trim().length > 0;
}

export function submitStarted(state: SessionState): SessionState {
  return { ...state, pending: true, errorBanner: null };
}

/** Overlay ids derivable from a response: one per attention layer plus the
 * scale/shift maps and one per mask label. */
export function overlayIds(response: GenerateResponseBody): string[] {
  const ids: string[] = [];
  if (response.overlays) {
    for (const layer of Object.keys(response.overlays.attention ?? {})) {
      ids.push(`attention:${layer}`);
    }
    for (const label of Object.keys(response.overlays.masks ?? {})) {
      ids.push(`mask:${label}`);
    }
    if (response.overlays.scale_map) ids.push("scale");
    if (response.overlays.shift_map) ids.push("shift");
  }
  return ids;
}

export function responseReceived(
  state: SessionState,
  response: GenerateResponseBody,
): SessionState {
  const frozen = Object.freeze(response);
  const visibility: Record<string, boolean> = {};
  for (const id of overlayIds(frozen)) {
    visibility[id] = false;
  }
  return {
    ...state,
    pending: false,
    lastResponse: frozen,
    overlayVisibility: visibility,
    errorBanner: null,
  };
}

export function requestFailed(state: SessionState, message: string): SessionState {
  return { ...state, pending: false, errorBanner: message };
}

export function dismissBanner(state: SessionState): SessionState {
  return { ...state, errorBanner: null };
}

export function toggleOverlay(state: SessionState, id: string): SessionState {
  if (!(id in state.overlayVisibility)) return state;
  return {
    ...state,
    overlayVisibility: { ...state.overlayVisibility, [id]: !state.overlayVisibility[id] },
  };
}

/** The overlay ids to composite, in a stable order. */
export function visibleOverlays(state: SessionState): string[] {
  return Object.keys(state.overlayVisibility).filter((id) => state.overlayVisibility[id]);
}
