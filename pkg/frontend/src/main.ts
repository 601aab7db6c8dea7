/**
 * Studio wiring: drawing canvas, caption box, generate button, result view
 * with overlay toggles and legends, dismissible error banner.
 */

import { ServiceError, StudioApi } from "./api.js";
import { colormapFor, expandToCanvas, legendStops } from "./overlay.js";
import { rasterizeToPayload } from "./rasterize.js";
import {
  CANVAS_SIZE,
  SessionState,
  addStroke,
  canSubmit,
  clearCanvas,
  dismissBanner,
  initialState,
  overlayIds,
  requestFailed,
  responseReceived,
  setCaption,
  setSeed,
  submitStarted,
  toggleOverlay,
  visibleOverlays,
} from "./state.js";
import { Stroke } from "./types.js";

const api = new StudioApi("");
let state: SessionState = initialState();
let rasterTarget = 64;

const app = document.getElementById("app")!;
app.innerHTML = `
  <h1>sketchmod studio</h1>
  <div id="banner" hidden></div>
  <div class="panes">
    <section>
      <canvas id="draw" width="${CANVAS_SIZE}" height="${CANVAS_SIZE}"></canvas>
      <div class="row">
        <input id="caption" placeholder="caption, e.g. a box and a disk" />
        <input id="seed" type="number" value="0" title="seed" />
        <button id="generate" disabled>Generate</button>
        <button id="clear">Clear</button>
      </div>
    </section>
    <section>
      <canvas id="result" width="${CANVAS_SIZE}" height="${CANVAS_SIZE}"></canvas>
      <div id="toggles" class="row"></div>
      <div id="legend"></div>
    </section>
  </div>
`;

const drawCanvas = document.getElementById("draw") as HTMLCanvasElement;
const resultCanvas = document.getElementById("result") as HTMLCanvasElement;
const captionInput = document.getElementById("caption") as HTMLInputElement;
const seedInput = document.getElementById("seed") as HTMLInputElement;
const generateButton = document.getElementById("generate") as HTMLButtonElement;
const clearButton = document.getElementById("clear") as HTMLButtonElement;
const banner = document.getElementById("banner")!;
const toggles = document.getElementById("toggles")!;
const legend = document.getElementById("legend")!;

api.config().then((config) => {
  rasterTarget = config.backbone.image_size;
}).catch(() => { /* defaults stay */ });

// --- drawing ---------------------------------------------------------------

let activeStroke: Stroke | null = null;

function canvasPoint(event: PointerEvent) {
  const rect = drawCanvas.getBoundingClientRect();
  return {
    x: ((event.clientX - rect.left) * CANVAS_SIZE) / rect.width,
    y: ((event.clientY - rect.top) * CANVAS_SIZE) / rect.height,
  };
}

drawCanvas.addEventListener("pointerdown", (event) => {
  activeStroke = { points: [canvasPoint(event)], width: 4 };
  drawCanvas.setPointerCapture(event.pointerId);
});

drawCanvas.addEventListener("pointermove", (event) => {
  if (!activeStroke) return;
  activeStroke.points.push(canvasPoint(event));
  redrawSketch();
});

drawCanvas.addEventListener("pointerup", () => {
  if (activeStroke && activeStroke.points.length > 0) {
    state = addStroke(state, activeStroke);
  }
  activeStroke = null;
  render();
});

function redrawSketch() {
  const ctx = drawCanvas.getContext("2d")!;
  ctx.fillStyle = "white";
  ctx.fillRect(0, 0, CANVAS_SIZE, CANVAS_SIZE);
  ctx.strokeStyle = "black";
  ctx.lineCap = "round";
  ctx.lineJoin = "round";
  const strokes = activeStroke
    ? [...state.document.strokes, activeStroke]
    : state.document.strokes;
  for (const stroke of strokes) {
    ctx.lineWidth = stroke.width;
    ctx.beginPath();
    stroke.points.forEach((p, i) => (i === 0 ? ctx.moveTo(p.x, p.y) : ctx.lineTo(p.x, p.y)));
    ctx.stroke();
  }
}

// --- generation ------------------------------------------------------------

async function submit() {
  if (!canSubmit(state)) return;
  state = submitStarted(state);
  render();
  try {
    const payload = rasterizeToPayload(state.document, {
      width: rasterTarget,
      height: rasterTarget,
    });
    const response = await api.generate({
      sketch: payload,
      caption: state.caption,
      seed: state.seed,
      return_overlays: true,
    });
    state = responseReceived(state, response);
  } catch (error) {
    const message = error instanceof ServiceError
      ? `${error.code}: ${error.message}`
      : String(error);
    state = requestFailed(state, message);
  }
  render();
}

generateButton.addEventListener("click", submit);
clearButton.addEventListener("click", () => {
  state = clearCanvas(state);
  render();
});
captionInput.addEventListener("input", () => {
  state = setCaption(state, captionInput.value);
  render();
});
seedInput.addEventListener("input", () => {
  state = setSeed(state, Number(seedInput.value) || 0);
});
banner.addEventListener("click", () => {
  state = dismissBanner(state);
  render();
});

// --- result compositing ----------------------------------------------------

function decodePng(base64: string): Promise<HTMLImageElement> {
  return new Promise((resolve, reject) => {
    const img = new Image();
    img.onload = () => resolve(img);
    img.onerror = reject;
    img.src = `data:image/png;base64,${base64}`;
  });
}

function grayValues(img: HTMLImageElement): { values: Float32Array; w: number; h: number } {
  const off = document.createElement("canvas");
  off.width = img.naturalWidth;
  off.height = img.naturalHeight;
  const ctx = off.getContext("2d")!;
  ctx.drawImage(img, 0, 0);
  const data = ctx.getImageData(0, 0, off.width, off.height).data;
  const values = new Float32Array(off.width * off.height);
  for (let i = 0; i < values.length; i++) {
    values[i] = data[i * 4] / 255;
  }
  return { values, w: off.width, h: off.height };
}

function overlayPayload(id: string): string | undefined {
  const overlays = state.lastResponse?.overlays;
  if (!overlays) return undefined;
  if (id.startsWith("attention:")) return overlays.attention?.[id.slice(10)];
  if (id.startsWith("mask:")) return overlays.masks?.[id.slice(5)];
  if (id === "scale") return overlays.scale_map;
  if (id === "shift") return overlays.shift_map;
  return undefined;
}

async function renderResult() {
  const ctx = resultCanvas.getContext("2d")!;
  ctx.clearRect(0, 0, CANVAS_SIZE, CANVAS_SIZE);
  if (!state.lastResponse) return;
  const image = await decodePng(state.lastResponse.image);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(image, 0, 0, CANVAS_SIZE, CANVAS_SIZE);

  for (const id of visibleOverlays(state)) {
    const payload = overlayPayload(id);
    if (!payload) continue;
    const { values, w, h } = grayValues(await decodePng(payload));
    const expanded = expandToCanvas(values, h, w, CANVAS_SIZE, CANVAS_SIZE);
    const colormap = colormapFor(id);
    const imageData = ctx.getImageData(0, 0, CANVAS_SIZE, CANVAS_SIZE);
    for (let i = 0; i < expanded.length; i++) {
      const [r, g, b, a] = colormap(expanded[i]);
      const alpha = a / 255;
      imageData.data[i * 4] = Math.round(imageData.data[i * 4] * (1 - alpha) + r * alpha);
      imageData.data[i * 4 + 1] = Math.round(imageData.data[i * 4 + 1] * (1 - alpha) + g * alpha);
      imageData.data[i * 4 + 2] = Math.round(imageData.data[i * 4 + 2] * (1 - alpha) + b * alpha);
    }
    ctx.putImageData(imageData, 0, 0);
  }
}

function renderLegend() {
  legend.innerHTML = "";
  for (const id of visibleOverlays(state)) {
    const stops = legendStops(id)
      .map((s) => `<span class="stop">${s.label}</span>`)
      .join("");
    const kind = id === "scale" || id === "shift" ? "diverging" : "sequential";
    legend.insertAdjacentHTML(
      "beforeend",
      `<div class="legend-row"><strong>${id}</strong> <span class="ramp ${kind}"></span> ${stops}</div>`,
    );
  }
}

function render() {
  generateButton.disabled = !canSubmit(state);
  generateButton.textContent = state.pending ? "Generating…" : "Generate";
  banner.hidden = state.errorBanner === null;
  banner.textContent = state.errorBanner ?? "";

  toggles.innerHTML = "";
  if (state.lastResponse) {
    for (const id of overlayIds(state.lastResponse)) {
      const button = document.createElement("button");
      button.textContent = (state.overlayVisibility[id] ? "✓ " : "") + id;
      button.addEventListener("click", () => {
        state = toggleOverlay(state, id);
        render();
      });
      toggles.appendChild(button);
    }
  }
  redrawSketch();
  renderLegend();
  void renderResult();
}

render();
