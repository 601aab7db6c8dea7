/**
 * Overlay scaling and color mapping.
 *
 * Overlays are tiny grids (8x8 … 128x128) drawn over the 512-px canvas.
 * Cell (i, j) of an h x w overlay must cover exactly the canvas region
 * that mask derivation's patch (i, j) corresponds to, so scaling uses
 * exact rational cell edges (no resampling drift).
 */

export interface CellRect {
  x0: number;
  y0: number;
  x1: number;
  y1: number;
}

/** Canvas rectangle covered by overlay cell (row, col) of an h x w grid. */
export function cellRect(
  row: number, col: number, gridH: number, gridW: number,
  canvasW: number, canvasH: number,
): CellRect {
  return {
    x0: (col * canvasW) / gridW,
    y0: (row * canvasH) / gridH,
    x1: ((col + 1) * canvasW) / gridW,
    y1: ((row + 1) * canvasH) / gridH,
  };
}

/** Nearest-cell expansion of a grid to canvas pixels; the inverse of
 * cellRect up to one device pixel. */
export function expandToCanvas(
  values: Float32Array | number[], gridH: number, gridW: number,
  canvasW: number, canvasH: number,
): Float32Array {
  const out = new Float32Array(canvasW * canvasH);
  for (let y = 0; y < canvasH; y++) {
    const row = Math.min(gridH - 1, Math.floor((y * gridH) / canvasH));
    for (let x = 0; x < canvasW; x++) {
      const col = Math.min(gridW - 1, Math.floor((x * gridW) / canvasW));
      out[y * canvasW + x] = Number(values[row * gridW + col]);
    }
  }
  return out;
}

export type Rgba = [number, number, number, number];

/** Sequential colormap for non-negative data (attention, masks):
 * transparent at 0 ramping to saturated orange. */
export function sequentialColor(value: number): Rgba {
  const v = Math.max(0, Math.min(1, value));
  return [255, Math.round(140 * (1 - v) + 60 * v), 0, Math.round(200 * v)];
}

/** Diverging colormap for signed data (scale/shift maps): blue below the
 * midpoint, red above, transparent near the midpoint. */
export function divergingColor(value: number): Rgba {
  const v = Math.max(0, Math.min(1, value)) * 2 - 1;
  const alpha = Math.round(200 * Math.abs(v));
  return v < 0 ? [40, 90, 255, alpha] : [255, 50, 40, alpha];
}

export function colormapFor(overlayId: string): (value: number) => Rgba {
  return overlayId === "scale" || overlayId === "shift" ? divergingColor : sequentialColor;
}

/** Legend stops rendered next to every visible overlay. */
export function legendStops(overlayId: string): { value: number; label: string }[] {
  if (overlayId === "scale" || overlayId === "shift") {
    return [
      { value: 0, label: "min" },
      { value: 0.5, label: "0" },
      { value: 1, label: "max" },
    ];
  }
  return [
    { value: 0, label: "0" },
    { value: 1, label: "1" },
  ];
}
